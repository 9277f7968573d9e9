// Wire documents exchanged with the inference service.

export interface PlacementDoc {
  instance_id: string;
  x: number;
  y: number;
  scale: number;
  z_order: number;
}

export interface CanvasDocument {
  width: number;
  height: number;
  background_path: string | null;
  placements: PlacementDoc[];
}

export interface WeightOverrides {
  bg: number;
  text: number;
  inst: Record<number, number>;
}

export interface InferRequestDoc {
  canvas: CanvasDocument;
  sketches?: string[];
  sketch_clip_path?: string;
  caption: string;
  weight_overrides: WeightOverrides;
  seed: number;
  steps: number;
}

export interface InferResponseDoc {
  frames: string[];
  request: InferRequestDoc;
  timing_ms: number;
  model_version: string;
  instance_groups: number;
}

// Client-side representation of an uploaded instance image.
export interface InstanceAsset {
  id: string;
  width: number;
  height: number;
  rgb: Uint8Array; // height*width*3
  mask: Uint8Array | null; // height*width, 0/1
}

export interface GalleryEntry {
  requestId: number;
  request: InferRequestDoc;
  frames: string[];
  modelVersion: string;
  timingMs: number;
}
