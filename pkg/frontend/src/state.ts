// Studio session state: placements, sliders, caption, and the result
// gallery. Pure functions only; DOM wiring lives in ui.ts.

import {
  CanvasDocument,
  GalleryEntry,
  InferRequestDoc,
  InferResponseDoc,
  InstanceAsset,
  PlacementDoc,
  WeightOverrides,
} from "./types.js";

export const SLIDER_MIN = 0;
export const SLIDER_MAX = 4;

export interface StudioState {
  canvasWidth: number;
  canvasHeight: number;
  instances: Map<string, InstanceAsset>;
  placements: PlacementDoc[];
  backgroundPath: string | null;
  caption: string;
  weights: WeightOverrides;
  seed: number;
  steps: number;
  sketchClipPath: string | null;
  sketchFrames: string[] | null;
  gallery: GalleryEntry[];
  nextRequestId: number;
  selected: number | null; // index into placements
}

export function createState(canvasWidth: number, canvasHeight: number): StudioState {
  return {
    canvasWidth,
    canvasHeight,
    instances: new Map(),
    placements: [],
    backgroundPath: null,
    caption: "",
    weights: { bg: 1, text: 1, inst: {} },
    seed: 0,
    steps: 50,
    sketchClipPath: null,
    sketchFrames: null,
    gallery: [],
    nextRequestId: 1,
    selected: null,
  };
}

export function clampSlider(value: number): number {
  return Math.min(SLIDER_MAX, Math.max(SLIDER_MIN, value));
}

export function setWeight(state: StudioState, key: "bg" | "text", value: number): void {
  state.weights[key] = clampSlider(value);
}

export function setInstanceWeight(state: StudioState, index: number, value: number): void {
  state.weights.inst[index] = clampSlider(value);
}

export interface DropResult {
  placed: boolean;
  placement?: PlacementDoc;
}

/** Anchor a drop at its footprint center; drops outside the canvas are
 * ignored so the caller can show a visual cue. */
export function placeInstance(
  state: StudioState,
  instanceId: string,
  dropX: number,
  dropY: number,
  scale = 1.0,
): DropResult {
  const asset = state.instances.get(instanceId);
  if (!asset) throw new Error(`unknown instance id ${instanceId}`);
  if (dropX < 0 || dropY < 0 || dropX >= state.canvasWidth || dropY >= state.canvasHeight) {
    return { placed: false };
  }
  const sw = Math.max(1, Math.floor(asset.width * scale + 0.5));
  const sh = Math.max(1, Math.floor(asset.height * scale + 0.5));
  const nextZ =
    state.placements.length === 0
      ? 0
      : Math.max(...state.placements.map((p) => p.z_order)) + 1;
  const placement: PlacementDoc = {
    instance_id: instanceId,
    x: Math.floor(dropX - sw / 2),
    y: Math.floor(dropY - sh / 2),
    scale,
    z_order: nextZ,
  };
  state.placements.push(placement);
  state.selected = state.placements.length - 1;
  return { placed: true, placement };
}

export function serializeCanvasSpec(state: StudioState): CanvasDocument {
  return {
    width: state.canvasWidth,
    height: state.canvasHeight,
    background_path: state.backgroundPath,
    placements: state.placements.map((p) => ({
      instance_id: p.instance_id,
      x: p.x,
      y: p.y,
      scale: p.scale,
      z_order: p.z_order,
    })),
  };
}

export function buildInferRequest(state: StudioState): InferRequestDoc {
  const request: InferRequestDoc = {
    canvas: serializeCanvasSpec(state),
    caption: state.caption,
    weight_overrides: {
      bg: state.weights.bg,
      text: state.weights.text,
      inst: { ...state.weights.inst },
    },
    seed: state.seed,
    steps: state.steps,
  };
  if (state.sketchFrames) {
    request.sketches = state.sketchFrames;
  } else if (state.sketchClipPath) {
    request.sketch_clip_path = state.sketchClipPath;
  }
  return request;
}

/** Record a completed run. Entries append in arrival order and keep the
 * exact request snapshot that produced them; a stale response (superseded
 * by a newer run) still lands and never overwrites anything. */
export function recordResult(
  state: StudioState,
  requestId: number,
  request: InferRequestDoc,
  response: InferResponseDoc,
): GalleryEntry {
  const entry: GalleryEntry = {
    requestId,
    request: JSON.parse(JSON.stringify(request)),
    frames: response.frames,
    modelVersion: response.model_version,
    timingMs: response.timing_ms,
  };
  state.gallery.push(entry);
  return entry;
}

export function nextRequestId(state: StudioState): number {
  return state.nextRequestId++;
}
