// Client-side canvas preview: a byte-exact port of the server's painter's
// algorithm so the user sees exactly what will condition the model.
//
// Ordering, rounding, and resampling must match the service bit for bit:
//  - placements sort by (z_order, instance_id, x, y, scale)
//  - scaled size = max(1, floor(d * scale + 0.5))
//  - nearest-neighbor source index = floor((dst + 0.5) * src / dstSize)
//  - alpha = explicit mask, else any non-zero channel

import { InstanceAsset, PlacementDoc } from "./types.js";

export function scaledSize(h: number, w: number, scale: number): [number, number] {
  return [
    Math.max(1, Math.floor(h * scale + 0.5)),
    Math.max(1, Math.floor(w * scale + 0.5)),
  ];
}

function nearestIndex(dst: number, srcLen: number, dstLen: number): number {
  return Math.min(srcLen - 1, Math.floor(((dst + 0.5) * srcLen) / dstLen));
}

function comparePlacements(a: PlacementDoc, b: PlacementDoc): number {
  if (a.z_order !== b.z_order) return a.z_order - b.z_order;
  if (a.instance_id !== b.instance_id) return a.instance_id < b.instance_id ? -1 : 1;
  if (a.x !== b.x) return a.x - b.x;
  if (a.y !== b.y) return a.y - b.y;
  return a.scale - b.scale;
}

function alphaAt(asset: InstanceAsset, row: number, col: number): boolean {
  if (asset.mask) return asset.mask[row * asset.width + col] !== 0;
  const base = (row * asset.width + col) * 3;
  return asset.rgb[base] !== 0 || asset.rgb[base + 1] !== 0 || asset.rgb[base + 2] !== 0;
}

/** Paint placements over a blank canvas; returns height*width*3 bytes. */
export function composePreview(
  width: number,
  height: number,
  instances: Map<string, InstanceAsset>,
  placements: PlacementDoc[],
): Uint8Array {
  for (const p of placements) {
    if (!instances.has(p.instance_id)) {
      throw new Error(`unknown instance id ${p.instance_id}`);
    }
  }
  const canvas = new Uint8Array(width * height * 3);
  const ordered = [...placements].sort(comparePlacements);
  for (const p of ordered) {
    const asset = instances.get(p.instance_id)!;
    const [sh, sw] = scaledSize(asset.height, asset.width, p.scale);
    for (let r = 0; r < sh; r++) {
      const rr = p.y + r;
      if (rr < 0 || rr >= height) continue;
      const srcRow = nearestIndex(r, asset.height, sh);
      for (let c = 0; c < sw; c++) {
        const cc = p.x + c;
        if (cc < 0 || cc >= width) continue;
        const srcCol = nearestIndex(c, asset.width, sw);
        if (!alphaAt(asset, srcRow, srcCol)) continue;
        const src = (srcRow * asset.width + srcCol) * 3;
        const dst = (rr * width + cc) * 3;
        canvas[dst] = asset.rgb[src];
        canvas[dst + 1] = asset.rgb[src + 1];
        canvas[dst + 2] = asset.rgb[src + 2];
      }
    }
  }
  return canvas;
}
