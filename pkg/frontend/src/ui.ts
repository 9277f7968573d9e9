// DOM wiring for the colorization studio. All state transitions go through
// state.ts; this file only reads inputs and paints results.

import { ServiceClient } from "./api.js";
import { composePreview } from "./compose.js";
import {
  StudioState,
  buildInferRequest,
  createState,
  nextRequestId,
  placeInstance,
  recordResult,
  setInstanceWeight,
  setWeight,
} from "./state.js";
import { InstanceAsset } from "./types.js";

const PREVIEW_SCALE = 8;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

async function fileToAsset(id: string, file: Blob): Promise<InstanceAsset> {
  const bitmap = await createImageBitmap(file);
  const off = document.createElement("canvas");
  off.width = bitmap.width;
  off.height = bitmap.height;
  const ctx = off.getContext("2d")!;
  ctx.drawImage(bitmap, 0, 0);
  const data = ctx.getImageData(0, 0, bitmap.width, bitmap.height).data;
  const rgb = new Uint8Array(bitmap.width * bitmap.height * 3);
  for (let i = 0; i < bitmap.width * bitmap.height; i++) {
    rgb[i * 3] = data[i * 4];
    rgb[i * 3 + 1] = data[i * 4 + 1];
    rgb[i * 3 + 2] = data[i * 4 + 2];
  }
  return { id, width: bitmap.width, height: bitmap.height, rgb, mask: null };
}

function paintPreview(state: StudioState) {
  const canvas = el<HTMLCanvasElement>("preview");
  canvas.width = state.canvasWidth * PREVIEW_SCALE;
  canvas.height = state.canvasHeight * PREVIEW_SCALE;
  const ctx = canvas.getContext("2d")!;
  ctx.imageSmoothingEnabled = false;
  const bytes = composePreview(
    state.canvasWidth,
    state.canvasHeight,
    state.instances,
    state.placements,
  );
  const image = new ImageData(state.canvasWidth, state.canvasHeight);
  for (let i = 0; i < state.canvasWidth * state.canvasHeight; i++) {
    image.data[i * 4] = bytes[i * 3];
    image.data[i * 4 + 1] = bytes[i * 3 + 1];
    image.data[i * 4 + 2] = bytes[i * 3 + 2];
    image.data[i * 4 + 3] = 255;
  }
  const off = document.createElement("canvas");
  off.width = state.canvasWidth;
  off.height = state.canvasHeight;
  off.getContext("2d")!.putImageData(image, 0, 0);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function refreshWeightSliders(state: StudioState) {
  const box = el<HTMLDivElement>("instance-weights");
  box.innerHTML = "";
  state.placements.forEach((p, index) => {
    const row = document.createElement("div");
    row.className = "slider-row";
    const label = document.createElement("label");
    label.textContent = `instance ${index} (${p.instance_id})`;
    const slider = document.createElement("input");
    slider.type = "range";
    slider.min = "0";
    slider.max = "4";
    slider.step = "0.1";
    slider.value = String(state.weights.inst[index] ?? 1);
    slider.addEventListener("input", () => {
      setInstanceWeight(state, index, Number(slider.value));
      value.textContent = slider.value;
    });
    const value = document.createElement("span");
    value.textContent = slider.value;
    row.append(label, slider, value);
    box.appendChild(row);
  });
}

function addGalleryCard(state: StudioState, entryIndex: number) {
  const entry = state.gallery[entryIndex];
  const card = document.createElement("div");
  card.className = "gallery-card";

  const img = document.createElement("img");
  img.width = state.canvasWidth * PREVIEW_SCALE;
  img.height = state.canvasHeight * PREVIEW_SCALE;
  img.style.imageRendering = "pixelated";
  img.src = `data:image/png;base64,${entry.frames[0]}`;

  const scrubber = document.createElement("input");
  scrubber.type = "range";
  scrubber.min = "0";
  scrubber.max = String(entry.frames.length - 1);
  scrubber.value = "0";
  scrubber.addEventListener("input", () => {
    img.src = `data:image/png;base64,${entry.frames[Number(scrubber.value)]}`;
  });

  const meta = document.createElement("details");
  const summary = document.createElement("summary");
  summary.textContent = `run ${entry.requestId} — seed ${entry.request.seed}, ` +
    `W_text ${entry.request.weight_overrides.text}, ${entry.timingMs.toFixed(0)} ms`;
  const pre = document.createElement("pre");
  pre.textContent = JSON.stringify(entry.request, null, 1);
  meta.append(summary, pre);

  card.append(img, scrubber, meta);
  el<HTMLDivElement>("gallery").prepend(card);
}

function flashCue(message: string) {
  const cue = el<HTMLDivElement>("cue");
  cue.textContent = message;
  cue.style.opacity = "1";
  setTimeout(() => (cue.style.opacity = "0"), 1200);
}

export async function startStudio() {
  const baseUrl = (el<HTMLInputElement>("server-url")).value.replace(/\/$/, "");
  const client = new ServiceClient(baseUrl);
  const health = await client.health();
  el<HTMLSpanElement>("model-version").textContent = health.model_version;

  const width = Number(el<HTMLInputElement>("canvas-width").value);
  const height = Number(el<HTMLInputElement>("canvas-height").value);
  const state = createState(width, height);
  paintPreview(state);

  let dragId: string | null = null;

  el<HTMLInputElement>("instance-file").addEventListener("change", async (ev) => {
    const input = ev.target as HTMLInputElement;
    if (!input.files || input.files.length === 0) return;
    for (const file of Array.from(input.files)) {
      const id = await client.uploadInstance(file);
      const asset = await fileToAsset(id, file);
      state.instances.set(id, asset);
      const thumb = document.createElement("img");
      thumb.src = URL.createObjectURL(file);
      thumb.title = id;
      thumb.className = "thumb";
      thumb.draggable = true;
      thumb.addEventListener("dragstart", () => (dragId = id));
      thumb.addEventListener("click", () => {
        // click-to-place at canvas center as a drag fallback
        const res = placeInstance(state, id, state.canvasWidth / 2, state.canvasHeight / 2);
        if (res.placed) {
          paintPreview(state);
          refreshWeightSliders(state);
        }
      });
      el<HTMLDivElement>("palette").appendChild(thumb);
    }
    input.value = "";
  });

  const preview = el<HTMLCanvasElement>("preview");
  preview.addEventListener("dragover", (ev) => ev.preventDefault());
  preview.addEventListener("drop", (ev) => {
    ev.preventDefault();
    if (!dragId) return;
    const rect = preview.getBoundingClientRect();
    const x = Math.floor((ev.clientX - rect.left) / PREVIEW_SCALE);
    const y = Math.floor((ev.clientY - rect.top) / PREVIEW_SCALE);
    const scale = Number(el<HTMLInputElement>("place-scale").value) || 1;
    const result = placeInstance(state, dragId, x, y, scale);
    if (!result.placed) {
      flashCue("drop landed outside the canvas");
      return;
    }
    paintPreview(state);
    refreshWeightSliders(state);
  });

  el<HTMLButtonElement>("undo-placement").addEventListener("click", () => {
    state.placements.pop();
    paintPreview(state);
    refreshWeightSliders(state);
  });

  el<HTMLInputElement>("background-file").addEventListener("change", async (ev) => {
    const input = ev.target as HTMLInputElement;
    if (!input.files || input.files.length === 0) return;
    const id = await client.uploadInstance(input.files[0]);
    state.backgroundPath = `upload:${id}`;
    el<HTMLSpanElement>("background-name").textContent = state.backgroundPath;
    input.value = "";
  });
  el<HTMLButtonElement>("clear-background").addEventListener("click", () => {
    state.backgroundPath = null;
    el<HTMLSpanElement>("background-name").textContent = "none";
  });

  el<HTMLInputElement>("sketch-files").addEventListener("change", async (ev) => {
    const input = ev.target as HTMLInputElement;
    if (!input.files || input.files.length === 0) return;
    const files = Array.from(input.files).sort((a, b) => a.name.localeCompare(b.name));
    const frames: string[] = [];
    for (const file of files) {
      const buf = new Uint8Array(await file.arrayBuffer());
      let binary = "";
      buf.forEach((b) => (binary += String.fromCharCode(b)));
      frames.push(btoa(binary));
    }
    state.sketchFrames = frames;
    el<HTMLSpanElement>("sketch-count").textContent = `${frames.length} frames`;
  });

  const bgSlider = el<HTMLInputElement>("w-bg");
  bgSlider.addEventListener("input", () => setWeight(state, "bg", Number(bgSlider.value)));
  const textSlider = el<HTMLInputElement>("w-text");
  textSlider.addEventListener("input", () => setWeight(state, "text", Number(textSlider.value)));

  el<HTMLTextAreaElement>("caption").addEventListener("input", (ev) => {
    state.caption = (ev.target as HTMLTextAreaElement).value;
  });
  el<HTMLInputElement>("seed").addEventListener("input", (ev) => {
    state.seed = Number((ev.target as HTMLInputElement).value) || 0;
  });
  el<HTMLInputElement>("steps").addEventListener("input", (ev) => {
    state.steps = Number((ev.target as HTMLInputElement).value) || 50;
  });

  el<HTMLButtonElement>("run").addEventListener("click", async () => {
    if (!state.sketchFrames && !state.sketchClipPath) {
      flashCue("load a sketch clip first");
      return;
    }
    const requestId = nextRequestId(state);
    const request = buildInferRequest(state);
    const button = el<HTMLButtonElement>("run");
    button.disabled = true;
    try {
      const response = await client.infer(request);
      recordResult(state, requestId, request, response);
      addGalleryCard(state, state.gallery.length - 1);
    } catch (err) {
      flashCue(String(err));
    } finally {
      button.disabled = false;
    }
  });
}

declare global {
  interface Window {
    startStudio: typeof startStudio;
  }
}
if (typeof window !== "undefined") {
  window.startStudio = startStudio;
}
