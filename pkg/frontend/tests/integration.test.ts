// End-to-end checks against the real inference service: spawns the Python
// server with a micro checkpoint from the fixtures directory.

import { spawn, ChildProcess } from "node:child_process";
import { existsSync, readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { composePreview } from "../src/compose.js";
import {
  buildInferRequest,
  createState,
  placeInstance,
  setWeight,
} from "../src/state.js";
import { InstanceAsset } from "../src/types.js";

const FIXTURES = join(dirname(fileURLToPath(import.meta.url)), "fixtures");
const PORT = 8901;
const BASE = `http://127.0.0.1:${PORT}`;
const HAVE_FIXTURES = existsSync(join(FIXTURES, "micro.ckpt"));

let server: ChildProcess | null = null;

async function waitForHealth(timeoutMs = 60_000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    try {
      const res = await fetch(`${BASE}/health`);
      if (res.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((r) => setTimeout(r, 300));
  }
  throw new Error("service did not come up in time");
}

function pngBlob(b64: string): Blob {
  return new Blob([new Uint8Array(Buffer.from(b64, "base64"))], { type: "image/png" });
}

async function uploadInstance(png: string, maskPng?: string): Promise<string> {
  const form = new FormData();
  form.append("file", pngBlob(png), "instance.png");
  if (maskPng) form.append("mask", pngBlob(maskPng), "mask.png");
  const res = await fetch(`${BASE}/instances`, { method: "POST", body: form });
  expect(res.ok).toBe(true);
  const body = await res.json();
  return body.instance_id;
}

describe.skipIf(!HAVE_FIXTURES)("studio against the live service", () => {
  beforeAll(async () => {
    server = spawn(
      "python3",
      ["-m", "sketchanim.cli", "serve", "--checkpoint", join(FIXTURES, "micro.ckpt"),
       "--port", String(PORT)],
      { stdio: "ignore" },
    );
    await waitForHealth();
  }, 90_000);

  afterAll(() => {
    server?.kill();
  });

  it("echoes the serialized canvas spec byte-identically through /infer", async () => {
    const meta = JSON.parse(readFileSync(join(FIXTURES, "micro_meta.json"), "utf-8"));
    const sketches: string[] = JSON.parse(
      readFileSync(join(FIXTURES, "sketch_frames.json"), "utf-8"),
    );
    const cases = JSON.parse(readFileSync(join(FIXTURES, "compose_cases.json"), "utf-8"));
    const sprite = Object.values(cases[0].instances)[0] as any;
    const instanceId = await uploadInstance(sprite.png, sprite.mask_png);

    const state = createState(meta.width, meta.height);
    state.instances.set(instanceId, {
      id: instanceId,
      width: sprite.width,
      height: sprite.height,
      rgb: new Uint8Array(Buffer.from(sprite.rgb, "base64")),
      mask: new Uint8Array(Buffer.from(sprite.mask, "base64")),
    });
    placeInstance(state, instanceId, 8, 8, 1.0);
    state.caption = "studio round trip";
    state.seed = 3;
    state.steps = 2;
    state.sketchFrames = sketches;

    const request = buildInferRequest(state);
    const res = await fetch(`${BASE}/infer`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(request),
    });
    expect(res.ok).toBe(true);
    const body = await res.json();
    expect(JSON.stringify(body.request.canvas)).toBe(JSON.stringify(request.canvas));
    expect(JSON.stringify(body.request)).toBe(JSON.stringify(request));
    expect(body.frames).toHaveLength(sketches.length);
  }, 120_000);

  it("client preview matches the server composite for ten scripted placements", async () => {
    const cases = JSON.parse(readFileSync(join(FIXTURES, "compose_cases.json"), "utf-8"));
    expect(cases).toHaveLength(10);
    for (const c of cases) {
      const idMap = new Map<string, string>();
      const instances = new Map<string, InstanceAsset>();
      for (const [localId, data] of Object.entries<any>(c.instances)) {
        const serverId = await uploadInstance(data.png, data.mask_png);
        idMap.set(localId, serverId);
        instances.set(serverId, {
          id: serverId,
          width: data.width,
          height: data.height,
          rgb: new Uint8Array(Buffer.from(data.rgb, "base64")),
          mask: new Uint8Array(Buffer.from(data.mask, "base64")),
        });
      }
      const placements = c.placements.map((p: any) => ({
        ...p,
        instance_id: idMap.get(p.instance_id)!,
      }));
      const doc = {
        width: c.width,
        height: c.height,
        background_path: null,
        placements,
      };
      const res = await fetch(`${BASE}/compose?format=raw`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(doc),
      });
      expect(res.ok).toBe(true);
      const serverBytes = new Uint8Array(await res.arrayBuffer());
      const clientBytes = composePreview(c.width, c.height, instances, placements);
      expect(Buffer.from(clientBytes).equals(Buffer.from(serverBytes))).toBe(true);
    }
  }, 120_000);

  it("two runs differing only in the text weight store requests differing only there", async () => {
    const meta = JSON.parse(readFileSync(join(FIXTURES, "micro_meta.json"), "utf-8"));
    const sketches: string[] = JSON.parse(
      readFileSync(join(FIXTURES, "sketch_frames.json"), "utf-8"),
    );
    const state = createState(meta.width, meta.height);
    state.sketchFrames = sketches;
    state.steps = 2;

    setWeight(state, "text", 0);
    const requestA = buildInferRequest(state);
    setWeight(state, "text", 2);
    const requestB = buildInferRequest(state);

    const [resA, resB] = await Promise.all([
      fetch(`${BASE}/infer`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(requestA),
      }),
      fetch(`${BASE}/infer`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(requestB),
      }),
    ]);
    expect(resA.ok && resB.ok).toBe(true);
    const echoA = (await resA.json()).request;
    const echoB = (await resB.json()).request;
    expect(echoA.weight_overrides.text).toBe(0);
    expect(echoB.weight_overrides.text).toBe(2);
    echoA.weight_overrides.text = echoB.weight_overrides.text;
    expect(JSON.stringify(echoA)).toBe(JSON.stringify(echoB));
  }, 120_000);
});
