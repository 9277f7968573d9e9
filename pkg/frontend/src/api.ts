// Thin HTTP client for the inference service. The transport is injectable
// so state logic can be tested without a network.

import { InferRequestDoc, InferResponseDoc } from "./types.js";

export type Transport = (url: string, init?: RequestInit) => Promise<Response>;

export class ServiceClient {
  constructor(
    private baseUrl: string,
    private transport: Transport = (url, init) => fetch(url, init),
  ) {}

  async health(): Promise<{ status: string; model_version: string }> {
    const res = await this.transport(`${this.baseUrl}/health`);
    if (!res.ok) throw new Error(`health check failed: ${res.status}`);
    return res.json();
  }

  async uploadInstance(file: Blob, mask?: Blob): Promise<string> {
    const form = new FormData();
    form.append("file", file, "instance.png");
    if (mask) form.append("mask", mask, "mask.png");
    const res = await this.transport(`${this.baseUrl}/instances`, {
      method: "POST",
      body: form,
    });
    if (!res.ok) throw new Error(`upload failed: ${res.status}`);
    const body = await res.json();
    return body.instance_id;
  }

  async weights(): Promise<{ bg: number; text: number; inst: number[] }> {
    const res = await this.transport(`${this.baseUrl}/weights`);
    if (!res.ok) throw new Error(`weights failed: ${res.status}`);
    return res.json();
  }

  async infer(request: InferRequestDoc): Promise<InferResponseDoc> {
    const res = await this.transport(`${this.baseUrl}/infer`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(request),
    });
    if (!res.ok) {
      const detail = await res.text();
      throw new Error(`infer failed (${res.status}): ${detail}`);
    }
    return res.json();
  }

  async composeGolden(canvas: object): Promise<Uint8Array> {
    const res = await this.transport(`${this.baseUrl}/compose`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(canvas),
    });
    if (!res.ok) throw new Error(`compose failed: ${res.status}`);
    return new Uint8Array(await res.arrayBuffer());
  }
}
