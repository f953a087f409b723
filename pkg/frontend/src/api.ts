/**
 * REST client for the edit service. Every mutating call posts exactly one
 * request and resolves with the acknowledged revision; structured 4xx
 * bodies surface as ApiError with code/field/message.
 */

import type { SceneState, ServiceError } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: ServiceError,
  ) {
    super(`${detail.code} (${detail.field}): ${detail.message}`);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    public baseUrl: string,
    private fetchImpl: FetchLike = (u, i) => fetch(u, i),
  ) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
  }

  private async request(path: string, init?: RequestInit): Promise<any> {
    const res = await this.fetchImpl(this.baseUrl + path, init);
    if (!res.ok) {
      let detail: ServiceError = { code: "http_error", field: "", message: res.statusText };
      try {
        const body = await res.json();
        if (body && body.detail) detail = body.detail as ServiceError;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(res.status, detail);
    }
    return res.json();
  }

  private post(path: string, body: unknown): Promise<any> {
    return this.request(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body ?? {}),
    });
  }

  getScene(): Promise<SceneState> {
    return this.request("/scene");
  }

  addInstance(voct: string, name?: string, affine?: number[]): Promise<{ revision: number; id: string }> {
    return this.post("/instances", { voct, name, affine });
  }

  duplicate(id: string, name?: string): Promise<{ revision: number; id: string }> {
    return this.post(`/instances/${encodeURIComponent(id)}/duplicate`, { name });
  }

  transform(id: string, affine: number[]): Promise<{ revision: number }> {
    return this.post(`/instances/${encodeURIComponent(id)}/transform`, { affine });
  }

  setTimeMap(id: string, expr: string): Promise<{ revision: number }> {
    return this.post(`/instances/${encodeURIComponent(id)}/timemap`, { expr });
  }

  setSelfRotate(id: string, rate: number): Promise<{ revision: number }> {
    return this.post(`/instances/${encodeURIComponent(id)}/selfrotate`, { rate });
  }

  setVisible(id: string, visible: boolean): Promise<{ revision: number }> {
    return this.post(`/instances/${encodeURIComponent(id)}/visible`, { visible });
  }

  addLight(light: Record<string, unknown>): Promise<{ revision: number }> {
    return this.post("/lights", light);
  }

  setClock(clock: { playing?: boolean; frame?: number; speed?: number }): Promise<{ revision: number }> {
    return this.post("/clock", clock);
  }

  paint(args: {
    instance: string;
    rgb: number[];
    time_range: [number, number];
    pose: number[];
    mask_png_base64: string;
    target_density?: number;
  }): Promise<{ revision: number; edited_voxels: number; skipped: number }> {
    return this.post("/paint", args);
  }

  renderUrl(pose: number[], opts: { w?: number; h?: number; frame?: number } = {}): string {
    const params = new URLSearchParams({ pose: pose.join(",") });
    if (opts.w) params.set("w", String(opts.w));
    if (opts.h) params.set("h", String(opts.h));
    if (opts.frame !== undefined) params.set("frame", String(opts.frame));
    return `${this.baseUrl}/render?${params.toString()}`;
  }

  async renderFrame(
    pose: number[],
    opts: { w?: number; h?: number; frame?: number } = {},
  ): Promise<{ revision: number; frame: number; bytes: ArrayBuffer }> {
    const res = await this.fetchImpl(this.renderUrl(pose, opts));
    if (!res.ok) {
      const body = await res.json().catch(() => null);
      throw new ApiError(res.status, body?.detail ?? { code: "http_error", field: "", message: res.statusText });
    }
    return {
      revision: Number(res.headers.get("X-Revision") ?? -1),
      frame: Number(res.headers.get("X-Frame") ?? -1),
      bytes: await res.arrayBuffer(),
    };
  }
}
