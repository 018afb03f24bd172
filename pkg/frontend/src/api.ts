/** JSON client for the render service. */

import type { PoseSpec } from "./orbit.js";
import type { RleMask } from "./rle.js";

export interface SceneMeta {
  cameras: unknown[];
  frames: number;
  bbox_min: number[];
  bbox_max: number[];
  n_gear: number;
  d_feat: number;
}

export interface RenderResponse {
  layers: Record<string, string>; // base64 payloads
  width: number;
  height: number;
}

export interface TrackResponse {
  track_id?: string;
  mask: RleMask & { runs: [number, number][] };
  status: string;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(private baseUrl: string, private fetchFn: FetchLike = fetch) {}

  async scene(): Promise<SceneMeta> {
    return this.get("/scene");
  }

  async render(pose: PoseSpec | { view: string }, time: number,
               layers: string[], stride = 1): Promise<RenderResponse> {
    return this.post("/render", { pose, time, layers, stride });
  }

  async trackClick(pose: PoseSpec | { view: string }, time: number,
                   pixel: [number, number]): Promise<TrackResponse> {
    return this.post("/track/click", { pose, time, pixel });
  }

  async trackQuery(trackId: string, pose: PoseSpec | { view: string },
                   time: number): Promise<TrackResponse> {
    return this.post("/track/query", { track_id: trackId, pose, time });
  }

  async trackDelete(trackId: string): Promise<void> {
    const r = await this.fetchFn(`${this.baseUrl}/track/${trackId}`, { method: "DELETE" });
    if (!r.ok) throw new ApiError(r.status, await safeDetail(r));
  }

  private async get<T>(path: string): Promise<T> {
    const r = await this.fetchFn(`${this.baseUrl}${path}`);
    if (!r.ok) throw new ApiError(r.status, await safeDetail(r));
    return r.json() as Promise<T>;
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const r = await this.fetchFn(`${this.baseUrl}${path}`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!r.ok) throw new ApiError(r.status, await safeDetail(r));
    return r.json() as Promise<T>;
  }
}

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`service error ${status}: ${detail}`);
  }
}

async function safeDetail(r: Response): Promise<string> {
  try {
    const body = await r.json();
    return typeof body.detail === "string" ? body.detail : JSON.stringify(body.detail ?? body);
  } catch {
    return r.statusText;
  }
}
