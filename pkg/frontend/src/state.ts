/**
 * Viewer state machine.
 *
 * One outstanding request per pane (frame pane, track pane); responses that
 * arrive after the pose/time moved on are discarded by sequence number.
 * Scrubbing with no active track updates only the frame.
 */

import { ApiClient, ApiError } from "./api.js";
import { orbitToPose, type OrbitParams, type PoseSpec } from "./orbit.js";
import { base64ToBytes, decodePpm, type Image8 } from "./ppm.js";
import type { RleMask } from "./rle.js";

export type Layer = "rgb" | "gear" | "depth";

export interface ViewerEvents {
  onFrame?(image: Image8, overlay: RleMask | null): void;
  onStatus?(message: string, kind: "info" | "error" | "toast"): void;
}

export class ViewerState {
  orbit: OrbitParams;
  time = 0;
  layer: Layer = "rgb";
  trackId: string | null = null;
  overlay: RleMask | null = null;
  frames = 1;

  private frameSeq = 0;
  private trackSeq = 0;
  private frameInFlight = false;
  private trackInFlight = false;
  lastFrame: Image8 | null = null;

  constructor(private api: ApiClient, private events: ViewerEvents = {},
              private width = 256, private height = 256) {
    this.orbit = { azimuth: 0, elevation: 0.4, radius: 2.4, lookAt: [0, 0, 0] };
  }

  pose(): PoseSpec {
    return orbitToPose(this.orbit, this.width, this.height);
  }

  get busy(): boolean {
    return this.frameInFlight || this.trackInFlight;
  }

  async init(): Promise<void> {
    const meta = await this.api.scene();
    this.frames = meta.frames;
    await this.refreshFrame();
  }

  /** POST /render for the current pose/time/layer; stale responses dropped. */
  async refreshFrame(): Promise<boolean> {
    if (this.frameInFlight) return false;
    this.frameInFlight = true;
    const seq = ++this.frameSeq;
    try {
      const r = await this.api.render(this.pose(), this.time, [this.layer]);
      if (seq !== this.frameSeq) return false; // superseded
      this.lastFrame = decodePpm(base64ToBytes(r.layers[this.layer]));
      this.events.onFrame?.(this.lastFrame, this.overlay);
      return true;
    } catch (e) {
      this.report(e);
      return false;
    } finally {
      this.frameInFlight = false;
    }
  }

  /** Click at a pixel: start a track session and show its mask. */
  async clickTrack(pixel: [number, number]): Promise<boolean> {
    if (this.trackInFlight) return false;
    this.trackInFlight = true;
    try {
      const r = await this.api.trackClick(this.pose(), this.time, pixel);
      this.trackId = r.track_id ?? null;
      this.overlay = r.mask;
      if (this.lastFrame) this.events.onFrame?.(this.lastFrame, this.overlay);
      return true;
    } catch (e) {
      if (e instanceof ApiError && e.status === 422) {
        this.events.onStatus?.("no surface under click", "toast");
        return false;
      }
      this.report(e);
      return false;
    } finally {
      this.trackInFlight = false;
    }
  }

  /** Move the time scrubber: refresh the frame, and the overlay only when a
   * track session is active. */
  async scrubTime(t: number): Promise<void> {
    this.time = Math.max(0, Math.min(this.frames - 1, t));
    await this.refreshFrame();
    if (this.trackId === null) return;
    if (this.trackInFlight) return;
    this.trackInFlight = true;
    const seq = ++this.trackSeq;
    try {
      const r = await this.api.trackQuery(this.trackId, this.pose(), this.time);
      if (seq !== this.trackSeq) return;
      this.overlay = r.mask;
      if (this.lastFrame) this.events.onFrame?.(this.lastFrame, this.overlay);
    } catch (e) {
      if (e instanceof ApiError && e.status === 404) {
        this.trackId = null;
        this.overlay = null;
        this.events.onStatus?.("track session expired", "toast");
      } else {
        this.report(e);
      }
    } finally {
      this.trackInFlight = false;
    }
  }

  async rotate(dAzimuth: number, dElevation = 0): Promise<void> {
    this.orbit.azimuth += dAzimuth;
    this.orbit.elevation = Math.max(-1.4, Math.min(1.4, this.orbit.elevation + dElevation));
    this.overlay = null; // overlays are per-pose; re-query on demand
    const ok = await this.refreshFrame();
    if (ok && this.trackId !== null) {
      await this.scrubTime(this.time);
    }
  }

  clearTrack(): void {
    if (this.trackId !== null) {
      void this.api.trackDelete(this.trackId).catch(() => undefined);
    }
    this.trackId = null;
    this.overlay = null;
  }

  private report(e: unknown): void {
    const message = e instanceof Error ? e.message : String(e);
    this.events.onStatus?.(message, "error");
  }
}
