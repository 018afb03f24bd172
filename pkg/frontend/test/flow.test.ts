/**
 * Scripted click -> overlay -> scrub flow: at every frame the composited
 * overlay bitmap must equal the decoded /track/query response, and frames
 * without a session must render clean.
 */

import { describe, expect, it } from "vitest";
import { ApiClient } from "../src/api.js";
import { compositeOverlay, OVERLAY_ALPHA, OVERLAY_COLOR } from "../src/overlay.js";
import { decodePpm, base64ToBytes } from "../src/ppm.js";
import { decodeRle, encodeRle, type RleMask } from "../src/rle.js";
import { ViewerState } from "../src/state.js";
import type { Image8 } from "../src/ppm.js";

const SIZE = 10;
const FRAMES = 5;

/** A fake scene: a 2x2 object marching diagonally, one pixel per frame. */
function objectMask(time: number): RleMask {
  const bits = new Uint8Array(SIZE * SIZE);
  for (const dv of [0, 1]) {
    for (const du of [0, 1]) {
      bits[(2 + time + dv) * SIZE + (2 + time + du)] = 1;
    }
  }
  return encodeRle(bits, SIZE, SIZE);
}

function frameBase64(time: number): string {
  const header = `P6\n${SIZE} ${SIZE}\n255\n`;
  const pixels = new Uint8Array(SIZE * SIZE * 3);
  pixels.fill(30);
  const bits = decodeRle(objectMask(time));
  for (let i = 0; i < bits.length; i++) {
    if (bits[i]) {
      pixels[i * 3] = 200;
      pixels[i * 3 + 1] = 180;
      pixels[i * 3 + 2] = 60;
    }
  }
  const blob = new Uint8Array(header.length + pixels.length);
  blob.set(Uint8Array.from(header, (c) => c.charCodeAt(0)));
  blob.set(pixels, header.length);
  return Buffer.from(blob).toString("base64");
}

function sceneService() {
  const queries: number[] = [];
  const fetchFn = async (url: string, init?: RequestInit): Promise<Response> => {
    const body = init?.body ? JSON.parse(init.body as string) : undefined;
    const json = (data: unknown, status = 200) =>
      new Response(JSON.stringify(data), { status });
    if (url.endsWith("/scene")) {
      return json({ cameras: [], frames: FRAMES, bbox_min: [0, 0, 0],
                    bbox_max: [1, 1, 1], n_gear: 4, d_feat: 16 });
    }
    if (url.endsWith("/render")) {
      return json({ layers: { rgb: frameBase64(body.time) }, width: SIZE, height: SIZE });
    }
    if (url.endsWith("/track/click")) {
      const bits = decodeRle(objectMask(body.time));
      const hit = bits[body.pixel[1] * SIZE + body.pixel[0]] === 1;
      if (!hit) return json({ detail: { status: "no-surface" } }, 422);
      return json({ track_id: "t-1", mask: objectMask(body.time), status: "ok" });
    }
    if (url.endsWith("/track/query")) {
      queries.push(body.time);
      return json({ mask: objectMask(body.time), status: "ok" });
    }
    return json({}, 404);
  };
  return { fetchFn, queries };
}

describe("click -> overlay -> scrub flow", () => {
  it("overlay bitmap equals the decoded track response at every frame", async () => {
    const svc = sceneService();
    let lastDrawn: { image: Image8; overlay: RleMask | null } | null = null;
    const state = new ViewerState(
      new ApiClient("", svc.fetchFn),
      { onFrame: (image, overlay) => (lastDrawn = { image, overlay }) },
      SIZE, SIZE,
    );
    await state.init();
    expect(lastDrawn).not.toBeNull();

    // click the object at t=0
    const clicked = await state.clickTrack([2, 2]);
    expect(clicked).toBe(true);

    for (const t of [1, 2, 3, 4]) {
      await state.scrubTime(t);
      expect(state.overlay).not.toBeNull();
      // the overlay the viewer composites is exactly the service's answer
      expect(state.overlay!.runs).toEqual(objectMask(t).runs);

      const rgba = compositeOverlay(lastDrawn!.image, lastDrawn!.overlay);
      const bits = decodeRle(objectMask(t));
      for (let i = 0; i < SIZE * SIZE; i++) {
        const r = lastDrawn!.image.pixels[i * 3];
        const expected = bits[i]
          ? Math.round(r * (1 - OVERLAY_ALPHA) + OVERLAY_COLOR[0] * OVERLAY_ALPHA)
          : r;
        expect(rgba[i * 4]).toBe(expected);
        expect(rgba[i * 4 + 3]).toBe(255);
      }
      // the overlay follows the object: its bounds move with time
      const first = objectMask(t).runs[0][0];
      expect(Math.floor(first / SIZE)).toBe(2 + t);
    }
    expect(svc.queries).toEqual([1, 2, 3, 4]);
  });

  it("clicking the background shows a toast and keeps frames clean", async () => {
    const svc = sceneService();
    const toasts: string[] = [];
    const state = new ViewerState(
      new ApiClient("", svc.fetchFn),
      { onStatus: (m, kind) => kind === "toast" && toasts.push(m) },
      SIZE, SIZE,
    );
    await state.init();
    const clicked = await state.clickTrack([9, 0]);
    expect(clicked).toBe(false);
    expect(toasts).toContain("no surface under click");
    await state.scrubTime(3);
    expect(state.overlay).toBeNull();
    expect(svc.queries.length).toBe(0);
  });
});

describe("ppm decoding", () => {
  it("parses headers with comments", () => {
    const withComment = `P6\n# a comment\n2 1\n255\n`;
    const blob = new Uint8Array(withComment.length + 6);
    blob.set(Uint8Array.from(withComment, (c) => c.charCodeAt(0)));
    blob.set([255, 0, 0, 0, 255, 0], withComment.length);
    const img = decodePpm(blob);
    expect(img.width).toBe(2);
    expect(img.height).toBe(1);
    expect(Array.from(img.pixels)).toEqual([255, 0, 0, 0, 255, 0]);
  });

  it("base64 round trip", () => {
    const bytes = Uint8Array.from([1, 2, 250, 0, 77]);
    const b64 = Buffer.from(bytes).toString("base64");
    expect(Array.from(base64ToBytes(b64))).toEqual(Array.from(bytes));
  });

  it("rejects truncated payloads", () => {
    const header = `P6\n4 4\n255\n`;
    const blob = Uint8Array.from(header + "xx", (c) => c.charCodeAt(0));
    expect(() => decodePpm(blob)).toThrow(/truncated/);
  });
});
