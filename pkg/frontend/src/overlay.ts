/** Compositing of mask overlays onto rendered frames. */

import type { Image8 } from "./ppm.js";
import { decodeRle, type RleMask } from "./rle.js";

export const OVERLAY_COLOR: [number, number, number] = [255, 51, 51];
export const OVERLAY_ALPHA = 0.5;

/** RGBA buffer: the frame with mask pixels blended half-transparent. */
export function compositeOverlay(frame: Image8, mask: RleMask | null): Uint8ClampedArray {
  const out = new Uint8ClampedArray(frame.width * frame.height * 4);
  const bits = mask ? decodeRle(mask) : null;
  if (mask && (mask.width !== frame.width || mask.height !== frame.height)) {
    throw new Error("overlay dimensions do not match the frame");
  }
  for (let i = 0; i < frame.width * frame.height; i++) {
    let r = frame.pixels[i * 3];
    let g = frame.pixels[i * 3 + 1];
    let b = frame.pixels[i * 3 + 2];
    if (bits && bits[i]) {
      r = Math.round(r * (1 - OVERLAY_ALPHA) + OVERLAY_COLOR[0] * OVERLAY_ALPHA);
      g = Math.round(g * (1 - OVERLAY_ALPHA) + OVERLAY_COLOR[1] * OVERLAY_ALPHA);
      b = Math.round(b * (1 - OVERLAY_ALPHA) + OVERLAY_COLOR[2] * OVERLAY_ALPHA);
    }
    out[i * 4] = r;
    out[i * 4 + 1] = g;
    out[i * 4 + 2] = b;
    out[i * 4 + 3] = 255;
  }
  return out;
}
