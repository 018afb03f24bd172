/**
 * Run-length masks over row-major foreground pixels.
 *
 * Wire format matches the render service: sorted, non-overlapping
 * [start, length] runs. The decoder here must stay bit-equivalent to the
 * service encoder; shared golden vectors pin both sides.
 */

export interface RleMask {
  width: number;
  height: number;
  runs: [number, number][];
}

export function decodeRle(mask: RleMask): Uint8Array {
  const size = mask.width * mask.height;
  const out = new Uint8Array(size);
  let prevEnd = -1;
  for (const [start, length] of mask.runs) {
    if (length <= 0 || start < 0 || start + length > size) {
      throw new Error(`run (${start}, ${length}) outside ${mask.width}x${mask.height} mask`);
    }
    if (start <= prevEnd) {
      throw new Error("runs must be sorted and non-overlapping");
    }
    out.fill(1, start, start + length);
    prevEnd = start + length - 1;
  }
  return out;
}

export function encodeRle(bits: Uint8Array, width: number, height: number): RleMask {
  if (bits.length !== width * height) {
    throw new Error("bit buffer does not match dimensions");
  }
  const runs: [number, number][] = [];
  let start = -1;
  for (let i = 0; i < bits.length; i++) {
    if (bits[i] && start < 0) start = i;
    if (!bits[i] && start >= 0) {
      runs.push([start, i - start]);
      start = -1;
    }
  }
  if (start >= 0) runs.push([start, bits.length - start]);
  return { width, height, runs };
}

export function maskBounds(mask: RleMask): [number, number, number, number] | null {
  const bits = decodeRle(mask);
  let minU = mask.width, minV = mask.height, maxU = -1, maxV = -1;
  for (let i = 0; i < bits.length; i++) {
    if (!bits[i]) continue;
    const u = i % mask.width;
    const v = Math.floor(i / mask.width);
    if (u < minU) minU = u;
    if (u > maxU) maxU = u;
    if (v < minV) minV = v;
    if (v > maxV) maxV = v;
  }
  return maxU < 0 ? null : [minU, minV, maxU + 1, maxV + 1];
}
