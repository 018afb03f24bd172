/** Binary PPM (P6, 8-bit) decoding for render-service image payloads. */

export interface Image8 {
  width: number;
  height: number;
  pixels: Uint8Array; // RGB, row-major
}

export function decodePpm(bytes: Uint8Array): Image8 {
  if (bytes[0] !== 0x50 || bytes[1] !== 0x36) {
    throw new Error("not a binary PPM");
  }
  let pos = 2;
  const fields: number[] = [];
  while (fields.length < 3) {
    while (pos < bytes.length && isSpace(bytes[pos])) pos++;
    if (bytes[pos] === 0x23) { // '#' comment
      while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
      continue;
    }
    let value = 0;
    const start = pos;
    while (pos < bytes.length && !isSpace(bytes[pos])) {
      value = value * 10 + (bytes[pos] - 0x30);
      pos++;
    }
    if (pos === start) throw new Error("truncated PPM header");
    fields.push(value);
  }
  pos++; // single whitespace after maxval
  const [width, height, maxval] = fields;
  if (maxval !== 255) throw new Error(`unsupported maxval ${maxval}`);
  const need = width * height * 3;
  if (bytes.length - pos < need) throw new Error("truncated PPM payload");
  return { width, height, pixels: bytes.slice(pos, pos + need) };
}

function isSpace(b: number): boolean {
  return b === 0x20 || b === 0x09 || b === 0x0a || b === 0x0d;
}

export function base64ToBytes(b64: string): Uint8Array {
  if (typeof atob === "function") {
    const bin = atob(b64);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  return new Uint8Array(Buffer.from(b64, "base64"));
}
