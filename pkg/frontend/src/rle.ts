/**
 * Run-length mask wire format.
 *
 * Masks arrive as `{h, w, counts}` where counts are run lengths over the
 * row-major flattened pixels, alternating 0-runs and 1-runs and always
 * starting with the zero run (possibly 0).
 */

export interface RlePayload {
  h: number;
  w: number;
  counts: number[];
}

export class RleError extends Error {}

export interface OverlayMask {
  h: number;
  w: number;
  /** Row-major binary grid, one byte per pixel. */
  grid: Uint8Array;
}

export function decodeRle(payload: RlePayload): OverlayMask {
  const { h, w, counts } = payload;
  const total = counts.reduce((a, b) => a + b, 0);
  if (total !== h * w) {
    throw new RleError(`count sum ${total} does not match ${h}x${w} = ${h * w} pixels`);
  }
  const grid = new Uint8Array(h * w);
  let pos = 0;
  let value = 0;
  for (const count of counts) {
    if (value === 1) {
      grid.fill(1, pos, pos + count);
    }
    pos += count;
    value ^= 1;
  }
  return { h, w, grid };
}

export function maskPixelCount(mask: OverlayMask): number {
  let n = 0;
  for (const v of mask.grid) n += v;
  return n;
}

export function masksEqual(a: OverlayMask, b: OverlayMask): boolean {
  if (a.h !== b.h || a.w !== b.w) return false;
  for (let i = 0; i < a.grid.length; i++) {
    if (a.grid[i] !== b.grid[i]) return false;
  }
  return true;
}
