/** Deep-zoom tile math and a request-deduplicating tile cache.
 *
 * Level k of the pyramid is the base image downscaled by 2^k. The grid of
 * a viewport is computed in level coordinates; the cache guarantees each
 * tile URL is fetched at most once, so panning by one tile issues requests
 * only for the newly uncovered row/column.
 */

import type { Bbox, PyramidMeta } from "./types.js";

export interface TileAddress {
  level: number;
  x: number;
  y: number;
}

/** Pick the shallowest level whose scale does not exceed the zoom. */
export function levelForZoom(meta: PyramidMeta, zoom: number): number {
  let level = 0;
  while (level + 1 < meta.levels.length && 2 ** -(level + 1) >= zoom) {
    level += 1;
  }
  return level;
}

export function tilesForViewport(meta: PyramidMeta, viewport: Bbox, zoom: number): TileAddress[] {
  const level = levelForZoom(meta, zoom);
  const scale = 2 ** -level;
  const levelMeta = meta.levels[level];
  if (!levelMeta) return [];
  const tile = meta.tile_size;
  const maxX = Math.ceil(levelMeta.width / tile) - 1;
  const maxY = Math.ceil(levelMeta.height / tile) - 1;
  const x0 = Math.max(0, Math.floor((viewport.c0 * scale) / tile));
  const x1 = Math.min(maxX, Math.floor(((viewport.c1 - 1) * scale) / tile));
  const y0 = Math.max(0, Math.floor((viewport.r0 * scale) / tile));
  const y1 = Math.min(maxY, Math.floor(((viewport.r1 - 1) * scale) / tile));
  const out: TileAddress[] = [];
  for (let y = y0; y <= y1; y++) {
    for (let x = x0; x <= x1; x++) {
      out.push({ level, x, y });
    }
  }
  return out;
}

export type TileLoader<T> = (url: string) => Promise<T>;

export class TileCache<T = unknown> {
  private readonly cache = new Map<string, Promise<T>>();
  requestCount = 0;

  constructor(private readonly loader: TileLoader<T>) {}

  get(url: string): Promise<T> {
    const hit = this.cache.get(url);
    if (hit) return hit;
    this.requestCount += 1;
    const pending = this.loader(url).catch((error) => {
      this.cache.delete(url); // failed loads are retryable
      throw error;
    });
    this.cache.set(url, pending);
    return pending;
  }

  has(url: string): boolean {
    return this.cache.has(url);
  }
}
