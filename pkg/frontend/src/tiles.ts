import { ApiClient } from './api.js';
import type { TileAddress } from './viewport.js';

// Browser-side tile cache. Each tile is fetched once; failures leave a
// placeholder entry that is retried on the next request after a short hold.

interface CacheEntry {
  image: HTMLImageElement | null;
  failedAt: number | null;
}

const RETRY_MS = 2000;

export class TileCache {
  private entries = new Map<string, CacheEntry>();

  constructor(
    private readonly api: ApiClient,
    private readonly slideId: string,
    private readonly onLoad: () => void,
  ) {}

  private key(t: TileAddress): string {
    return `${t.level}/${t.tx}/${t.ty}`;
  }

  /** Returns the image when ready; kicks off (or retries) the fetch if not. */
  get(t: TileAddress): HTMLImageElement | null {
    const key = this.key(t);
    const entry = this.entries.get(key);
    if (entry) {
      if (entry.image || (entry.failedAt !== null &&
          performance.now() - entry.failedAt < RETRY_MS)) {
        return entry.image;
      }
    }
    const pending: CacheEntry = { image: null, failedAt: null };
    this.entries.set(key, pending);
    const img = new Image();
    img.onload = () => {
      pending.image = img;
      this.onLoad();
    };
    img.onerror = () => {
      pending.failedAt = performance.now();
    };
    img.src = this.api.tileUrl(this.slideId, t.level, t.tx, t.ty);
    return null;
  }
}
