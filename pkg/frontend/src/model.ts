import { ApiClient } from './api.js';
import { JobFailedError, submitAndTrack, TrackOptions } from './polling.js';
import { Selection, toRegion } from './selection.js';
import type { AnalysisResult, JobRecord, Region, SlideInfo } from './types.js';

// The viewer's state, free of any DOM so the whole workflow is testable
// headless. Every displayed number is read from the result payload; nothing
// is recomputed client-side.

export type Phase = 'idle' | 'submitting' | 'tracking' | 'done' | 'failed';

export interface BannerState {
  text: string;
  tcrPercent: number | null;
}

export class AppModel {
  slide: SlideInfo | null = null;
  selection: Selection | null = null;
  submittedRegion: Region | null = null;
  phase: Phase = 'idle';
  job: JobRecord | null = null;
  result: AnalysisResult | null = null;
  error: string | null = null;
  showCellOverlay = true;
  resultFetches = 0;
  onChange: (() => void) | null = null;

  constructor(private readonly api: ApiClient) {}

  private changed(): void {
    this.onChange?.();
  }

  async loadFirstSlide(): Promise<SlideInfo> {
    const slides = await this.api.listSlides();
    if (!slides.length) {
      throw new Error('server has no slides registered');
    }
    this.slide = slides[0];
    this.changed();
    return this.slide;
  }

  /** Post the current (or whole-slide) selection and follow it to the end. */
  async analyzeSelection(options: TrackOptions = {}): Promise<void> {
    if (!this.slide) {
      throw new Error('no slide loaded');
    }
    const region = this.selection ? toRegion(this.selection, this.slide) : null;
    this.submittedRegion = region;
    this.phase = 'submitting';
    this.error = null;
    this.result = null;
    this.changed();
    try {
      const tracked = await submitAndTrack(this.api, this.slide.id, region, {
        ...options,
        onUpdate: (u) => {
          this.phase = 'tracking';
          this.job = u.record;
          this.changed();
          options.onUpdate?.(u);
        },
      });
      this.job = tracked.record;
      this.result = tracked.result;
      this.resultFetches += 1;
      this.phase = 'done';
    } catch (err) {
      this.phase = 'failed';
      this.error = err instanceof JobFailedError
        ? `analysis failed: ${err.message}`
        : `${err}`;
    }
    this.changed();
  }

  /** Banner copy; the ratio comes verbatim from the result JSON. */
  banner(): BannerState {
    switch (this.phase) {
      case 'idle':
        return { text: 'mark a region and run analysis', tcrPercent: null };
      case 'submitting':
        return { text: 'submitting…', tcrPercent: null };
      case 'tracking': {
        const p = this.job?.progress;
        const suffix = p && p.total ? ` (${p.done}/${p.total} tiles)` : '';
        return { text: `analyzing${suffix}`, tcrPercent: null };
      }
      case 'failed':
        return { text: this.error ?? 'failed', tcrPercent: null };
      case 'done': {
        const pct = this.result!.overall_tcr * 100;
        return {
          text: `overall tumor-cell ratio ${pct.toFixed(1)}% ` +
            `(${this.result!.n_tumor}/${this.result!.n_cells} cells)`,
          tcrPercent: pct,
        };
      }
    }
  }

  /** Toggling the dot overlay is pure client state: no refetch. */
  toggleCellOverlay(): void {
    this.showCellOverlay = !this.showCellOverlay;
    this.changed();
  }
}
