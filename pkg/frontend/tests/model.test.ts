import { describe, expect, it } from 'vitest';
import { ApiClient } from '../src/api.js';
import { cssColor, legendStops, populatedCells, tcrColor } from '../src/heatmap.js';
import { AppModel } from '../src/model.js';
import { extendSelection, isDegenerate, startSelection, toRegion } from '../src/selection.js';
import type { AnalysisResult, HeatmapOut, JobRecord, SlideInfo } from '../src/types.js';

const slideInfo: SlideInfo = {
  id: 'demo', width: 512, height: 512, mpp: 0.4545, tile_size: 256,
  levels: [{ index: 0, width: 512, height: 512 },
           { index: 1, width: 256, height: 256 }],
};

function fakeResult(): AnalysisResult {
  const heatmap: HeatmapOut = {
    origin: [0, 0], side_um: 128, side_px: 281.6, nx: 2, ny: 2,
    cells: [
      { gx: 0, gy: 0, n: 10, n_tumor: 4, tcr: 0.4, empty: false },
      { gx: 1, gy: 0, n: 0, n_tumor: 0, tcr: 0.0, empty: true },
      { gx: 0, gy: 1, n: 5, n_tumor: 0, tcr: 0.0, empty: false },
      { gx: 1, gy: 1, n: 5, n_tumor: 5, tcr: 1.0, empty: false },
    ],
  };
  return {
    overall_tcr: 0.42, tcr_empty: false, n_cells: 20, n_tumor: 9,
    region: [0, 0, 512, 512], cells: [], heatmap, throughput_mm2_s: 0.5,
  };
}

/** fetch stub: submit -> queued -> running -> done -> result */
function scriptedFetch(result: AnalysisResult) {
  let polls = 0;
  const record = (status: string): JobRecord => ({
    job_id: 'j1', slide_id: 'demo',
    region: { x: 0, y: 0, w: 512, h: 512 },
    status: status as JobRecord['status'], error: null,
    progress: { done: Math.min(polls, 4), total: 4 },
  });
  return async (url: string): Promise<Response> => {
    const respond = (body: unknown, status = 200) =>
      new Response(JSON.stringify(body), { status });
    if (url.endsWith('/api/slides')) {
      return respond([slideInfo]);
    }
    if (url.endsWith('/analyze')) {
      return respond({ job_id: 'j1' }, 202);
    }
    if (url.endsWith('/jobs/j1')) {
      polls += 1;
      return respond(record(polls < 3 ? 'running' : 'done'));
    }
    if (url.endsWith('/result')) {
      return respond(result);
    }
    return respond({ error: `no route ${url}` }, 404);
  };
}

describe('AppModel', () => {
  it('banner shows the payload ratio verbatim after tracking', async () => {
    const result = fakeResult();
    const api = new ApiClient('', scriptedFetch(result));
    const model = new AppModel(api);
    await model.loadFirstSlide();
    await model.analyzeSelection({ sleep: async () => {}, initialDelayMs: 0 });
    expect(model.phase).toBe('done');
    const banner = model.banner();
    expect(banner.tcrPercent).toBeCloseTo(42.0, 6);
    expect(banner.text).toContain('42.0%');
    expect(banner.text).toContain('9/20');
  });

  it('progress updates arrive while tracking', async () => {
    const api = new ApiClient('', scriptedFetch(fakeResult()));
    const model = new AppModel(api);
    await model.loadFirstSlide();
    const seen: number[] = [];
    await model.analyzeSelection({
      sleep: async () => {},
      initialDelayMs: 0,
      onUpdate: (u) => seen.push(u.record.progress.done),
    });
    expect(seen.length).toBeGreaterThan(1);
    expect([...seen].sort((a, b) => a - b)).toEqual(seen);
  });

  it('toggling the cell overlay never refetches the result', async () => {
    const api = new ApiClient('', scriptedFetch(fakeResult()));
    const model = new AppModel(api);
    await model.loadFirstSlide();
    await model.analyzeSelection({ sleep: async () => {}, initialDelayMs: 0 });
    expect(model.resultFetches).toBe(1);
    model.toggleCellOverlay();
    model.toggleCellOverlay();
    expect(model.resultFetches).toBe(1);
    expect(model.result).not.toBeNull();
  });

  it('failed jobs surface the server error', async () => {
    const failingFetch = async (url: string): Promise<Response> => {
      if (url.endsWith('/api/slides')) {
        return new Response(JSON.stringify([slideInfo]));
      }
      if (url.endsWith('/analyze')) {
        return new Response(JSON.stringify({ job_id: 'j2' }), { status: 202 });
      }
      return new Response(JSON.stringify({
        job_id: 'j2', slide_id: 'demo', region: { x: 0, y: 0, w: 1, h: 1 },
        status: 'failed', error: 'tile 3 unreadable',
        progress: { done: 0, total: 4 },
      }));
    };
    const model = new AppModel(new ApiClient('', failingFetch));
    await model.loadFirstSlide();
    await model.analyzeSelection({ sleep: async () => {}, initialDelayMs: 0 });
    expect(model.phase).toBe('failed');
    expect(model.banner().text).toContain('tile 3 unreadable');
  });
});

describe('selection', () => {
  it('rect drag serializes to the region schema', () => {
    let sel = startSelection('rect', 400.6, 100.2);
    sel = extendSelection(sel, 100.4, 300.9);
    expect(toRegion(sel, slideInfo)).toEqual({ x: 100, y: 100, w: 301, h: 201 });
  });

  it('freehand polygon submits its bounding box', () => {
    let sel = startSelection('freehand', 50, 60);
    for (const [x, y] of [[80, 40], [120, 90], [70, 130]]) {
      sel = extendSelection(sel, x, y);
    }
    expect(toRegion(sel, slideInfo)).toEqual({ x: 50, y: 40, w: 70, h: 90 });
  });

  it('clamps to the slide bounds', () => {
    let sel = startSelection('rect', -40, -20);
    sel = extendSelection(sel, 600, 200);
    expect(toRegion(sel, slideInfo)).toEqual({ x: 0, y: 0, w: 512, h: 200 });
  });

  it('degenerate selections are rejected', () => {
    const sel = startSelection('rect', 10, 10);
    expect(isDegenerate(extendSelection(sel, 10.5, 10.5))).toBe(true);
    expect(isDegenerate(extendSelection(sel, 50, 50))).toBe(false);
  });
});

describe('heatmap scale', () => {
  it('has a hard break at the 20% cutoff', () => {
    const below = tcrColor(0.199, false);
    const above = tcrColor(0.201, false);
    // blue-ish below, warm above: the channel ordering flips
    expect(below.b).toBeGreaterThan(below.r);
    expect(above.r).toBeGreaterThan(above.b);
  });

  it('empty cells are transparent and excluded from the scale', () => {
    expect(tcrColor(0.5, true).a).toBe(0);
    const hm = fakeResult().heatmap;
    expect(populatedCells(hm).length).toBe(3);
  });

  it('legend stops are valid css colors', () => {
    for (const stop of legendStops(10)) {
      expect(stop.css).toMatch(/^rgba\(\d+,\d+,\d+,[0-9.]+\)$/);
    }
    expect(cssColor(tcrColor(1.0, false))).toContain('rgba(');
  });
});
