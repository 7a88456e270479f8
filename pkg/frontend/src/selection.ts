import type { Region } from './types.js';

// Region marking in level-0 coordinates: a dragged rectangle or a freehand
// polygon. Either serializes to the server's rectangular region schema (the
// polygon submits its bounding box; the trace itself stays client-side for
// display).

export type SelectionMode = 'rect' | 'freehand';

export interface Selection {
  mode: SelectionMode;
  points: Array<{ x: number; y: number }>;
}

export function startSelection(mode: SelectionMode, x: number, y: number): Selection {
  return { mode, points: [{ x, y }] };
}

export function extendSelection(sel: Selection, x: number, y: number): Selection {
  if (sel.mode === 'rect') {
    return { mode: 'rect', points: [sel.points[0], { x, y }] };
  }
  return { mode: 'freehand', points: [...sel.points, { x, y }] };
}

export function isDegenerate(sel: Selection): boolean {
  const region = toRegion(sel, { width: Infinity, height: Infinity });
  return region === null || region.w < 2 || region.h < 2;
}

/** Clamp to the slide and serialize to the server's region schema. */
export function toRegion(sel: Selection,
                         slide: { width: number; height: number }): Region | null {
  if (sel.points.length < 2) {
    return null;
  }
  const xs = sel.points.map((p) => p.x);
  const ys = sel.points.map((p) => p.y);
  const x0 = Math.max(0, Math.floor(Math.min(...xs)));
  const y0 = Math.max(0, Math.floor(Math.min(...ys)));
  const x1 = Math.min(slide.width, Math.ceil(Math.max(...xs)));
  const y1 = Math.min(slide.height, Math.ceil(Math.max(...ys)));
  if (x1 - x0 <= 0 || y1 - y0 <= 0) {
    return null;
  }
  return { x: x0, y: y0, w: x1 - x0, h: y1 - y0 };
}
