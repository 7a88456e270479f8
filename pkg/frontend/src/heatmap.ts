import type { HeatmapCell, HeatmapOut } from './types.js';

// Color scale for the ratio overlay. Sequential blue->yellow->red with a
// hard visual break at the 20% genomics cutoff; 27% is the safe-selection
// line drawn on the legend.

export const CUTOFF_TCR = 0.20;
export const SAFE_TCR = 0.27;

export interface Rgba {
  r: number;
  g: number;
  b: number;
  a: number;
}

function lerp(a: number, b: number, t: number): number {
  return a + (b - a) * t;
}

/** Color for one grid cell's ratio; empty cells get a transparent hatch
 * color and never enter the legend scale. */
export function tcrColor(tcr: number, empty: boolean): Rgba {
  if (empty) {
    return { r: 128, g: 128, b: 128, a: 0.0 };
  }
  const t = Math.min(Math.max(tcr, 0), 1);
  if (t < CUTOFF_TCR) {
    // below the usable cutoff: cool, clearly distinct ramp
    const u = t / CUTOFF_TCR;
    return { r: Math.round(lerp(40, 90, u)), g: Math.round(lerp(90, 170, u)),
             b: Math.round(lerp(200, 230, u)), a: 0.45 };
  }
  // above the cutoff: warm ramp from yellow to deep red
  const u = (t - CUTOFF_TCR) / (1 - CUTOFF_TCR);
  return { r: Math.round(lerp(250, 180, u)), g: Math.round(lerp(220, 30, u)),
           b: Math.round(lerp(60, 40, u)), a: 0.55 };
}

export function cssColor(c: Rgba): string {
  return `rgba(${c.r},${c.g},${c.b},${c.a})`;
}

/** Legend stops (ratio, css color) for the populated scale. */
export function legendStops(steps = 12): Array<{ tcr: number; css: string }> {
  const stops: Array<{ tcr: number; css: string }> = [];
  for (let i = 0; i <= steps; i++) {
    const tcr = i / steps;
    stops.push({ tcr, css: cssColor(tcrColor(tcr, false)) });
  }
  return stops;
}

/** Cells that participate in the display scale (empty ones excluded). */
export function populatedCells(heatmap: HeatmapOut): HeatmapCell[] {
  return heatmap.cells.filter((c) => !c.empty);
}
