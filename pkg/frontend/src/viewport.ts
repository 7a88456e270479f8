import type { SlideInfo } from './types.js';

// Pan/zoom state in slide (level-0) coordinates. zoom is the continuous
// display scale: screen pixels per level-0 pixel. All math lives here so it
// can be unit-tested without a canvas.

export interface ViewportState {
  centerX: number;
  centerY: number;
  zoom: number;
}

export interface TileAddress {
  level: number;
  tx: number;
  ty: number;
}

export function minZoom(slide: SlideInfo, viewW: number, viewH: number): number {
  return Math.min(viewW / slide.width, viewH / slide.height);
}

export function clampZoom(slide: SlideInfo, viewW: number, viewH: number,
                          zoom: number): number {
  // allow up to 4x magnification of the stored level-0 data
  return Math.min(Math.max(zoom, minZoom(slide, viewW, viewH)), 4.0);
}

export function fitViewport(slide: SlideInfo, viewW: number, viewH: number): ViewportState {
  return {
    centerX: slide.width / 2,
    centerY: slide.height / 2,
    zoom: minZoom(slide, viewW, viewH),
  };
}

/** Pyramid level whose scale is nearest the zoom: level k shows the slide at
 * 2^-k, so the switch happens at the (logarithmic) midpoint between levels. */
export function levelForZoom(slide: SlideInfo, zoom: number): number {
  const ideal = -Math.log2(Math.max(zoom, 1e-9));
  const level = Math.round(ideal);
  return Math.min(Math.max(level, 0), slide.levels.length - 1);
}

export function screenToSlide(state: ViewportState, viewW: number, viewH: number,
                              sx: number, sy: number): { x: number; y: number } {
  return {
    x: state.centerX + (sx - viewW / 2) / state.zoom,
    y: state.centerY + (sy - viewH / 2) / state.zoom,
  };
}

export function slideToScreen(state: ViewportState, viewW: number, viewH: number,
                              x: number, y: number): { x: number; y: number } {
  return {
    x: (x - state.centerX) * state.zoom + viewW / 2,
    y: (y - state.centerY) * state.zoom + viewH / 2,
  };
}

/** Tiles of the chosen level intersecting the viewport, row-major. */
export function visibleTiles(slide: SlideInfo, state: ViewportState,
                             viewW: number, viewH: number): TileAddress[] {
  const level = levelForZoom(slide, state.zoom);
  const info = slide.levels[level];
  const ds = 1 << level;
  const topLeft = screenToSlide(state, viewW, viewH, 0, 0);
  const bottomRight = screenToSlide(state, viewW, viewH, viewW, viewH);
  const ts = slide.tile_size;
  const tx0 = Math.max(0, Math.floor(topLeft.x / ds / ts));
  const ty0 = Math.max(0, Math.floor(topLeft.y / ds / ts));
  const tx1 = Math.min(Math.ceil(info.width / ts) - 1, Math.floor(bottomRight.x / ds / ts));
  const ty1 = Math.min(Math.ceil(info.height / ts) - 1, Math.floor(bottomRight.y / ds / ts));
  const tiles: TileAddress[] = [];
  for (let ty = ty0; ty <= ty1; ty++) {
    for (let tx = tx0; tx <= tx1; tx++) {
      tiles.push({ level, tx, ty });
    }
  }
  return tiles;
}

export function pan(state: ViewportState, dxScreen: number, dyScreen: number): ViewportState {
  return {
    ...state,
    centerX: state.centerX - dxScreen / state.zoom,
    centerY: state.centerY - dyScreen / state.zoom,
  };
}

/** Zoom by `factor` keeping the slide point under (sx, sy) fixed. */
export function zoomAt(slide: SlideInfo, state: ViewportState, viewW: number,
                       viewH: number, factor: number, sx: number, sy: number): ViewportState {
  const anchor = screenToSlide(state, viewW, viewH, sx, sy);
  const zoom = clampZoom(slide, viewW, viewH, state.zoom * factor);
  const scale = state.zoom / zoom;
  return {
    zoom,
    centerX: anchor.x + (state.centerX - anchor.x) * scale,
    centerY: anchor.y + (state.centerY - anchor.y) * scale,
  };
}
