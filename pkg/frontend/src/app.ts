import { ApiClient } from './api.js';
import { cssColor, legendStops, tcrColor, CUTOFF_TCR, SAFE_TCR } from './heatmap.js';
import { AppModel } from './model.js';
import { extendSelection, startSelection, SelectionMode } from './selection.js';
import { TileCache } from './tiles.js';
import {
  fitViewport, levelForZoom, pan, screenToSlide, slideToScreen,
  visibleTiles, ViewportState, zoomAt,
} from './viewport.js';

// DOM/canvas layer. All numbers shown come from AppModel, which reads them
// from the server payloads.

export class ViewerApp {
  private model: AppModel;
  private canvas: HTMLCanvasElement;
  private ctx: CanvasRenderingContext2D;
  private viewport: ViewportState = { centerX: 0, centerY: 0, zoom: 1 };
  private tiles: TileCache | null = null;
  private dragging: 'pan' | 'select' | null = null;
  private lastPointer = { x: 0, y: 0 };
  private selectionMode: SelectionMode = 'rect';

  constructor(private readonly api: ApiClient, private readonly root: HTMLElement) {
    this.model = new AppModel(api);
    this.canvas = root.querySelector('#slide-canvas') as HTMLCanvasElement;
    this.ctx = this.canvas.getContext('2d')!;
    this.model.onChange = () => this.sync();
  }

  async start(): Promise<void> {
    const slide = await this.model.loadFirstSlide();
    this.tiles = new TileCache(this.api, slide.id, () => this.render());
    this.resize();
    this.viewport = fitViewport(slide, this.canvas.width, this.canvas.height);
    this.bind();
    this.render();
  }

  private resize(): void {
    this.canvas.width = this.canvas.clientWidth;
    this.canvas.height = this.canvas.clientHeight;
  }

  private bind(): void {
    window.addEventListener('resize', () => {
      this.resize();
      this.render();
    });
    this.canvas.addEventListener('wheel', (ev) => {
      ev.preventDefault();
      const factor = ev.deltaY < 0 ? 1.25 : 0.8;
      this.viewport = zoomAt(this.model.slide!, this.viewport, this.canvas.width,
                             this.canvas.height, factor, ev.offsetX, ev.offsetY);
      this.render();
    }, { passive: false });
    this.canvas.addEventListener('pointerdown', (ev) => {
      this.canvas.setPointerCapture(ev.pointerId);
      this.lastPointer = { x: ev.offsetX, y: ev.offsetY };
      if (ev.shiftKey || this.selectToggle().checked) {
        this.dragging = 'select';
        const p = this.toSlide(ev.offsetX, ev.offsetY);
        this.model.selection = startSelection(this.selectionMode, p.x, p.y);
      } else {
        this.dragging = 'pan';
      }
    });
    this.canvas.addEventListener('pointermove', (ev) => {
      if (this.dragging === 'pan') {
        this.viewport = pan(this.viewport, ev.offsetX - this.lastPointer.x,
                            ev.offsetY - this.lastPointer.y);
        this.lastPointer = { x: ev.offsetX, y: ev.offsetY };
        this.render();
      } else if (this.dragging === 'select' && this.model.selection) {
        const p = this.toSlide(ev.offsetX, ev.offsetY);
        this.model.selection = extendSelection(this.model.selection, p.x, p.y);
        this.render();
      }
    });
    this.canvas.addEventListener('pointerup', () => {
      this.dragging = null;
    });
    (this.root.querySelector('#btn-analyze') as HTMLButtonElement)
      .addEventListener('click', () => void this.model.analyzeSelection());
    (this.root.querySelector('#btn-clear') as HTMLButtonElement)
      .addEventListener('click', () => {
        this.model.selection = null;
        this.render();
      });
    (this.root.querySelector('#chk-cells') as HTMLInputElement)
      .addEventListener('change', () => this.model.toggleCellOverlay());
    (this.root.querySelector('#sel-mode') as HTMLSelectElement)
      .addEventListener('change', (ev) => {
        this.selectionMode = (ev.target as HTMLSelectElement).value as SelectionMode;
      });
  }

  private selectToggle(): HTMLInputElement {
    return this.root.querySelector('#chk-select') as HTMLInputElement;
  }

  private toSlide(sx: number, sy: number): { x: number; y: number } {
    return screenToSlide(this.viewport, this.canvas.width, this.canvas.height, sx, sy);
  }

  private sync(): void {
    const banner = this.model.banner();
    (this.root.querySelector('#banner') as HTMLElement).textContent = banner.text;
    this.renderLegend();
    this.render();
  }

  private render(): void {
    const slide = this.model.slide;
    if (!slide || !this.tiles) {
      return;
    }
    const { width: vw, height: vh } = this.canvas;
    this.ctx.fillStyle = '#202020';
    this.ctx.fillRect(0, 0, vw, vh);

    const level = levelForZoom(slide, this.viewport.zoom);
    const ds = 1 << level;
    this.ctx.imageSmoothingEnabled = true;
    for (const addr of visibleTiles(slide, this.viewport, vw, vh)) {
      const img = this.tiles.get(addr);
      if (!img) {
        continue;   // placeholder: background shows through; retried on load
      }
      const ts = slide.tile_size;
      const origin = slideToScreen(this.viewport, vw, vh,
                                   addr.tx * ts * ds, addr.ty * ts * ds);
      const scale = this.viewport.zoom * ds;
      this.ctx.drawImage(img, origin.x, origin.y,
                         img.width * scale, img.height * scale);
    }
    this.renderHeatmap(vw, vh);
    this.renderCells(vw, vh);
    this.renderSelection(vw, vh);
  }

  private renderHeatmap(vw: number, vh: number): void {
    const result = this.model.result;
    if (!result) {
      return;
    }
    const hm = result.heatmap;
    for (const cell of hm.cells) {
      if (cell.empty) {
        continue;
      }
      const x0 = hm.origin[0] + cell.gx * hm.side_px;
      const y0 = hm.origin[1] + cell.gy * hm.side_px;
      const a = slideToScreen(this.viewport, vw, vh, x0, y0);
      const b = slideToScreen(this.viewport, vw, vh, x0 + hm.side_px, y0 + hm.side_px);
      this.ctx.fillStyle = cssColor(tcrColor(cell.tcr, cell.empty));
      this.ctx.fillRect(a.x, a.y, b.x - a.x, b.y - a.y);
    }
  }

  private renderCells(vw: number, vh: number): void {
    const result = this.model.result;
    if (!result || !this.model.showCellOverlay) {
      return;
    }
    this.ctx.fillStyle = 'rgba(0, 255, 255, 0.9)';  // tumor cells in cyan
    for (const cell of result.cells) {
      if (cell.class !== 'tumor') {
        continue;
      }
      const p = slideToScreen(this.viewport, vw, vh, cell.x, cell.y);
      if (p.x < -4 || p.y < -4 || p.x > vw + 4 || p.y > vh + 4) {
        continue;
      }
      this.ctx.beginPath();
      this.ctx.arc(p.x, p.y, Math.max(1.5, this.viewport.zoom * 3), 0, Math.PI * 2);
      this.ctx.fill();
    }
  }

  private renderSelection(vw: number, vh: number): void {
    const sel = this.model.selection;
    if (!sel || sel.points.length < 2) {
      return;
    }
    this.ctx.strokeStyle = '#00e08a';
    this.ctx.lineWidth = 2;
    this.ctx.setLineDash([6, 4]);
    this.ctx.beginPath();
    if (sel.mode === 'rect') {
      const a = slideToScreen(this.viewport, vw, vh, sel.points[0].x, sel.points[0].y);
      const b = slideToScreen(this.viewport, vw, vh, sel.points[1].x, sel.points[1].y);
      this.ctx.strokeRect(Math.min(a.x, b.x), Math.min(a.y, b.y),
                          Math.abs(b.x - a.x), Math.abs(b.y - a.y));
    } else {
      sel.points.forEach((pt, i) => {
        const p = slideToScreen(this.viewport, vw, vh, pt.x, pt.y);
        if (i === 0) this.ctx.moveTo(p.x, p.y);
        else this.ctx.lineTo(p.x, p.y);
      });
      this.ctx.closePath();
      this.ctx.stroke();
    }
    this.ctx.setLineDash([]);
  }

  private renderLegend(): void {
    const legend = this.root.querySelector('#legend') as HTMLElement;
    legend.innerHTML = '';
    for (const stop of legendStops(20)) {
      const chip = document.createElement('div');
      chip.className = 'legend-chip';
      chip.style.background = stop.css;
      chip.title = `${Math.round(stop.tcr * 100)}%`;
      legend.appendChild(chip);
    }
    const marks = document.createElement('div');
    marks.className = 'legend-marks';
    marks.textContent =
      `cutoff ${CUTOFF_TCR * 100}% · safe-selection ${SAFE_TCR * 100}%`;
    legend.appendChild(marks);
  }
}
