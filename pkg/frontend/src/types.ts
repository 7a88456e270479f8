// Payload shapes of the analysis server's JSON API.

export interface LevelInfo {
  index: number;
  width: number;
  height: number;
}

export interface SlideInfo {
  id: string;
  width: number;
  height: number;
  mpp: number;
  tile_size: number;
  levels: LevelInfo[];
}

export interface Region {
  x: number;
  y: number;
  w: number;
  h: number;
}

export type JobStatus = 'queued' | 'running' | 'done' | 'failed';

export interface JobRecord {
  job_id: string;
  slide_id: string;
  region: Region;
  status: JobStatus;
  error: string | null;
  progress: { done: number; total: number };
}

export interface CellOut {
  x: number;
  y: number;
  I_d: number;
  I_c: number;
  I_s: number;
  score: number;
  class: 'tumor' | 'normal';
}

export interface HeatmapCell {
  gx: number;
  gy: number;
  n: number;
  n_tumor: number;
  tcr: number;
  empty: boolean;
}

export interface HeatmapOut {
  origin: [number, number];
  side_um: number;
  side_px: number;
  nx: number;
  ny: number;
  cells: HeatmapCell[];
}

export interface AnalysisResult {
  overall_tcr: number;
  tcr_empty: boolean;
  n_cells: number;
  n_tumor: number;
  region: [number, number, number, number];
  cells: CellOut[];
  heatmap: HeatmapOut;
  throughput_mm2_s: number;
}
