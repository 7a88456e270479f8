"""Whole-slide orchestration: halo-overlapped tile planning, a parallel
worker pool, exactly-once cell aggregation, the ratio heatmap, and the
per-stage timing profile.

Tile interiors exactly partition the analysis region; every tile reads its
interior plus a halo (clipped at the slide bounds) but only keeps cells
whose level-0 coordinates fall inside its interior, so cells are counted
exactly once with no cross-tile reconciliation. The output is a pure
function of (slide, config, thresholds): worker count and completion order
cannot change it. BLAS threading is pinned to one thread per worker while
the pool runs, so `workers` is the parallelism.
"""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .model import UNet, load_weights, output_receptive_field
from .postprocess import CellRecord, Thresholds, classify, compute_tcr, detect_peaks, sample_scores
from .slide import SlidePyramid, magnification_factor

#: ceil(188 / 2): half the full-scale topology's receptive field, in
#: detection-magnification pixels.
DEFAULT_HALO = 94

STAGE_NAMES = ("read pixels", "model inference", "save result", "peak detect", "model setup")


class Rect(NamedTuple):
    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class TileJob:
    index: int
    interior: Rect   # level-0; interiors partition the region exactly
    padded: Rect     # interior + halo, clipped to slide bounds, grid-aligned


@dataclass
class StageTiming:
    """Cumulative seconds per pipeline stage, across all workers."""

    seconds: dict = field(default_factory=lambda: {name: 0.0 for name in STAGE_NAMES})
    wall: float = 0.0

    def add(self, name: str, dt: float) -> None:
        self.seconds[name] += dt

    def merge(self, other: "StageTiming") -> None:
        for name, dt in other.seconds.items():
            self.seconds[name] += dt

    def shares(self) -> dict:
        """Fractions of the total attributed+unattributed busy time; sums ≤ 1,
        the residual is unattributed work."""
        attributed = sum(self.seconds.values())
        total = max(attributed, self.wall, 1e-12)
        return {name: self.seconds[name] / total for name in STAGE_NAMES}

    def to_json(self) -> dict:
        return {"seconds": {k: round(v, 4) for k, v in self.seconds.items()},
                "shares": {k: round(v, 4) for k, v in self.shares().items()},
                "wall_seconds": round(self.wall, 4)}


@dataclass
class PipelineConfig:
    det_weights: str
    det_magnification: float
    thresholds: Thresholds
    seg_weights: Optional[str] = None
    seg_magnification: Optional[float] = None
    halo: int = DEFAULT_HALO          # detection-magnification pixels
    interior: int = 512               # level-0 pixels
    heatmap_um: float = 128.0

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            raw = json.load(fh)
        thr = raw["thresholds"]
        return cls(
            det_weights=raw["det_weights"],
            det_magnification=raw["det_magnification"],
            thresholds=Thresholds(thr["t_d"], thr["t_c"], thr.get("alpha", 0.5)),
            seg_weights=raw.get("seg_weights"),
            seg_magnification=raw.get("seg_magnification"),
            halo=raw.get("halo", DEFAULT_HALO),
            interior=raw.get("interior", 512),
            heatmap_um=raw.get("heatmap_um", 128.0),
        )

    def save(self, path) -> None:
        raw = {
            "det_weights": self.det_weights,
            "det_magnification": self.det_magnification,
            "thresholds": {"t_d": self.thresholds.t_d, "t_c": self.thresholds.t_c,
                           "alpha": self.thresholds.alpha},
            "seg_weights": self.seg_weights,
            "seg_magnification": self.seg_magnification,
            "halo": self.halo,
            "interior": self.interior,
            "heatmap_um": self.heatmap_um,
        }
        with open(path, "w") as fh:
            json.dump(raw, fh, indent=2)


def _grid_step(factor: float) -> int:
    q = max(1, int(round(1.0 / factor)))
    if abs(q * factor - 1.0) > 1e-9:
        raise ValueError(f"pipeline magnification factor {factor} must be a "
                         f"power-of-two reciprocal (1, 1/2, 1/4, ...)")
    return q


def plan_tiles(region: Rect, interior_size: int, halo: int, f_det: float,
               slide_size: tuple[int, int], align: Optional[int] = None) -> list[TileJob]:
    """Row-major grid of interiors exactly covering `region`.

    `halo` is given in detection-magnification pixels and converted to
    level-0. Padded rects clip at the slide bounds, then snap outward to the
    canonical grid (`align` level-0 px: the resample step times the model's
    pooling lattice 2**levels), possibly overhanging the right/bottom slide
    edge; the overhang is edge-replicated at read time. Every tile therefore
    samples the same pixel grid AND the same pooling lattice as a
    whole-region run, so the retained cell set cannot depend on the tiling.
    """
    sw, sh = slide_size
    if region.x < 0 or region.y < 0 or region.w <= 0 or region.h <= 0 \
            or region.x + region.w > sw or region.y + region.h > sh:
        raise ValueError(f"region {region} outside slide {sw}x{sh}")
    q = align if align is not None else _grid_step(f_det)
    pad0 = math.ceil(halo / f_det)
    jobs: list[TileJob] = []
    index = 0
    for y in range(region.y, region.y + region.h, interior_size):
        th = min(interior_size, region.y + region.h - y)
        for x in range(region.x, region.x + region.w, interior_size):
            tw = min(interior_size, region.x + region.w - x)
            px0 = max(0, x - pad0)
            py0 = max(0, y - pad0)
            px1 = min(sw, x + tw + pad0)
            py1 = min(sh, y + th + pad0)
            px0 -= px0 % q
            py0 -= py0 % q
            px1 += (-px1) % q
            py1 += (-py1) % q
            jobs.append(TileJob(index=index, interior=Rect(x, y, tw, th),
                                padded=Rect(px0, py0, px1 - px0, py1 - py0)))
            index += 1
    return jobs


def _read_aligned(slide: SlidePyramid, rect: Rect, factor: float) -> np.ndarray:
    """Exact read of an aligned rect that may overhang the slide's
    right/bottom edge; the overhang is replicated from the border pixels."""
    q = _grid_step(factor)
    exp_w, exp_h = rect.w // q, rect.h // q
    in_w = min(rect.x + rect.w, (slide.width // q) * q) - rect.x
    in_h = min(rect.y + rect.h, (slide.height // q) * q) - rect.y
    img = slide.read_region(rect.x, rect.y, in_w, in_h, factor).pixels
    pad_h = exp_h - img.shape[0]
    pad_w = exp_w - img.shape[1]
    if pad_h or pad_w:
        img = np.pad(img, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    return img


@dataclass
class TileResult:
    index: int
    cells: list[CellRecord]
    timing: StageTiming
    clamped_samples: int = 0


def run_tile(job: TileJob, slide: SlidePyramid, det_model: UNet, cfg: PipelineConfig,
             seg_model: Optional[UNet] = None) -> TileResult:
    """Read the padded region, run the model(s), keep interior-owned cells."""
    timing = StageTiming()
    f_d = magnification_factor(slide.mpp, cfg.det_magnification)
    px, py, _, _ = job.padded

    t0 = time.perf_counter()
    img = _read_aligned(slide, job.padded, f_d)
    timing.add("read pixels", time.perf_counter() - t0)

    t0 = time.perf_counter()
    maps = det_model.forward_maps(np.moveaxis(img, 2, 0).astype(np.float32) / 255.0)
    timing.add("model inference", time.perf_counter() - t0)
    map_d, map_c = maps[0], maps[1]

    map_s, s_scale = None, 1.0
    if seg_model is not None:
        f_s = magnification_factor(slide.mpp, cfg.seg_magnification)
        t0 = time.perf_counter()
        seg_img = _read_aligned(slide, job.padded, f_s)
        timing.add("read pixels", time.perf_counter() - t0)
        t0 = time.perf_counter()
        map_s = seg_model.forward_maps(
            np.moveaxis(seg_img, 2, 0).astype(np.float32) / 255.0)[0]
        timing.add("model inference", time.perf_counter() - t0)
        s_scale = f_s / f_d

    t0 = time.perf_counter()
    peaks = detect_peaks(map_d, cfg.thresholds.t_d)
    ix, iy, iw, ih = job.interior
    owned = []
    for p in peaks:
        x0 = px + int(round(p.x / f_d))
        y0 = py + int(round(p.y / f_d))
        if ix <= x0 < ix + iw and iy <= y0 < iy + ih:
            owned.append((p, x0, y0))
    samples = sample_scores([p for p, _, _ in owned], map_c, map_s, s_scale)
    cells = [
        CellRecord(x=x0, y=y0, i_d=f[0], i_c=f[1], i_s=f[2], tile=job.index)
        for (p, x0, y0), f in zip(owned, samples.features)
    ]
    classify(cells, cfg.thresholds)
    timing.add("peak detect", time.perf_counter() - t0)
    return TileResult(index=job.index, cells=cells, timing=timing,
                      clamped_samples=samples.clamped)


@dataclass
class HeatmapGrid:
    """Square-grid TCR summary (cell side in µm, origin at the region corner)."""

    origin: tuple[int, int]
    side_um: float
    side_px: float
    nx: int
    ny: int
    n: np.ndarray       # (ny, nx) int
    n_tumor: np.ndarray

    def tcr(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(self.n > 0, self.n_tumor / np.maximum(self.n, 1), 0.0)

    def to_json(self) -> dict:
        tcr = self.tcr()
        cells = []
        for gy in range(self.ny):
            for gx in range(self.nx):
                cells.append({"gx": gx, "gy": gy, "n": int(self.n[gy, gx]),
                              "n_tumor": int(self.n_tumor[gy, gx]),
                              "tcr": round(float(tcr[gy, gx]), 6),
                              "empty": not int(self.n[gy, gx])})
        return {"origin": list(self.origin), "side_um": self.side_um,
                "side_px": self.side_px, "nx": self.nx, "ny": self.ny,
                "cells": cells}


def build_heatmap(cells: Sequence[CellRecord], region: Rect, side_um: float,
                  mpp: float) -> HeatmapGrid:
    if side_um <= 0:
        raise ValueError(f"heatmap cell side must be positive, got {side_um}")
    side_px = side_um / mpp
    nx = max(1, math.ceil(region.w / side_px))
    ny = max(1, math.ceil(region.h / side_px))
    n = np.zeros((ny, nx), dtype=np.int64)
    n_t = np.zeros((ny, nx), dtype=np.int64)
    for c in cells:
        gx = min(nx - 1, int((c.x - region.x) / side_px))
        gy = min(ny - 1, int((c.y - region.y) / side_px))
        n[gy, gx] += 1
        n_t[gy, gx] += c.cls == "tumor"
    return HeatmapGrid(origin=(region.x, region.y), side_um=side_um, side_px=side_px,
                       nx=nx, ny=ny, n=n, n_tumor=n_t)


@dataclass
class PipelineResult:
    cells: list[CellRecord]
    tcr: float
    tcr_empty: bool
    heatmap: HeatmapGrid
    timing: StageTiming
    throughput_mm2_s: float
    area_mm2: float
    region: Rect
    failures: list[tuple[int, str]]
    clamped_samples: int = 0

    @property
    def clean(self) -> bool:
        return not self.failures

    def to_json(self) -> dict:
        return {
            "overall_tcr": round(self.tcr, 6),
            "tcr_empty": self.tcr_empty,
            "n_cells": len(self.cells),
            "n_tumor": sum(c.cls == "tumor" for c in self.cells),
            "region": list(self.region),
            "cells": [c.to_json() for c in self.cells],
            "heatmap": self.heatmap.to_json(),
            "timing": self.timing.to_json(),
            "throughput_mm2_s": round(self.throughput_mm2_s, 6),
            "area_mm2": round(self.area_mm2, 6),
            "failures": [{"tile": i, "error": e} for i, e in self.failures],
        }


def run_pipeline(slide: SlidePyramid, region: Optional[Rect], cfg: PipelineConfig,
                 workers: int = 1, out_path=None,
                 progress: Optional[Callable[[int, int], None]] = None) -> PipelineResult:
    """Plan tiles, run them on `workers` threads, aggregate order-free.

    Failed tiles are reported in `failures` alongside the partial result.
    When `out_path` is set the result JSON is written there (timed as the
    "save result" stage).
    """
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    wall_start = time.perf_counter()
    timing = StageTiming()

    t0 = time.perf_counter()
    det_model = load_weights(cfg.det_weights)
    seg_model = load_weights(cfg.seg_weights) if cfg.seg_weights else None
    timing.add("model setup", time.perf_counter() - t0)

    if region is None:
        region = Rect(0, 0, slide.width, slide.height)
    f_det = magnification_factor(slide.mpp, cfg.det_magnification)
    min_halo = math.ceil(output_receptive_field(det_model.config) / 2)
    halo = max(cfg.halo, min_halo)
    # padded origins must land on every model's pooling lattice (read grid
    # times 2**levels), or tiling would shift the pooling partitions
    align = _grid_step(f_det) * 2 ** det_model.config.levels
    if seg_model is not None:
        f_s = magnification_factor(slide.mpp, cfg.seg_magnification)
        align = max(align, _grid_step(f_s) * 2 ** seg_model.config.levels)
    jobs = plan_tiles(region, cfg.interior, halo, f_det, (slide.width, slide.height),
                      align=align)

    results: dict[int, TileResult] = {}
    failures: list[tuple[int, str]] = []
    done = 0
    if progress:
        progress(0, len(jobs))

    def work(job: TileJob) -> TileResult:
        return run_tile(job, slide, det_model, cfg, seg_model)

    with threadpool_limits(limits=1):
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(work, job): job for job in jobs}
            for future, job in futures.items():
                try:
                    res = future.result()
                    results[res.index] = res
                except Exception as exc:  # noqa: BLE001 - tile faults become job failures
                    failures.append((job.index, f"{type(exc).__name__}: {exc}"))
                done += 1
                if progress:
                    progress(done, len(jobs))

    cells: list[CellRecord] = []
    clamped = 0
    for index in sorted(results):
        cells.extend(results[index].cells)
        timing.merge(results[index].timing)
        clamped += results[index].clamped_samples
    cells.sort(key=lambda c: (c.y, c.x))
    failures.sort()

    ratio = compute_tcr(cells)
    heatmap = build_heatmap(cells, region, cfg.heatmap_um, slide.mpp)
    area_mm2 = region.w * region.h * slide.mpp ** 2 / 1e6

    result = PipelineResult(cells=cells, tcr=ratio.value, tcr_empty=ratio.empty,
                            heatmap=heatmap, timing=timing, throughput_mm2_s=0.0,
                            area_mm2=area_mm2, region=region, failures=failures,
                            clamped_samples=clamped)
    if out_path is not None:
        t0 = time.perf_counter()
        payload = json.dumps(result.to_json())
        Path(out_path).write_text(payload)
        timing.add("save result", time.perf_counter() - t0)
    timing.wall = time.perf_counter() - wall_start
    result.throughput_mm2_s = area_mm2 / timing.wall
    return result
