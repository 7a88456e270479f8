"""Synthetic H&E-like slides with exact ground truth.

The generator is the test oracle for the full system: it places
non-overlapping elliptical nuclei by Poisson-disk sampling, draws smooth
closed tumor regions, labels every nucleus by position (inside/outside a
tumor region), and renders the scene through a Beer–Lambert model using the
same H/E optical-density vectors the stain augmentation uses. The emitted
annotations and per-region tumor-cell ratios are exact by construction and
the whole process is a pure function of the seed.

Morphology is the learnable signal: tumor nuclei are larger, darker and more
eccentric. `ambiguous_fraction` controls context dependence — that fraction
of cells is drawn with the *other* class's morphology (label unchanged), so
only the surrounding area can resolve them. Tumor regions are also denser
(`blob_density_boost`), a purely contextual cue.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .augment import EOSIN_OD, HEMATOXYLIN_OD
from .slide import SlidePyramid, build_pyramid, save_annotations
from .targets import points_in_polygon

MATCH_RADIUS_UM = 3.2


@dataclass(frozen=True)
class CellStyle:
    """Morphology distribution of one class (radii in µm)."""

    radius_um: tuple[float, float]
    eccentricity: tuple[float, float]
    density: tuple[float, float]  # hematoxylin optical density of the nucleus


NORMAL_STYLE = CellStyle(radius_um=(2.2, 3.2), eccentricity=(0.05, 0.3), density=(0.45, 0.6))
TUMOR_STYLE = CellStyle(radius_um=(3.8, 5.2), eccentricity=(0.45, 0.7), density=(0.7, 0.95))


@dataclass(frozen=True)
class SynthParams:
    width: int = 1024
    height: int = 1024
    mpp: float = 0.45454545454545453  # 20X-native by default
    min_spacing_um: float = 8.0
    cell_keep_prob: float = 0.7       # thinning of the Poisson-disk points
    blob_density_boost: float = 1.4   # relative keep probability inside blobs (capped at 1)
    n_blobs: int = 2
    blob_radius_um: tuple[float, float] = (55.0, 110.0)
    ambiguous_fraction: float = 0.0
    noise_sigma: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.min_spacing_um <= 2.0 * MATCH_RADIUS_UM:
            raise ValueError(
                f"min_spacing_um must exceed {2.0 * MATCH_RADIUS_UM} µm so ground truth "
                f"is unambiguous, got {self.min_spacing_um}")
        if not (0.0 < self.cell_keep_prob <= 1.0):
            raise ValueError(f"cell_keep_prob must be in (0,1], got {self.cell_keep_prob}")
        max_r = TUMOR_STYLE.radius_um[1]
        if self.min_spacing_um < 1.2 * 2.0 * max_r * 0.5:
            # nuclei must not merge into undetectable clumps
            raise ValueError("min_spacing_um too small for the nucleus radius range")
        if self.width * self.mpp < 4 * self.min_spacing_um or \
                self.height * self.mpp < 4 * self.min_spacing_um:
            raise ValueError("slide too small for the requested spacing")


@dataclass
class SynthCell:
    x: float
    y: float
    label: str            # positional truth: tumor iff inside a blob
    radius_px: float
    ecc: float
    angle: float
    od: float


@dataclass
class SynthResult:
    pyramid: SlidePyramid
    points: list          # [{x, y, class}] level-0 integer pixels
    polygons: list        # [[x, y], ...] per blob
    tcr: float
    n_cells: int
    n_tumor: int


def _poisson_disk(rng: np.random.Generator, w: float, h: float, r: float,
                  k: int = 20) -> np.ndarray:
    """Bridson's algorithm on [0,w)×[0,h) with minimum distance r.

    The occupancy grid stores coordinates directly (NaN = empty) so the
    5×5 neighborhood check is one vectorized slice comparison.
    """
    cell = r / math.sqrt(2.0)
    gw, gh = int(math.ceil(w / cell)), int(math.ceil(h / cell))
    gxs = np.full((gh, gw), np.nan)
    gys = np.full((gh, gw), np.nan)
    pts: list[tuple[float, float]] = []
    active: list[int] = []
    rr = r * r

    def fits(px, py):
        gx, gy = int(px / cell), int(py / cell)
        xs = gxs[max(0, gy - 2):gy + 3, max(0, gx - 2):gx + 3]
        ys = gys[max(0, gy - 2):gy + 3, max(0, gx - 2):gx + 3]
        d2 = (xs - px) ** 2 + (ys - py) ** 2
        return not np.any(d2 < rr)  # NaN compares false

    def push(px, py):
        pts.append((px, py))
        gxs[int(py / cell), int(px / cell)] = px
        gys[int(py / cell), int(px / cell)] = py
        active.append(len(pts) - 1)

    push(rng.uniform(0, w), rng.uniform(0, h))
    while active:
        idx = int(rng.integers(len(active)))
        base = pts[active[idx]]
        placed = False
        angles = rng.uniform(0, 2 * math.pi, size=k)
        radii = rng.uniform(r, 2 * r, size=k)
        for ang, rad in zip(angles, radii):
            px, py = base[0] + rad * math.cos(ang), base[1] + rad * math.sin(ang)
            if 0 <= px < w and 0 <= py < h and fits(px, py):
                push(px, py)
                placed = True
                break
        if not placed:
            active.pop(idx)
    return np.array(pts, dtype=np.float64)


def _blob_polygon(rng: np.random.Generator, cx: float, cy: float, radius: float,
                  n_vertices: int = 72) -> np.ndarray:
    """Smooth closed curve: radius modulated by a few low-order harmonics."""
    theta = np.linspace(0.0, 2.0 * math.pi, n_vertices, endpoint=False)
    rho = np.ones_like(theta)
    for order in (2, 3, 5):
        amp = rng.uniform(0.04, 0.14)
        phase = rng.uniform(0, 2 * math.pi)
        rho += amp * np.cos(order * theta + phase)
    xs = cx + radius * rho * np.cos(theta)
    ys = cy + radius * rho * np.sin(theta)
    return np.stack([xs, ys], axis=1)


def _stamp_ellipse(field: np.ndarray, cell: SynthCell) -> None:
    """Accumulate the nucleus optical density with a ~1 px soft edge."""
    h, w = field.shape
    a = cell.radius_px
    b = cell.radius_px * (1.0 - cell.ecc)
    reach = int(math.ceil(a)) + 2
    x0, x1 = max(0, int(cell.x) - reach), min(w, int(cell.x) + reach + 1)
    y0, y1 = max(0, int(cell.y) - reach), min(h, int(cell.y) + reach + 1)
    if x0 >= x1 or y0 >= y1:
        return
    ys = np.arange(y0, y1, dtype=np.float64)[:, None] - cell.y
    xs = np.arange(x0, x1, dtype=np.float64)[None, :] - cell.x
    ca, sa = math.cos(cell.angle), math.sin(cell.angle)
    u = (xs * ca + ys * sa) / a
    v = (-xs * sa + ys * ca) / b
    rho = np.sqrt(u * u + v * v)
    alpha = np.clip((1.0 - rho) * a + 0.5, 0.0, 1.0)  # ~1px analytic soft edge
    np.maximum(field[y0:y1, x0:x1], alpha * cell.od, out=field[y0:y1, x0:x1])


def _eosin_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Low-frequency cytoplasm density in [0.05, 0.4]: random coarse grid,
    bilinearly upsampled."""
    gh, gw = max(2, h // 96), max(2, w // 96)
    coarse = rng.uniform(0.05, 0.40, size=(gh, gw))
    yi = np.linspace(0, gh - 1, h)
    xi = np.linspace(0, gw - 1, w)
    y0 = np.floor(yi).astype(int)
    x0 = np.floor(xi).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (yi - y0)[:, None]
    fx = (xi - x0)[None, :]
    top = coarse[y0][:, x0] * (1 - fx) + coarse[y0][:, x1] * fx
    bot = coarse[y1][:, x0] * (1 - fx) + coarse[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def region_tcr(points: list, rect: tuple[int, int, int, int]) -> tuple[float, int, int]:
    """Exact (tcr, n, n_tumor) over annotation points inside a level-0 rect."""
    x, y, w, h = rect
    n = n_t = 0
    for p in points:
        if x <= p["x"] < x + w and y <= p["y"] < y + h:
            n += 1
            n_t += p["class"] == "tumor"
    return (n_t / n if n else 0.0), n, n_t


def generate_synthetic_slide(params: SynthParams, out_dir) -> SynthResult:
    """Render one slide into `out_dir` (pyramid + annotations + truth)."""
    rng = np.random.default_rng(params.seed)
    w, h = params.width, params.height
    spacing_px = params.min_spacing_um / params.mpp
    margin = TUMOR_STYLE.radius_um[1] / params.mpp + 3.0

    # tumor regions first (labels depend on them)
    polygons: list[np.ndarray] = []
    r_lo, r_hi = (r / params.mpp for r in params.blob_radius_um)
    diag = math.hypot(w, h)
    attempts = 0
    while len(polygons) < params.n_blobs and attempts < 200:
        attempts += 1
        radius = rng.uniform(r_lo, r_hi)
        if radius * 0.55 >= diag / 2.0:
            # swallows the slide from its center: every cell will be tumor
            polygons.append(_blob_polygon(rng, w / 2.0, h / 2.0, radius))
            continue
        pad = radius * 1.25 + margin
        if 2 * pad >= min(w, h):
            radius = min(w, h) / 2.6 - margin
            pad = radius * 1.25 + margin
            if radius <= 0:
                break
        cx = rng.uniform(pad, w - pad)
        cy = rng.uniform(pad, h - pad)
        if any(math.hypot(cx - p[:, 0].mean(), cy - p[:, 1].mean()) < radius * 1.25 +
               (p[:, 0].max() - p[:, 0].min()) / 1.6 for p in polygons):
            continue
        polygons.append(_blob_polygon(rng, cx, cy, radius))

    candidates = _poisson_disk(rng, w - 2 * margin, h - 2 * margin, spacing_px)
    candidates += margin

    in_blob = np.zeros(len(candidates), dtype=bool)
    for poly in polygons:
        in_blob |= points_in_polygon(candidates, poly)
    keep_in = min(1.0, params.cell_keep_prob * params.blob_density_boost)
    keep = rng.random(len(candidates)) < np.where(in_blob, keep_in, params.cell_keep_prob)

    cells: list[SynthCell] = []
    for (px, py), tumor, ok in zip(candidates, in_blob, keep):
        if not ok:
            continue
        label = "tumor" if tumor else "normal"
        ambiguous = rng.random() < params.ambiguous_fraction
        style = (NORMAL_STYLE if tumor else TUMOR_STYLE) if ambiguous \
            else (TUMOR_STYLE if tumor else NORMAL_STYLE)
        cells.append(SynthCell(
            x=px, y=py, label=label,
            radius_px=rng.uniform(*style.radius_um) / params.mpp,
            ecc=rng.uniform(*style.eccentricity),
            angle=rng.uniform(0, math.pi),
            od=rng.uniform(*style.density),
        ))
    if not cells:
        raise ValueError("density/spacing combination produced no cells")

    # Beer–Lambert rendering: accumulate optical densities, exponentiate once.
    h_field = np.zeros((h, w), dtype=np.float64)
    for cell in cells:
        _stamp_ellipse(h_field, cell)
    e_field = _eosin_field(rng, h, w)
    od = (h_field[..., None] * np.asarray(HEMATOXYLIN_OD) +
          e_field[..., None] * np.asarray(EOSIN_OD))
    img = 255.0 * np.power(10.0, -od)
    img += rng.normal(0.0, params.noise_sigma, size=img.shape)
    img = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)

    pyramid = build_pyramid(img, out_dir, mpp=params.mpp)

    points = [{"x": int(round(c.x)), "y": int(round(c.y)), "class": c.label} for c in cells]
    poly_lists = [[[float(x), float(y)] for x, y in poly] for poly in polygons]
    save_annotations(Path(out_dir) / "annotations.json", points, poly_lists, params.mpp)

    n_tumor = sum(p["class"] == "tumor" for p in points)
    tcr = n_tumor / len(points)
    with open(Path(out_dir) / "truth.json", "w") as fh:
        json.dump({"overall_tcr": tcr, "n_cells": len(points), "n_tumor": n_tumor,
                   "params": asdict(params)}, fh)
    return SynthResult(pyramid=pyramid, points=points, polygons=poly_lists,
                       tcr=tcr, n_cells=len(points), n_tumor=n_tumor)
