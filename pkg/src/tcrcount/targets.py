"""Training target maps rendered from annotations.

Point targets carry one unit-height Gaussian peak per nucleus center
(σ = 2 px at 40X, scaled with the magnification factor, truncated at 3σ);
overlapping peaks combine by per-pixel max so every nucleus stays a single
unit peak and targets stay in [0, 1]. Area targets are hard fills of the
tumor polygons (even-odd rule per polygon, union across the list).
"""
from __future__ import annotations

import logging
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

#: Gaussian peak parameters at 40X; scale both with the magnification factor.
PEAK_SIGMA_40X = 2.0
PEAK_RADIUS_40X = 4.0


def peak_sigma(magnification: float) -> float:
    return PEAK_SIGMA_40X * (magnification / 40.0)


def make_point_target(points: Sequence[tuple[float, float]], shape: tuple[int, int],
                      magnification: float = 40.0, sigma: float | None = None) -> np.ndarray:
    """Render peaks for points given in target-map pixel coordinates.

    Points outside `shape` are skipped (counted via a warning log). The
    caller selects which points participate (all cells for the detection
    target, tumor cells only for the classification target).
    """
    h, w = shape
    out = np.zeros((h, w), dtype=np.float32)
    sig = peak_sigma(magnification) if sigma is None else sigma
    sig = max(sig, 0.5)  # keep a representable peak at very coarse scales
    rad = int(np.ceil(3.0 * sig))
    skipped = 0
    for px, py in points:
        if not (0 <= px < w and 0 <= py < h):
            skipped += 1
            continue
        x0, x1 = max(0, int(np.floor(px)) - rad), min(w, int(np.floor(px)) + rad + 1)
        y0, y1 = max(0, int(np.floor(py)) - rad), min(h, int(np.floor(py)) + rad + 1)
        ys = np.arange(y0, y1, dtype=np.float32)[:, None] - py
        xs = np.arange(x0, x1, dtype=np.float32)[None, :] - px
        d2 = ys * ys + xs * xs
        peak = np.exp(-d2 / (2.0 * sig * sig)).astype(np.float32)
        peak[d2 > (3.0 * sig) ** 2] = 0.0
        np.maximum(out[y0:y1, x0:x1], peak, out=out[y0:y1, x0:x1])
    if skipped:
        log.warning("make_point_target: %d point(s) outside %dx%d skipped", skipped, w, h)
    return out


def fill_polygon(mask: np.ndarray, vertices: np.ndarray) -> None:
    """Set pixels whose centers are inside the polygon (even-odd rule)."""
    h, w = mask.shape
    vy = vertices[:, 1]
    vx = vertices[:, 0]
    y0 = max(0, int(np.floor(vy.min() - 0.5)))
    y1 = min(h, int(np.ceil(vy.max() + 0.5)))
    n = len(vertices)
    for row in range(y0, y1):
        cy = row + 0.5
        xs = []
        for i in range(n):
            x1_, y1_ = vx[i], vy[i]
            x2_, y2_ = vx[(i + 1) % n], vy[(i + 1) % n]
            if (y1_ <= cy) == (y2_ <= cy):
                continue  # edge does not cross the scanline (half-open rule)
            t = (cy - y1_) / (y2_ - y1_)
            xs.append(x1_ + t * (x2_ - x1_))
        xs.sort()
        for a, b in zip(xs[::2], xs[1::2]):
            # centers strictly inside (a, b): same convention as the
            # even-odd containment test (a crossing counts when px < xi)
            left = int(np.floor(a - 0.5)) + 1
            right = int(np.ceil(b - 0.5)) - 1
            if right >= left:
                mask[row, max(0, left):min(w, right + 1)] = 1.0


def make_area_target(polygons: Iterable[Sequence[Sequence[float]]],
                     shape: tuple[int, int]) -> np.ndarray:
    """1.0 inside any polygon, 0.0 outside, no smoothing.

    Polygons arrive as vertex lists in target-map pixel coordinates;
    degenerate ones (< 3 vertices) are skipped with a warning.
    """
    out = np.zeros(shape, dtype=np.float32)
    for poly in polygons:
        verts = np.asarray(poly, dtype=np.float64)
        if verts.ndim != 2 or len(verts) < 3:
            log.warning("make_area_target: skipping degenerate polygon with %d vertices",
                        0 if verts.ndim != 2 else len(verts))
            continue
        fill_polygon(out, verts)
    return out


def point_in_polygon(px: float, py: float, vertices: np.ndarray) -> bool:
    """Even-odd containment test, consistent with fill_polygon."""
    inside = False
    n = len(vertices)
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        if (y1 <= py) == (y2 <= py):
            continue
        t = (py - y1) / (y2 - y1)
        if px < x1 + t * (x2 - x1):
            inside = not inside
    return inside


def points_in_polygon(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Vectorized even-odd containment for an (N, 2) point array."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    n = len(vertices)
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        crosses = (y1 <= y) != (y2 <= y)
        if not crosses.any():
            continue
        t = (y[crosses] - y1) / (y2 - y1)
        inside[crosses] ^= x[crosses] < x1 + t * (x2 - x1)
    return inside
