"""From model output maps to located, scored, classified cells and a ratio.

Peaks of the detection map become candidate cells; each candidate reads a
feature vector [i_d, i_c, i_s] off the three maps; the fused score
alpha*i_c + (1-alpha)*i_s against t_c decides tumor vs normal. All pure
functions: safe inside parallel tile workers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Thresholds:
    t_d: float
    t_c: float
    alpha: float = 0.5

    def __post_init__(self):
        for name in ("t_d", "t_c", "alpha"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class CellRecord:
    """One detected cell in level-0 pixel coordinates."""

    x: int
    y: int
    i_d: float
    i_c: float
    i_s: float
    score: float = 0.0
    cls: str = ""
    tile: int = -1

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "I_d": round(self.i_d, 6),
                "I_c": round(self.i_c, 6), "I_s": round(self.i_s, 6),
                "score": round(self.score, 6), "class": self.cls}


class Peak(NamedTuple):
    x: int
    y: int
    i_d: float


def detect_peaks(map_d: np.ndarray, t_d: float) -> list[Peak]:
    """3×3 local peak detection with a deterministic plateau rule.

    A pixel is a peak iff it is >= all 8 in-bounds neighbors and strictly >
    every neighbor that precedes it in row-major order, which yields exactly
    one peak per constant plateau (the row-major first pixel). Peaks with
    value < t_d are discarded. No further non-maximum suppression.
    """
    m = np.asarray(map_d)
    if m.ndim != 2:
        raise ValueError(f"detect_peaks expects a 2-D map, got {m.shape}")
    pad = np.full((m.shape[0] + 2, m.shape[1] + 2), -np.inf, dtype=np.float64)
    pad[1:-1, 1:-1] = m
    c = pad[1:-1, 1:-1]
    # preceding-in-row-major neighbors: NW, N, NE, W -> strict >
    strict = (
        (c > pad[:-2, :-2]) & (c > pad[:-2, 1:-1]) & (c > pad[:-2, 2:]) & (c > pad[1:-1, :-2])
    )
    # following neighbors: E, SW, S, SE -> >=
    loose = (
        (c >= pad[1:-1, 2:]) & (c >= pad[2:, :-2]) & (c >= pad[2:, 1:-1]) & (c >= pad[2:, 2:])
    )
    ys, xs = np.nonzero(strict & loose & (c >= t_d))
    return [Peak(int(x), int(y), float(m[y, x])) for y, x in zip(ys, xs)]


def bilinear_sample(m: np.ndarray, x: float, y: float) -> tuple[float, bool]:
    """Bilinear read at a continuous map coordinate; out-of-range coordinates
    clamp to the border. Returns (value, clamped)."""
    h, w = m.shape
    clamped = not (0.0 <= x <= w - 1.0 and 0.0 <= y <= h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    top = m[y0, x0] * (1 - fx) + m[y0, x1] * fx
    bot = m[y1, x0] * (1 - fx) + m[y1, x1] * fx
    return float(top * (1 - fy) + bot * fy), clamped


@dataclass
class ScoreSamples:
    features: list[tuple[float, float, float]]
    clamped: int = 0


def sample_scores(peaks: Sequence[Peak], map_c: np.ndarray,
                  map_s: Optional[np.ndarray] = None,
                  s_scale: float = 1.0) -> ScoreSamples:
    """Feature vectors [i_d, i_c, i_s] for each peak.

    map_c shares the detection map's pixel grid (i_c read at the same
    pixel); map_s may live at a coarser magnification reached by multiplying
    peak coordinates by s_scale (e.g. 0.5 from 20X to 10X), read with
    bilinear interpolation. When map_s is absent (single-model mode),
    i_s := i_c.
    """
    out = ScoreSamples(features=[])
    for p in peaks:
        i_c = float(map_c[p.y, p.x])
        if map_s is None:
            i_s = i_c
        else:
            i_s, clamped = bilinear_sample(map_s, p.x * s_scale, p.y * s_scale)
            out.clamped += clamped
        out.features.append((p.i_d, i_c, i_s))
    return out


def classify(cells: Sequence[CellRecord], thresholds: Thresholds) -> list[CellRecord]:
    """Label each cell: tumor iff alpha*i_c + (1-alpha)*i_s > t_c (strict)."""
    a = thresholds.alpha
    for cell in cells:
        cell.score = a * cell.i_c + (1.0 - a) * cell.i_s
        cell.cls = "tumor" if cell.score > thresholds.t_c else "normal"
    return list(cells)


class TcrValue(NamedTuple):
    value: float
    empty: bool


def compute_tcr(cells: Sequence[CellRecord]) -> TcrValue:
    """N_T / N; an empty cell list yields 0.0 with the empty flag set so
    background tiles aggregate harmlessly."""
    n = len(cells)
    if n == 0:
        return TcrValue(0.0, True)
    n_t = sum(c.cls == "tumor" for c in cells)
    return TcrValue(n_t / n, False)
