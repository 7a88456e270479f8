"""Slide-level dataset partitioning and augmented patch sampling.

Splits are assigned at slide granularity (every ROI of a slide lands in the
same subset) with 70/10/20 proportions. Patch sampling is a pure function of
its seed: the ROI pick, the position, and every augmentation parameter are
drawn from one per-sample generator.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import AugmentParams, apply_chain
from .slide import SlidePyramid, load_annotations, magnification_factor
from .targets import make_area_target, make_point_target

log = logging.getLogger(__name__)


@dataclass
class Roi:
    slide: SlidePyramid
    rect: tuple[int, int, int, int]    # level-0
    points: list[dict]                 # [{x, y, class}]
    polygons: list[list[list[float]]]
    slide_id: str
    roi_id: str


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    seed: int

    @property
    def assignment(self) -> dict[str, str]:
        out = {}
        for name in ("train", "validation", "test"):
            for sid in getattr(self, name):
                out[sid] = name
        return out


def partition(slide_ids: Sequence[str], seed: int) -> DatasetSplit:
    """Deterministic shuffle, then greedy 70/10/20 fill by slide count;
    every split non-empty. Fewer than 3 slides is rejected."""
    ids = list(slide_ids)
    if len(ids) < 3:
        raise ValueError(f"need at least 3 slides to partition, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_train = max(1, int(round(0.7 * n)))
    n_val = max(1, int(round(0.1 * n)))
    while n - n_train - n_val < 1:
        if n_train > 1:
            n_train -= 1
        else:
            n_val -= 1
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        validation=tuple(shuffled[n_train:n_train + n_val]),
        test=tuple(shuffled[n_train + n_val:]),
        seed=seed,
    )


def load_slide_dir(root) -> dict[str, tuple[SlidePyramid, dict]]:
    """Scan a directory of pyramid subdirectories with annotation files."""
    out: dict[str, tuple[SlidePyramid, dict]] = {}
    for sub in sorted(Path(root).iterdir()):
        if not (sub / "manifest.json").exists():
            continue
        pyramid = SlidePyramid.open(sub)
        ann_path = sub / "annotations.json"
        ann = load_annotations(ann_path) if ann_path.exists() else \
            {"points": [], "polygons": [], "mpp": pyramid.mpp}
        out[sub.name] = (pyramid, ann)
    if not out:
        raise FileNotFoundError(f"no slides under {root}")
    return out


def whole_slide_rois(slides: dict, ids: Sequence[str]) -> list[Roi]:
    rois = []
    for sid in ids:
        pyramid, ann = slides[sid]
        rois.append(Roi(slide=pyramid, rect=(0, 0, pyramid.width, pyramid.height),
                        points=ann["points"], polygons=ann["polygons"],
                        slide_id=sid, roi_id=f"{sid}/full"))
    return rois


@dataclass(frozen=True)
class PatchSpec:
    patch_px: int
    magnification: float
    kind: str                 # 'dt_cl' (two point maps) or 'seg' (area map)
    augment: bool = True

    def __post_init__(self):
        if self.kind not in ("dt_cl", "seg"):
            raise ValueError(f"unknown patch kind {self.kind!r}")
        if self.patch_px < 8:
            raise ValueError(f"patch_px too small: {self.patch_px}")


def render_targets(points: Sequence[dict], polygons, origin: tuple[int, int],
                   factor: float, shape: tuple[int, int], kind: str,
                   magnification: float) -> np.ndarray:
    """Target maps for a region read at `factor`, origin in level-0 coords."""
    ox, oy = origin
    if kind == "dt_cl":
        pts_all = [((p["x"] - ox) * factor, (p["y"] - oy) * factor) for p in points]
        pts_tum = [((p["x"] - ox) * factor, (p["y"] - oy) * factor)
                   for p in points if p["class"] == "tumor"]
        return np.stack([
            make_point_target(pts_all, shape, magnification=magnification),
            make_point_target(pts_tum, shape, magnification=magnification),
        ])
    polys = [[((vx - ox) * factor, (vy - oy) * factor) for vx, vy in poly]
             for poly in polygons]
    return make_area_target(polys, shape)[None]


def sample_patch(rois: Sequence[Roi], spec: PatchSpec, seed) -> tuple[np.ndarray, np.ndarray, dict]:
    """One training example: (image (3,P,P) float32 in [0,1], targets (K,P,P),
    info). Repeatable bit-for-bit for a fixed seed."""
    if not rois:
        raise ValueError("sample_patch needs a non-empty ROI pool")
    rng = np.random.default_rng(seed)
    roi = rois[int(rng.integers(len(rois)))]
    slide = roi.slide
    f = magnification_factor(slide.mpp, spec.magnification)
    span = int(round(spec.patch_px / f))
    rx, ry, rw, rh = roi.rect
    max_x = rx + rw - span
    max_y = ry + rh - span
    clamped = max_x < rx or max_y < ry
    if clamped:
        log.info("sample_patch: patch span %d exceeds ROI %s; clamping", span, roi.roi_id)
    x = int(rng.integers(rx, max_x + 1)) if max_x >= rx else rx
    y = int(rng.integers(ry, max_y + 1)) if max_y >= ry else ry
    x = min(max(0, x), max(0, slide.width - span))
    y = min(max(0, y), max(0, slide.height - span))
    img = slide.read_region(x, y, span, span, f).pixels
    if img.shape[0] != spec.patch_px or img.shape[1] != spec.patch_px:
        pad_h = max(0, spec.patch_px - img.shape[0])
        pad_w = max(0, spec.patch_px - img.shape[1])
        img = np.pad(img, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
        img = img[:spec.patch_px, :spec.patch_px]
    inside = [p for p in roi.points
              if x <= p["x"] < x + span and y <= p["y"] < y + span]
    targets = render_targets(inside, roi.polygons, (x, y), f,
                             (spec.patch_px, spec.patch_px), spec.kind,
                             spec.magnification)
    if spec.augment:
        params = AugmentParams.sample(rng)
        img, targets = apply_chain(img, targets, params)
    chw = np.moveaxis(img, 2, 0).astype(np.float32) / 255.0
    return chw, targets.astype(np.float32), {"roi_id": roi.roi_id, "origin": (x, y),
                                             "clamped": clamped}
