"""ROI evaluation, sequential threshold grid search, magnification sweep.

The grid search runs on the evaluation set (train ∪ validation): stage one
scans t_d maximizing the pooled detection F1 (ties break to the smaller
threshold), stage two fixes t_d and scans t_c minimizing the mean absolute
TCR error (ties to the smaller threshold). A joint 2-D scan exists as an
optional diagnostic only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .metrics import (MatchResult, MetricReport, classification_metrics,
                      detection_metrics, greedy_match, tcr_error)
from .model import UNet
from .postprocess import (CellRecord, Thresholds, bilinear_sample, classify,
                          compute_tcr, detect_peaks, sample_scores)
from .slide import SlidePyramid, magnification_factor
from .targets import make_point_target

SWEEP_FACTORS = (1.0, 0.8, 0.6, 0.5, 0.4, 0.3, 0.25, 0.2)


@dataclass
class EvalRoi:
    """Model maps plus ground truth for one region, ready for scoring."""

    map_d: np.ndarray
    map_c: np.ndarray
    map_s: Optional[np.ndarray]
    s_scale: float                      # map_s px per map_d px
    origin: tuple[int, int]             # level-0 (x, y) of the maps' region
    factor: float                       # map_d px per level-0 px
    labels: list[dict]                  # [{x, y, class}] level-0
    mpp: float


def make_eval_roi(slide: SlidePyramid, rect: tuple[int, int, int, int],
                  labels: Sequence[dict], det_model: UNet, det_mag: float,
                  seg_model: Optional[UNet] = None,
                  seg_mag: Optional[float] = None) -> EvalRoi:
    x, y, w, h = rect
    f_d = magnification_factor(slide.mpp, det_mag)
    img = slide.read_region(x, y, w, h, f_d).pixels
    maps = det_model.forward_maps(np.moveaxis(img, 2, 0).astype(np.float32) / 255.0)
    map_s, s_scale = None, 1.0
    if seg_model is not None:
        f_s = magnification_factor(slide.mpp, seg_mag)
        simg = slide.read_region(x, y, w, h, f_s).pixels
        map_s = seg_model.forward_maps(np.moveaxis(simg, 2, 0).astype(np.float32) / 255.0)[0]
        s_scale = f_s / f_d
    inside = [p for p in labels if x <= p["x"] < x + w and y <= p["y"] < y + h]
    return EvalRoi(map_d=maps[0], map_c=maps[1], map_s=map_s, s_scale=s_scale,
                   origin=(x, y), factor=f_d, labels=inside, mpp=slide.mpp)


def roi_cells(roi: EvalRoi, t_d: float) -> list[CellRecord]:
    """Detected cells with features, in level-0 coordinates, unclassified."""
    peaks = detect_peaks(roi.map_d, t_d)
    samples = sample_scores(peaks, roi.map_c, roi.map_s, roi.s_scale)
    ox, oy = roi.origin
    cells = []
    for p, (i_d, i_c, i_s) in zip(peaks, samples.features):
        cells.append(CellRecord(
            x=ox + int(round(p.x / roi.factor)),
            y=oy + int(round(p.y / roi.factor)),
            i_d=i_d, i_c=i_c, i_s=i_s,
        ))
    return cells


def _match_roi(roi: EvalRoi, cells: Sequence[CellRecord]) -> MatchResult:
    det = np.array([[c.x, c.y] for c in cells], dtype=np.float64).reshape(-1, 2)
    lab = np.array([[p["x"], p["y"]] for p in roi.labels], dtype=np.float64).reshape(-1, 2)
    return greedy_match(det, lab, mpp=roi.mpp)


def evaluate_rois(rois: Sequence[EvalRoi], thresholds: Thresholds) -> MetricReport:
    """Micro-pooled detection/classification metrics plus the mean TCR error."""
    tp = fp = fn = 0
    pred_cls: list[str] = []
    true_cls: list[str] = []
    pred_ratios: list[float] = []
    true_ratios: list[float] = []
    all_cells = 0
    all_tumor = 0
    lab_total = lab_tumor = 0
    for roi in rois:
        cells = classify(roi_cells(roi, thresholds.t_d), thresholds)
        match = _match_roi(roi, cells)
        tp += match.tp
        fp += match.fp
        fn += match.fn
        for di, li, _ in match.pairs:
            pred_cls.append(cells[di].cls)
            true_cls.append(roi.labels[li]["class"])
        ratio = compute_tcr(cells)
        pred_ratios.append(ratio.value)
        n_lab = len(roi.labels)
        n_lab_t = sum(p["class"] == "tumor" for p in roi.labels)
        true_ratios.append(n_lab_t / n_lab if n_lab else 0.0)
        all_cells += len(cells)
        all_tumor += sum(c.cls == "tumor" for c in cells)
        lab_total += n_lab
        lab_tumor += n_lab_t
    det = detection_metrics(MatchResult([(0, 0, 0.0)] * tp, [0] * fp, [0] * fn))
    cls = classification_metrics(pred_cls, true_cls)
    return MetricReport(
        detection=det, classification=cls,
        predicted_tcr=(all_tumor / all_cells if all_cells else 0.0),
        true_tcr=(lab_tumor / lab_total if lab_total else 0.0),
        e_tcr=tcr_error(pred_ratios, true_ratios),
    )


def threshold_grid(step: float = 0.05) -> np.ndarray:
    """Interior grid {step, 2·step, ...} < 1, rounded to the step's precision."""
    if not (0.0 < step < 1.0):
        raise ValueError(f"grid step must be in (0,1), got {step}")
    n = int(round(1.0 / step)) - 1
    return np.round(np.arange(1, n + 1) * step, 10)


@dataclass
class TuneResult:
    thresholds: Thresholds
    detection_f1: float
    e_tcr: float
    f1_by_t_d: list[tuple[float, float]] = field(default_factory=list)
    etcr_by_t_c: list[tuple[float, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"t_d": self.thresholds.t_d, "t_c": self.thresholds.t_c,
                "alpha": self.thresholds.alpha, "detection_f1": self.detection_f1,
                "e_tcr": self.e_tcr,
                "f1_by_t_d": self.f1_by_t_d, "etcr_by_t_c": self.etcr_by_t_c}


def tune_thresholds(rois: Sequence[EvalRoi], grid_step: float = 0.05,
                    alpha: float = 0.5, joint: bool = False) -> TuneResult:
    """Sequential grid search; `joint=True` runs the 2-D diagnostic scan
    (minimizing E_TCR for both thresholds at once) instead."""
    if not rois:
        raise ValueError("tune_thresholds needs a non-empty evaluation set")
    grid = threshold_grid(grid_step)

    # all peaks once; thresholding is a filter over peak intensity
    base: list[tuple[np.ndarray, np.ndarray, list]] = []
    for roi in rois:
        cells = roi_cells(roi, 0.0)
        classify(cells, Thresholds(0.0, 0.5, alpha))  # fill fused scores
        i_d = np.array([c.i_d for c in cells])
        scores = np.array([c.score for c in cells])
        base.append((i_d, scores, cells))
    true_ratios = []
    for roi in rois:
        n = len(roi.labels)
        t = sum(p["class"] == "tumor" for p in roi.labels)
        true_ratios.append(t / n if n else 0.0)

    def detection_f1_at(t_d: float) -> float:
        tp = fp = fn = 0
        for roi, (i_d, _, cells) in zip(rois, base):
            kept = [c for c, v in zip(cells, i_d) if v >= t_d]
            m = _match_roi(roi, kept)
            tp += m.tp
            fp += m.fp
            fn += m.fn
        pre = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        return 2 * pre * rec / (pre + rec) if pre + rec else 0.0

    def etcr_at(t_d: float, t_c: float) -> float:
        preds = []
        for i_d, scores, _ in base:
            kept = scores[i_d >= t_d]
            preds.append(float((kept > t_c).mean()) if len(kept) else 0.0)
        return tcr_error(preds, true_ratios)

    if joint:
        best = None
        for t_d in grid:
            for t_c in grid:
                e = etcr_at(t_d, t_c)
                if best is None or e < best[0] - 1e-15:
                    best = (e, t_d, t_c)
        e, t_d, t_c = best
        return TuneResult(Thresholds(float(t_d), float(t_c), alpha),
                          detection_f1_at(t_d), e)

    f1_table = [(float(t), detection_f1_at(float(t))) for t in grid]
    best_t_d, best_f1 = f1_table[0]
    for t, f1 in f1_table[1:]:
        if f1 > best_f1 + 1e-15:
            best_t_d, best_f1 = t, f1
    etcr_table = [(float(t), etcr_at(best_t_d, float(t))) for t in grid]
    best_t_c, best_e = etcr_table[0]
    for t, e in etcr_table[1:]:
        if e < best_e - 1e-15:
            best_t_c, best_e = t, e
    return TuneResult(Thresholds(best_t_d, best_t_c, alpha), best_f1, best_e,
                      f1_by_t_d=f1_table, etcr_by_t_c=etcr_table)


# --------------------------------------------------------------- mag sweep

@dataclass
class SweepRoi:
    """Ground truth plus a pixel source for one swept region."""

    slide: SlidePyramid
    rect: tuple[int, int, int, int]
    labels: list[dict]


#: A sweep model turns (roi, resize factor) into (map_d, map_c).
SweepMaps = Callable[[SweepRoi, float], tuple[np.ndarray, np.ndarray]]


def unet_sweep_model(model: UNet) -> SweepMaps:
    def maps(roi: SweepRoi, factor: float):
        x, y, w, h = roi.rect
        img = roi.slide.read_region(x, y, w, h, factor).pixels
        out = model.forward_maps(np.moveaxis(img, 2, 0).astype(np.float32) / 255.0)
        return out[0], out[1] if len(out) > 1 else out[0]
    return maps


def oracle_sweep_model(sigma_floor: Optional[float] = None) -> SweepMaps:
    """Perfect-model stand-in: maps rendered straight from the ground truth.

    With the default magnification-scaled peak width, coarse factors lose
    sub-pixel peaks exactly the way a downsampled detector would. A
    sigma_floor widens the peaks so score reads at true positions stay
    reliable at every factor (the "perfect map" the cls sweep wants).
    """
    def maps(roi: SweepRoi, factor: float):
        x, y, w, h = roi.rect
        shape = (max(1, int(round(h * factor))), max(1, int(round(w * factor))))
        mag = 40.0 * factor / (4.4 * roi.slide.mpp)  # effective magnification
        sigma = None
        if sigma_floor is not None:
            from .targets import peak_sigma
            sigma = max(peak_sigma(mag), sigma_floor)
        pts_all = [((p["x"] - x) * factor, (p["y"] - y) * factor) for p in roi.labels]
        pts_tum = [((p["x"] - x) * factor, (p["y"] - y) * factor)
                   for p in roi.labels if p["class"] == "tumor"]
        return (make_point_target(pts_all, shape, magnification=mag, sigma=sigma),
                make_point_target(pts_tum, shape, magnification=mag, sigma=sigma))
    return maps


@dataclass
class SweepPoint:
    factor: float
    f1: float
    skipped: bool = False


def magnification_sweep(models: Mapping[float, Optional[SweepMaps]],
                        rois: Sequence[SweepRoi], mode: str,
                        thresholds: Thresholds,
                        factors: Sequence[float] = SWEEP_FACTORS) -> list[SweepPoint]:
    """F1 vs resize factor (1.0 ≡ 40X) for detection, classification on
    ground-truth positions, or both chained. Factors without a model are
    skipped and flagged."""
    if mode not in ("det", "cls", "det+cls"):
        raise ValueError(f"unknown sweep mode {mode!r}")
    points: list[SweepPoint] = []
    for factor in factors:
        provider = models.get(factor)
        if provider is None:
            points.append(SweepPoint(factor, 0.0, skipped=True))
            continue
        tp = fp = fn = 0
        pred: list[str] = []
        true: list[str] = []
        for roi in rois:
            map_d, map_c = provider(roi, factor)
            x, y, w, h = roi.rect
            if mode == "cls":
                for p in roi.labels:
                    v, _ = bilinear_sample(map_c, (p["x"] - x) * factor, (p["y"] - y) * factor)
                    pred.append("tumor" if v > thresholds.t_c else "normal")
                    true.append(p["class"])
                continue
            peaks = detect_peaks(map_d, thresholds.t_d)
            det = np.array([[x + px / factor, y + py / factor] for px, py, _ in peaks],
                           dtype=np.float64).reshape(-1, 2)
            lab = np.array([[p["x"], p["y"]] for p in roi.labels],
                           dtype=np.float64).reshape(-1, 2)
            m = greedy_match(det, lab, mpp=roi.slide.mpp)
            if mode == "det":
                tp += m.tp
                fp += m.fp
                fn += m.fn
            else:  # det+cls over matched cells
                for di, li, _ in m.pairs:
                    v = float(map_c[peaks[di].y, peaks[di].x])
                    pred.append("tumor" if v > thresholds.t_c else "normal")
                    true.append(roi.labels[li]["class"])
        if mode == "det":
            pre = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * pre * rec / (pre + rec) if pre + rec else 0.0
        else:
            f1 = classification_metrics(pred, true).f1
        points.append(SweepPoint(factor, f1))
    return points


def sweep_csv(points: Sequence[SweepPoint]) -> str:
    lines = ["factor,f1,skipped"]
    for p in points:
        lines.append(f"{p.factor},{p.f1:.6f},{int(p.skipped)}")
    return "\n".join(lines) + "\n"
