"""Detection/classification scoring: greedy matching at a micron radius,
the accuracy/precision/recall/F1 family, and the ratio error.

Detections are matched to labels closest-first within 3.2 µm; ties resolve
by (distance, detection index, label index) so matching is deterministic.
Empty-denominator metrics come back as 0.0 with an explicit flag, never NaN.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MATCH_RADIUS_UM = 3.2


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]]   # (detection idx, label idx, distance µm)
    unmatched_detections: list[int]       # FP
    unmatched_labels: list[int]           # FN

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_detections)

    @property
    def fn(self) -> int:
        return len(self.unmatched_labels)


def greedy_match(detections, labels, mpp: float,
                 radius_um: float = MATCH_RADIUS_UM) -> MatchResult:
    """Greedy closest-first matching of level-0 points within radius_um.

    Both inputs are (N, 2) arrays of level-0 pixel coordinates; mpp converts
    pixel distances to microns and must be known.
    """
    if mpp is None or mpp <= 0:
        raise ValueError(f"greedy_match requires a positive mpp, got {mpp}")
    det = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
    lab = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
    radius_px = radius_um / mpp
    candidates: list[tuple[float, int, int]] = []
    block = 2048
    for start in range(0, len(det), block):
        d = det[start:start + block]
        if not len(lab):
            break
        dist = np.sqrt(((d[:, None, :] - lab[None, :, :]) ** 2).sum(-1))
        di, li = np.nonzero(dist <= radius_px)
        for i, j in zip(di, li):
            candidates.append((dist[i, j], start + int(i), int(j)))
    candidates.sort()
    det_used = np.zeros(len(det), dtype=bool)
    lab_used = np.zeros(len(lab), dtype=bool)
    pairs = []
    for dist_px, i, j in candidates:
        if det_used[i] or lab_used[j]:
            continue
        det_used[i] = True
        lab_used[j] = True
        pairs.append((i, j, dist_px * mpp))
    return MatchResult(
        pairs=pairs,
        unmatched_detections=[i for i in range(len(det)) if not det_used[i]],
        unmatched_labels=[j for j in range(len(lab)) if not lab_used[j]],
    )


@dataclass
class DetectionMetrics:
    acc: float
    pre: float
    rec: float
    f1: float
    tp: int
    fp: int
    fn: int
    degenerate: bool = False  # some denominator was empty

    def to_json(self) -> dict:
        return {"acc": self.acc, "pre": self.pre, "rec": self.rec, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "fn": self.fn,
                "degenerate": self.degenerate}


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def detection_metrics(m: MatchResult) -> DetectionMetrics:
    """ACC = TP/(TP+FP+FN); PRE = TP/(TP+FP); REC = TP/(TP+FN); F1 = 2PR/(P+R)."""
    tp, fp, fn = m.tp, m.fp, m.fn
    acc, d1 = _ratio(tp, tp + fp + fn)
    pre, d2 = _ratio(tp, tp + fp)
    rec, d3 = _ratio(tp, tp + fn)
    f1, d4 = _ratio(2.0 * pre * rec, pre + rec)
    return DetectionMetrics(acc, pre, rec, f1, tp, fp, fn, d1 or d2 or d3 or d4)


@dataclass
class ClassificationMetrics:
    acc: float
    pre_pos: float
    rec_pos: float
    pre_neg: float
    rec_neg: float
    macro_p: float
    macro_r: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    degenerate: bool = False

    def to_json(self) -> dict:
        return {"acc": self.acc, "pre_pos": self.pre_pos, "rec_pos": self.rec_pos,
                "pre_neg": self.pre_neg, "rec_neg": self.rec_neg,
                "macro_p": self.macro_p, "macro_r": self.macro_r, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "degenerate": self.degenerate}


def classification_metrics(predicted: Sequence[str], true: Sequence[str]) -> ClassificationMetrics:
    """Tumor-positive convention over matched cells only.

    ACC = (TP+TN)/total; per-class precision/recall; P and R are two-class
    means; F1 = 2PR/(P+R).
    """
    if len(predicted) != len(true):
        raise ValueError(f"length mismatch: {len(predicted)} predictions vs {len(true)} labels")
    tp = sum(p == "tumor" and t == "tumor" for p, t in zip(predicted, true))
    fp = sum(p == "tumor" and t == "normal" for p, t in zip(predicted, true))
    tn = sum(p == "normal" and t == "normal" for p, t in zip(predicted, true))
    fn = sum(p == "normal" and t == "tumor" for p, t in zip(predicted, true))
    acc, d1 = _ratio(tp + tn, tp + tn + fp + fn)
    pre_pos, d2 = _ratio(tp, tp + fp)
    rec_pos, d3 = _ratio(tp, tp + fn)
    pre_neg, d4 = _ratio(tn, tn + fn)
    rec_neg, d5 = _ratio(tn, tn + fp)
    p = (pre_pos + pre_neg) / 2.0
    r = (rec_pos + rec_neg) / 2.0
    f1, d6 = _ratio(2.0 * p * r, p + r)
    return ClassificationMetrics(acc, pre_pos, rec_pos, pre_neg, rec_neg, p, r, f1,
                                 tp, fp, tn, fn, d1 or d2 or d3 or d4 or d5 or d6)


def tcr_error(predicted: Sequence[float], true: Sequence[float]) -> float:
    """Mean absolute error of the predicted ratio over ROIs."""
    if len(predicted) != len(true):
        raise ValueError(f"length mismatch: {len(predicted)} vs {len(true)}")
    if not predicted:
        return 0.0
    return float(np.mean(np.abs(np.asarray(predicted, dtype=np.float64) -
                                np.asarray(true, dtype=np.float64))))


@dataclass
class MetricReport:
    """Aggregate of everything an evaluation run reports."""

    detection: DetectionMetrics
    classification: ClassificationMetrics
    predicted_tcr: float
    true_tcr: float
    e_tcr: float

    def to_json(self) -> dict:
        return {"detection": self.detection.to_json(),
                "classification": self.classification.to_json(),
                "predicted_tcr": self.predicted_tcr,
                "true_tcr": self.true_tcr, "e_tcr": self.e_tcr}

    def to_csv(self) -> str:
        rows = ["metric,value"]
        payload = self.to_json()
        for group in ("detection", "classification"):
            for key, value in payload[group].items():
                rows.append(f"{group}_{key},{value}")
        for key in ("predicted_tcr", "true_tcr", "e_tcr"):
            rows.append(f"{key},{payload[key]}")
        return "\n".join(rows) + "\n"
