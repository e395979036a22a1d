"""Region similarity J, boundary accuracy F and their per-sequence statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

RECALL_THRESHOLD = 0.5
BOUNDARY_TOL_FRACTION = 0.008


def _check_pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def region_similarity(pred, gt) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    pred, gt = _check_pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary_map(mask) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (the image border counts as outside)."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def default_tolerance(shape) -> float:
    return max(1.0, BOUNDARY_TOL_FRACTION * math.hypot(shape[0], shape[1]))


def boundary_accuracy(pred, gt, tol: Optional[float] = None) -> float:
    """Boundary F-measure with a Euclidean distance tolerance in pixels."""
    pred, gt = _check_pair(pred, gt)
    if tol is None:
        tol = default_tolerance(pred.shape)
    bp, bg = boundary_map(pred), boundary_map(gt)
    if not bp.any() and not bg.any():
        return 1.0
    if not bp.any() or not bg.any():
        return 0.0
    dist_to_gt = distance_transform_edt(~bg)
    dist_to_pred = distance_transform_edt(~bp)
    precision = float((dist_to_gt[bp] <= tol).mean())
    recall = float((dist_to_pred[bg] <= tol).mean())
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class SeqStats:
    mean: float
    recall: float
    decay: float


def sequence_stats(values: Sequence[float], threshold: float = RECALL_THRESHOLD) -> SeqStats:
    """Mean, fraction above ``threshold``, and first-quarter minus last-quarter mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("sequence_stats: no values")
    q = max(1, v.size // 4)
    return SeqStats(mean=float(v.mean()), recall=float((v > threshold).mean()),
                    decay=float(v[:q].mean() - v[-q:].mean()))


@dataclass
class MetricReport:
    """Per-sequence J/F values and dataset-level Mean / Recall / Decay.

    Dataset statistics average the per-sequence statistics over sequences
    (sorted by name).
    """

    j_values: Dict[str, List[float]]
    f_values: Dict[str, List[float]]
    j_seq: Dict[str, SeqStats] = field(default_factory=dict)
    f_seq: Dict[str, SeqStats] = field(default_factory=dict)
    j: Optional[SeqStats] = None
    f: Optional[SeqStats] = None

    def rows(self):
        for name in sorted(self.j_seq):
            yield name, "J", self.j_seq[name]
            yield name, "F", self.f_seq[name]
        yield "ALL", "J", self.j
        yield "ALL", "F", self.f

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sequence", "metric", "mean", "recall", "decay"])
            for name, metric, st in self.rows():
                w.writerow([name, metric, repr(st.mean), repr(st.recall), repr(st.decay)])

    def table(self) -> str:
        lines = [
            f"{'':3}{'Measure':<10}{'Score':>8}",
            "-" * 21,
            f"{'J':<3}{'Mean':<10}{self.j.mean:8.3f}",
            f"{'':<3}{'Recall':<10}{self.j.recall:8.3f}",
            f"{'':<3}{'Decay':<10}{self.j.decay:8.3f}",
            "-" * 21,
            f"{'F':<3}{'Mean':<10}{self.f.mean:8.3f}",
            f"{'':<3}{'Recall':<10}{self.f.recall:8.3f}",
            f"{'':<3}{'Decay':<10}{self.f.decay:8.3f}",
        ]
        return "\n".join(lines) + "\n"


def _pool(stats: Sequence[SeqStats]) -> SeqStats:
    return SeqStats(mean=float(np.mean([s.mean for s in stats])),
                    recall=float(np.mean([s.recall for s in stats])),
                    decay=float(np.mean([s.decay for s in stats])))


def metric_stats(j_values: Mapping[str, Sequence[float]], f_values: Mapping[str, Sequence[float]],
                 threshold: float = RECALL_THRESHOLD) -> MetricReport:
    if not j_values:
        raise ValueError("metric_stats: no sequences")
    if set(j_values) != set(f_values):
        raise ValueError("metric_stats: J and F cover different sequences")
    names = sorted(j_values)
    rep = MetricReport(j_values={n: list(j_values[n]) for n in names},
                       f_values={n: list(f_values[n]) for n in names})
    rep.j_seq = {n: sequence_stats(j_values[n], threshold) for n in names}
    rep.f_seq = {n: sequence_stats(f_values[n], threshold) for n in names}
    rep.j = _pool([rep.j_seq[n] for n in names])
    rep.f = _pool([rep.f_seq[n] for n in names])
    return rep


def evaluate_masks(pred: Mapping[str, Sequence[np.ndarray]], gt: Mapping[str, Sequence[np.ndarray]],
                   tol: Optional[float] = None) -> MetricReport:
    """Score predicted mask sequences against ground truth, frame by frame."""
    jv, fv = {}, {}
    for name in sorted(gt):
        if name not in pred:
            raise KeyError(f"no prediction for sequence {name}")
        if len(pred[name]) != len(gt[name]):
            raise ValueError(f"sequence {name}: {len(pred[name])} predicted vs {len(gt[name])} ground-truth frames")
        jv[name] = [region_similarity(p, g) for p, g in zip(pred[name], gt[name])]
        fv[name] = [boundary_accuracy(p, g, tol) for p, g in zip(pred[name], gt[name])]
    return metric_stats(jv, fv)
