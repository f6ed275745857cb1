"""Segment-level binary metrics: sensitivity, specificity, weighted F1, AUROC, AUPRC.

Undefined quantities (e.g. specificity without negatives) are reported as
NaN and named in ``MetricsReport.flags`` rather than silently set to 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

METRIC_KEYS = ("sens", "spec", "f1_weighted", "auroc", "auprc")
COUNT_KEYS = ("tp", "fn", "fp", "tn")


def confusion_at_threshold(scores, labels, thr: float = 0.5) -> Tuple[int, int, int, int]:
    """(tp, fn, fp, tn) predicting AF iff score >= thr."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.size == 0:
        raise ValueError("confusion_at_threshold: empty set")
    pred = s >= thr
    tp = int((pred & y).sum())
    fn = int((~pred & y).sum())
    fp = int((pred & ~y).sum())
    tn = int((~pred & ~y).sum())
    return tp, fn, fp, tn


def sens_spec(tp: int, fn: int, fp: int, tn: int) -> Tuple[float, float]:
    sens = tp / (tp + fn) if tp + fn else math.nan
    spec = tn / (tn + fp) if tn + fp else math.nan
    return sens, spec


def weighted_f1(tp: int, fn: int, fp: int, tn: int) -> float:
    """Support-weighted mean of the positive- and negative-class F1 scores."""
    pos, neg = tp + fn, tn + fp
    if pos == 0 or neg == 0:
        return math.nan
    f1_pos = 2 * tp / (2 * tp + fp + fn)
    f1_neg = 2 * tn / (2 * tn + fn + fp)
    return (pos * f1_pos + neg * f1_neg) / (pos + neg)


def _tied_groups(scores: np.ndarray, labels: np.ndarray):
    """Cumulative (tp, fp) at each distinct score, scanning from the highest."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    return tps.astype(np.float64), fps.astype(np.float64)


def auroc(scores, labels) -> float:
    """Trapezoidal area under the tie-aware ROC curve (equals the Mann-Whitney statistic)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    tps, fps = _tied_groups(s, y)
    tpr = np.r_[0.0, tps] / n_pos
    fpr = np.r_[0.0, fps] / n_neg
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def auprc(scores, labels) -> float:
    """Average precision: sum over score thresholds of precision x recall increment."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    n_pos = int(y.sum())
    if n_pos == 0:
        return math.nan
    tps, fps = _tied_groups(s, y)
    precision = tps / (tps + fps)
    d_recall = np.diff(np.r_[0.0, tps]) / n_pos
    return float(np.sum(precision * d_recall))


@dataclass
class MetricsReport:
    tp: int
    fn: int
    fp: int
    tn: int
    sens: float
    spec: float
    f1_weighted: float
    auroc: float
    auprc: float
    flags: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        d = {k: getattr(self, k) for k in COUNT_KEYS + METRIC_KEYS}
        # NaN is not valid JSON; undefined metrics become null and are listed in flags
        for k in METRIC_KEYS:
            if isinstance(d[k], float) and math.isnan(d[k]):
                d[k] = None
        d["flags"] = list(self.flags)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def evaluate_scores(scores, labels, thr: float = 0.5, subject_ids: Optional[Sequence[str]] = None,
                    mode: str = "segment") -> MetricsReport:
    """Compute all five metrics; ``mode='subject'`` first collapses segments per subject
    (mean score, majority label)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    if mode == "subject":
        if subject_ids is None:
            raise ValueError("subject mode needs subject_ids")
        ids = np.asarray(subject_ids)
        uniq = sorted(set(ids.tolist()))
        s = np.array([s[ids == u].mean() for u in uniq])
        y = np.array([int(round(y[ids == u].mean() + 1e-9)) for u in uniq])
    elif mode != "segment":
        raise ValueError(f"unknown mode {mode!r}")
    tp, fn, fp, tn = confusion_at_threshold(s, y, thr)
    sens, spec = sens_spec(tp, fn, fp, tn)
    rep = MetricsReport(tp, fn, fp, tn, sens, spec, weighted_f1(tp, fn, fp, tn), auroc(s, y), auprc(s, y))
    rep.flags = [k for k in METRIC_KEYS if math.isnan(getattr(rep, k))]
    return rep


def aggregate_splits(reports: Sequence[MetricsReport]) -> Dict:
    """Mean and standard deviation of each ratio metric across splits (counts are not averaged)."""
    if not reports:
        raise ValueError("aggregate_splits: no reports")
    out: Dict = {"n_splits": len(reports), "mean": {}, "std": {}}
    for k in METRIC_KEYS:
        vals = np.array([getattr(r, k) for r in reports], dtype=np.float64)
        ok = vals[~np.isnan(vals)]
        out["mean"][k] = float(ok.mean()) if ok.size else None
        out["std"][k] = float(ok.std()) if ok.size else None
        if ok.size < vals.size:
            out.setdefault("flags", []).append(f"{k}: {vals.size - ok.size} undefined split(s) excluded")
    return out
