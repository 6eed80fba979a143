"""Edit distance, recognition similarity, confusion metrics and threshold selection."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CRITERIA = ("f1", "cost")
COST_FN_LIMIT = 60.0


def levenshtein(a: str, b: str) -> int:
    """Minimal number of single-character insertions, deletions and substitutions."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def recognition_similarity(t_hat: str, t: str) -> float:
    """``1 - Lev / max length``; two empty strings count as identical."""
    longest = max(len(t_hat), len(t))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(t_hat, t) / longest


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: int
    meta: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if not math.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score!r}")


@dataclass
class EvalReport:
    tau: float
    tp: int
    fp: int
    tn: int
    fn: int
    tp_rate: float | None
    fp_rate: float | None
    tn_rate: float | None
    fn_rate: float | None
    f1: float | None
    breakdown: dict[str, "EvalReport"] = field(default_factory=dict)
    throughput: float | None = None

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return self.tp, self.fp, self.tn, self.fn

    def summary_row(self) -> dict[str, float | None]:
        return {
            "tau": self.tau,
            "TP": self.tp_rate,
            "FP": self.fp_rate,
            "TN": self.tn_rate,
            "FN": self.fn_rate,
            "F1": None if self.f1 is None else 100.0 * self.f1,
        }


def f1_from_counts(tp: float, fp: float, fn: float) -> float | None:
    """F1 from (possibly fractional) counts; ``None`` when undefined."""
    if tp + fp == 0 or tp + fn == 0:
        return None if tp + fn == 0 else 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1_from_rates(tp_rate: float, fp_rate: float, tn_rate: float, fn_rate: float) -> float | None:
    """F1 from per-class percentages of a balanced set.

    On a balanced set class rates are proportional to counts, so they can
    be fed to the count formula directly.
    """
    return f1_from_counts(tp_rate, fp_rate, fn_rate)


def _pct(num: int, den: int) -> float | None:
    return None if den == 0 else 100.0 * num / den


def _counts(scores: np.ndarray, labels: np.ndarray, tau: float) -> tuple[int, int, int, int]:
    pred = scores >= tau
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    return tp, fp, tn, fn


def _report(scores: np.ndarray, labels: np.ndarray, tau: float) -> EvalReport:
    tp, fp, tn, fn = _counts(scores, labels, tau)
    return EvalReport(
        tau=tau,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        tp_rate=_pct(tp, tp + fn),
        fp_rate=_pct(fp, fp + tn),
        tn_rate=_pct(tn, fp + tn),
        fn_rate=_pct(fn, tp + fn),
        f1=f1_from_counts(tp, fp, fn),
    )


def _arrays(scored: Sequence[ScoredSample]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([s.score for s in scored], dtype=np.float64)
    labels = np.array([s.label for s in scored], dtype=np.int64)
    return scores, labels


def confusion_metrics(scored: Sequence[ScoredSample], tau: float, breakdown_keys: Iterable[str] = ()) -> EvalReport:
    """Confusion counts and class rates at threshold ``tau`` (``score >= tau`` accepts).

    Rates of a class that is absent are ``None``. For each meta key in
    ``breakdown_keys`` a sub-report per observed value is attached.
    """
    scores, labels = _arrays(scored)
    report = _report(scores, labels, tau)
    for key in breakdown_keys:
        values = sorted({str(s.meta.get(key)) for s in scored if key in s.meta})
        for value in values:
            keep = np.array([str(s.meta.get(key)) == value for s in scored])
            report.breakdown[f"{key}={value}"] = _report(scores[keep], labels[keep], tau)
    return report


def candidate_thresholds(scores: Sequence[float]) -> list[float]:
    """Midpoints between adjacent distinct scores, plus both infinities."""
    distinct = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return [-math.inf, *mids.tolist(), math.inf]


def _sweep_counts(scores: np.ndarray, labels: np.ndarray, cuts: np.ndarray):
    """Confusion counts at every cut, vectorised via sorted cumulative sums."""
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    pos = (labels[order] == 1).astype(np.int64)
    n_pos = int(pos.sum())
    n_neg = len(s) - n_pos
    below = np.searchsorted(s, cuts, side="left")  # samples with score < cut
    cum_pos = np.concatenate([[0], np.cumsum(pos)])
    fn = cum_pos[below]
    tn = below - fn
    tp = n_pos - fn
    fp = n_neg - tn
    return tp, fp, tn, fn


def select_threshold(scored: Sequence[ScoredSample], criterion: str = "f1") -> float:
    """Pick the decision threshold on labelled scores.

    ``f1`` maximises F1. ``cost`` minimises ``10*FP% + FN%`` subject to
    ``FN% <= 60``; when no cut satisfies the constraint the minimum-FN cut
    is returned with a warning. Ties resolve to the smallest threshold.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    scores, labels = _arrays(scored)
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("threshold selection needs both positive and negative samples")
    cuts = np.array(candidate_thresholds(scores))
    tp, fp, tn, fn = _sweep_counts(scores, labels, cuts)
    if criterion == "f1":
        denom = 2 * tp + fp + fn
        f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
        return float(cuts[int(np.argmax(f1))])
    fp_rate = 100.0 * fp / n_neg
    fn_rate = 100.0 * fn / n_pos
    cost = 10.0 * fp_rate + fn_rate
    feasible = fn_rate <= COST_FN_LIMIT
    if not feasible.any():
        warnings.warn("no threshold keeps FN <= 60%; using the minimum-FN threshold", RuntimeWarning, stacklevel=2)
        return float(cuts[int(np.argmin(fn_rate))])
    cost = np.where(feasible, cost, np.inf)
    return float(cuts[int(np.argmin(cost))])
