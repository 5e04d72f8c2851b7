"""Confusion counts, threshold sweeps, ROC/AUC and best-threshold selection.

Detection is positive when a score is strictly greater than the threshold, the
same rule the verification policy applies to IoU.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd

from .errors import EmptyInput, LengthMismatch, TooFewPoints, UndefinedRate

__all__ = [
    "ConfusionCounts",
    "Rates",
    "RocPoint",
    "RocCurve",
    "EvaluationReport",
    "confusion",
    "rates",
    "lenient_rates",
    "default_grid",
    "sweep",
    "auc",
    "best_threshold",
    "build_report",
    "latency_summary",
]

GRID_SIZE = 1001


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.fp + self.tn

    @property
    def total(self) -> int:
        return self.positives + self.negatives

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fn": self.fn, "fp": self.fp, "tn": self.tn}


class Rates(NamedTuple):
    ppv: float
    tpr: float
    fpr: float
    acc: float


class RocPoint(NamedTuple):
    threshold: float
    fpr: float
    tpr: float
    acc: float


def _validate(scores: Sequence[float] | np.ndarray, truths: Sequence[bool] | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.bool_).ravel()
    if len(s) != len(t):
        raise LengthMismatch(f"{len(s)} scores but {len(t)} truths")
    if len(s) == 0:
        raise EmptyInput("no scores to evaluate")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    return s, t


def confusion(scores: Sequence[float], truths: Sequence[bool], threshold: float) -> ConfusionCounts:
    s, t = _validate(scores, truths)
    detected = s > threshold
    return ConfusionCounts(
        tp=int(np.count_nonzero(detected & t)),
        fn=int(np.count_nonzero(~detected & t)),
        fp=int(np.count_nonzero(detected & ~t)),
        tn=int(np.count_nonzero(~detected & ~t)),
    )


def rates(c: ConfusionCounts) -> Rates:
    if c.tp + c.fp == 0:
        raise UndefinedRate("ppv")
    if c.positives == 0:
        raise UndefinedRate("tpr")
    if c.negatives == 0:
        raise UndefinedRate("fpr")
    if c.total == 0:
        raise UndefinedRate("acc")
    return Rates(
        ppv=c.tp / (c.tp + c.fp),
        tpr=c.tp / c.positives,
        fpr=c.fp / c.negatives,
        acc=(c.tp + c.tn) / c.total,
    )


def _ratio(num: int, den: int) -> float:
    return num / den if den else math.nan


def lenient_rates(c: ConfusionCounts) -> Rates:
    """Like :func:`rates` but NaN for an undefined rate, for reporting."""

    return Rates(
        ppv=_ratio(c.tp, c.tp + c.fp),
        tpr=_ratio(c.tp, c.positives),
        fpr=_ratio(c.fp, c.negatives),
        acc=_ratio(c.tp + c.tn, c.total),
    )


@dataclass(frozen=True)
class RocCurve:
    """Sweep results, one row per threshold in ascending order."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    acc: np.ndarray

    def __len__(self) -> int:
        return len(self.thresholds)

    @property
    def points(self) -> list[RocPoint]:
        return [
            RocPoint(float(th), float(f), float(t), float(a))
            for th, f, t, a in zip(self.thresholds, self.fpr, self.tpr, self.acc)
        ]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"threshold": self.thresholds, "fpr": self.fpr, "tpr": self.tpr, "acc": self.acc})


def default_grid(scores: Sequence[float] | np.ndarray) -> np.ndarray:
    """1001 thresholds spanning the finite scores with an epsilon margin, plus every midpoint.

    The midpoints put a threshold between each pair of adjacent distinct
    scores, which makes the trapezoidal AUC equal the pairwise ranking AUC.
    """

    s = np.asarray(scores, dtype=np.float64)
    finite = np.unique(s[np.isfinite(s)])
    if len(finite) == 0:
        return np.array([0.0])
    lo, hi = float(finite[0]), float(finite[-1])
    eps = 1e-6 * max(1.0, hi - lo)
    grid = np.linspace(lo - eps, hi + eps, GRID_SIZE)
    midpoints = (finite[:-1] + finite[1:]) / 2.0
    return np.union1d(grid, midpoints)


def sweep(
    scores: Sequence[float], truths: Sequence[bool], grid: Sequence[float] | np.ndarray | None = None
) -> RocCurve:
    s, t = _validate(scores, truths)
    thresholds = default_grid(s) if grid is None else np.asarray(grid, dtype=np.float64).ravel()
    if len(thresholds) == 0:
        raise EmptyInput("threshold grid is empty")
    if (np.diff(thresholds) < 0).any():
        raise ValueError("threshold grid must be sorted ascending")
    positives = np.sort(s[t])
    negatives = np.sort(s[~t])
    if len(positives) == 0:
        raise UndefinedRate("tpr")
    if len(negatives) == 0:
        raise UndefinedRate("fpr")
    tp = len(positives) - np.searchsorted(positives, thresholds, side="right")
    fp = len(negatives) - np.searchsorted(negatives, thresholds, side="right")
    tn = len(negatives) - fp
    return RocCurve(
        thresholds=thresholds,
        fpr=fp / len(negatives),
        tpr=tp / len(positives),
        acc=(tp + tn) / len(s),
    )


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the ROC with (0, 0) and (1, 1) appended."""

    if len(curve) < 2:
        raise TooFewPoints(f"an ROC curve needs at least 2 points, got {len(curve)}")
    fpr = np.concatenate([[0.0], curve.fpr, [1.0]])
    tpr = np.concatenate([[0.0], curve.tpr, [1.0]])
    order = np.lexsort((tpr, fpr))
    return float(np.trapezoid(tpr[order], fpr[order]))


def best_threshold(curve: RocCurve) -> tuple[float, float]:
    """The threshold with the highest accuracy; the smallest one wins ties."""

    if len(curve) == 0:
        raise EmptyInput("empty ROC curve")
    index = int(np.argmax(curve.acc))
    return float(curve.thresholds[index]), float(curve.acc[index])


@dataclass
class EvaluationReport:
    method: str
    threshold: float
    counts: ConfusionCounts
    ppv: float
    tpr: float
    fpr: float
    acc: float
    auc: float
    best_threshold: float
    best_acc: float
    curve: RocCurve
    records: list[dict] = field(default_factory=list)
    latency_ms: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "threshold": self.threshold,
            "counts": self.counts.to_dict(),
            "ppv": self.ppv,
            "tpr": self.tpr,
            "fpr": self.fpr,
            "acc": self.acc,
            "auc": self.auc,
            "best_threshold": self.best_threshold,
            "best_acc": self.best_acc,
            "samples": len(self.records),
            "latency_ms": self.latency_ms,
        }

    def write(self, out_dir: str, stem: str = "report") -> list[str]:
        """Write `<stem>.json`, `<stem>_roc.csv` and `<stem>_samples.csv`.

        Non-finite numbers (a PSNR of identical frames, an undefined rate)
        are written as `null` in the JSON; the CSVs keep them as `inf` or `nan`.
        """

        os.makedirs(out_dir, exist_ok=True)
        json_path = os.path.join(out_dir, f"{stem}.json")
        with open(json_path, "w") as f:
            document = _finite({**self.summary(), "records": self.records})
            json.dump(document, f, indent=2, allow_nan=False, default=_json_default)
        roc_path = os.path.join(out_dir, f"{stem}_roc.csv")
        self.curve.to_frame().to_csv(roc_path, index=False)
        samples_path = os.path.join(out_dir, f"{stem}_samples.csv")
        pd.DataFrame(self.records).to_csv(samples_path, index=False)
        return [json_path, roc_path, samples_path]


def _json_default(value: object) -> object:
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not JSON serialisable")


def _finite(value: object) -> object:
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def latency_summary(values: Sequence[float]) -> dict[str, float]:
    """Mean, median and 95th percentile of per-sample latencies, in ms."""

    if len(values) == 0:
        raise EmptyInput("no latencies to summarise")
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "p50": float(np.median(v)), "p95": float(np.percentile(v, 95))}


def build_report(
    method: str,
    scores: Sequence[float],
    truths: Sequence[bool],
    *,
    threshold: float | None = None,
    grid: Sequence[float] | None = None,
    records: list[dict] | None = None,
    latencies: Sequence[float] | None = None,
) -> EvaluationReport:
    """Sweep, pick the best threshold and tally counts at `threshold` (the best one if None)."""

    curve = sweep(scores, truths, grid)
    best, best_acc = best_threshold(curve)
    applied = best if threshold is None else threshold
    counts = confusion(scores, truths, applied)
    r = lenient_rates(counts)
    return EvaluationReport(
        method=method,
        threshold=applied,
        counts=counts,
        ppv=r.ppv,
        tpr=r.tpr,
        fpr=r.fpr,
        acc=r.acc,
        auc=auc(curve),
        best_threshold=best,
        best_acc=best_acc,
        curve=curve,
        records=records if records is not None else [],
        latency_ms=latency_summary(latencies) if latencies else {},
    )
