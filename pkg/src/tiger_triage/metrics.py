"""Confusion counts, precision/recall/F1 and fold-level confidence intervals."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

from scipy import stats as sps

from .errors import LengthMismatch, TooFewValues

Z_95 = 1.96
TABLE2_COLUMNS = ("architecture", "n", "tp", "tn", "fp", "fn", "precision", "recall", "f1")


def _is_positive(v) -> bool:
    if isinstance(v, str):
        v = v.lower()
        if v not in ("tiger", "non_tiger"):
            raise ValueError(f"unknown class {v!r}")
        return v == "tiger"
    if hasattr(v, "value") and isinstance(v.value, str):
        return _is_positive(v.value)
    if int(v) not in (0, 1):
        raise ValueError(f"unknown class {v!r}")
    return int(v) == 1


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


def confusion(preds: Sequence, labels: Sequence) -> ConfusionCounts:
    """Tally predictions against labels; tiger (or 1) is the positive class."""
    if len(preds) != len(labels):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(labels)} labels")
    tp = tn = fp = fn = 0
    for p, y in zip(preds, labels):
        p, y = _is_positive(p), _is_positive(y)
        if p and y:
            tp += 1
        elif p:
            fp += 1
        elif y:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, tn, fp, fn)


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    mean_loss: float | None = None
    ci_halfwidth: float | None = None
    source: str | None = None  # e.g. "pooled_cv" or "single_split"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n"] = self.counts.total
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = {k: v for k, v in d.items() if k != "n"}
        d["counts"] = ConfusionCounts(**d["counts"])
        return cls(**d)

    def table2_row(self, architecture: str) -> dict:
        c = self.counts
        return {"architecture": architecture, "n": c.total, "tp": c.tp, "tn": c.tn, "fp": c.fp,
                "fn": c.fn, "precision": self.precision, "recall": self.recall, "f1": self.f1}

    def to_table2_csv(self, architecture: str, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=TABLE2_COLUMNS, lineterminator="\n")
        if header:
            writer.writeheader()
        row = self.table2_row(architecture)
        writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
        return buf.getvalue()


def eq4_metrics(counts: ConfusionCounts, mean_loss: float | None = None) -> MetricsReport:
    """Accuracy, precision, recall and F1. Any 0/0 ratio is reported as ``None``."""
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    if precision is None or recall is None:
        f1 = None
    else:
        f1 = _ratio(2 * precision * recall, precision + recall)
    accuracy = _ratio(counts.tp + counts.tn, counts.total)
    return MetricsReport(counts, accuracy, precision, recall, f1, mean_loss)


def ci95(values: Sequence[float], sizes: Sequence[int], t_dist: bool = False):
    """Size-weighted mean and 95% half-width ``crit * s / sqrt(k)``.

    ``s`` is the unweighted sample standard deviation of ``values``; ``crit``
    is 1.96, or the Student-t quantile with k-1 degrees of freedom.
    """
    if len(values) != len(sizes):
        raise LengthMismatch(f"{len(values)} values vs {len(sizes)} sizes")
    k = len(values)
    if k < 2:
        raise TooFewValues("at least two values are needed for a confidence interval")
    total = sum(sizes)
    weighted = sum(v * n for v, n in zip(values, sizes)) / total
    mean = sum(values) / k
    s = math.sqrt(sum((v - mean) ** 2 for v in values) / (k - 1))
    crit = float(sps.t.ppf(0.975, k - 1)) if t_dist else Z_95
    return weighted, crit * s / math.sqrt(k)
