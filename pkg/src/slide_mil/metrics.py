"""Slide-level evaluation metrics and fold aggregation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ContractError, Label, SlideMilError

DEFAULT_THRESHOLD = 0.5
METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "mcc", "auc")


class UndefinedMetricError(SlideMilError):
    """AUC needs both classes present."""


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


@dataclass(frozen=True)
class RocCurve:
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    thresholds: tuple[float, ...]  # first entry is +inf

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr, self.tpr))


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    mcc: float
    auc: float
    confusion: ConfusionMatrix
    n_pos: int
    n_neg: int
    threshold: float = DEFAULT_THRESHOLD
    roc: Optional[RocCurve] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in METRIC_NAMES}
        out.update(confusion=self.confusion.to_dict(), n_pos=self.n_pos, n_neg=self.n_neg, threshold=self.threshold)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        try:
            return cls(
                **{name: float(data[name]) for name in METRIC_NAMES},
                confusion=ConfusionMatrix(**{k: int(data["confusion"][k]) for k in ("tp", "fp", "tn", "fn")}),
                n_pos=int(data["n_pos"]),
                n_neg=int(data["n_neg"]),
                threshold=float(data.get("threshold", DEFAULT_THRESHOLD)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractError(f"malformed metric report: {exc!r}") from None


def _as_binary(labels) -> np.ndarray:
    y = np.array([int(lab) for lab in labels], dtype=np.int64)
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be binary")
    return y


def confusion_at(scores: Sequence[float], labels: Sequence[Label], threshold: float = DEFAULT_THRESHOLD) -> ConfusionMatrix:
    """Confusion matrix with "positive" meaning score >= threshold."""
    if len(scores) != len(labels):
        raise ContractError(f"{len(scores)} scores for {len(labels)} labels")
    if len(scores) == 0:
        raise ContractError("need at least one score")
    pred = np.asarray(scores, dtype=np.float64) >= threshold
    y = _as_binary(labels).astype(bool)
    return ConfusionMatrix(
        tp=int(np.sum(pred & y)),
        fp=int(np.sum(pred & ~y)),
        tn=int(np.sum(~pred & ~y)),
        fn=int(np.sum(~pred & y)),
    )


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def classification_metrics(cm: ConfusionMatrix) -> dict[str, float]:
    """Accuracy, precision, recall and F1; every 0/0 is reported as 0."""
    if cm.total < 1:
        raise ContractError("empty confusion matrix")
    return {
        "accuracy": (cm.tp + cm.tn) / cm.total,
        "precision": _ratio(cm.tp, cm.tp + cm.fp),
        "recall": _ratio(cm.tp, cm.tp + cm.fn),
        # 2PR/(P+R) simplified to integers
        "f1": _ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn),
    }


def mcc(cm: ConfusionMatrix) -> float:
    if cm.total < 1:
        raise ContractError("empty confusion matrix")
    factors = (cm.tp + cm.fp, cm.tp + cm.fn, cm.tn + cm.fp, cm.tn + cm.fn)
    if 0 in factors:
        return 0.0
    num = cm.tp * cm.tn - cm.fp * cm.fn
    prod = factors[0] * factors[1] * factors[2] * factors[3]  # exact python int
    try:
        den = math.sqrt(prod)
    except OverflowError:
        den = math.exp(0.5 * sum(math.log(f) for f in factors))
    return max(-1.0, min(1.0, num / den))


def roc_auc(scores: Sequence[float], labels: Sequence[Label]) -> tuple[RocCurve, float]:
    """ROC curve over the distinct score values and its trapezoidal area.

    Tied scores move the curve diagonally, which gives ties half credit and
    makes the area equal to the Mann-Whitney statistic.
    """
    if len(scores) != len(labels):
        raise ContractError(f"{len(scores)} scores for {len(labels)} labels")
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")

    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.r_[0, np.cumsum(y)[ends]]
    fp = np.r_[0, (ends + 1) - tp[1:]]
    # integer trapezoid: sum dfp * (tp_i + tp_{i-1}) / 2
    area2 = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = area2 / (2.0 * n_pos * n_neg)
    curve = RocCurve(
        fpr=tuple(float(v) for v in fp / n_neg),
        tpr=tuple(float(v) for v in tp / n_pos),
        thresholds=(math.inf,) + tuple(float(v) for v in s[ends]),
    )
    return curve, auc


def mann_whitney_auc(scores: Sequence[float], labels: Sequence[Label]) -> float:
    """(concordant pairs + ties / 2) / (n_pos * n_neg) by explicit pair counting."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if not len(pos) or not len(neg):
        raise UndefinedMetricError("AUC undefined for a single class")
    diff = pos[:, None] - neg[None, :]
    return (int(np.sum(diff > 0)) + 0.5 * int(np.sum(diff == 0))) / (len(pos) * len(neg))


def build_report(scores: Sequence[float], labels: Sequence[Label], threshold: float = DEFAULT_THRESHOLD) -> MetricReport:
    cm = confusion_at(scores, labels, threshold)
    curve, auc = roc_auc(scores, labels)
    return MetricReport(
        **classification_metrics(cm),
        mcc=mcc(cm),
        auc=auc,
        confusion=cm,
        n_pos=cm.tp + cm.fn,
        n_neg=cm.tn + cm.fp,
        threshold=threshold,
        roc=curve,
    )


# -- fold aggregation ---------------------------------------------------------


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.3f} ± {std:.3f}"


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    values: tuple[float, ...]

    def render(self) -> str:
        return format_mean_std(self.mean, self.std)


@dataclass(frozen=True)
class FoldSummary:
    metrics: dict[str, MetricSummary]

    def __getitem__(self, name: str) -> MetricSummary:
        return self.metrics[name]

    def rendered(self) -> dict[str, str]:
        return {name: s.render() for name, s in self.metrics.items()}

    def to_dict(self) -> dict:
        return {
            name: {"mean": s.mean, "std": s.std, "values": list(s.values), "rendered": s.render()}
            for name, s in self.metrics.items()
        }


def aggregate_folds(reports: Sequence[MetricReport]) -> FoldSummary:
    """Mean and sample (n - 1) standard deviation of every metric across folds."""
    if len(reports) < 2:
        raise ContractError("aggregation needs at least two reports")
    out = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = MetricSummary(float(values.mean()), float(values.std(ddof=1)), tuple(float(v) for v in values))
    return FoldSummary(out)


# -- exports ------------------------------------------------------------------


def write_roc_csv(curve: RocCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
            writer.writerow([repr(f), repr(t), "inf" if math.isinf(th) else repr(th)])


def write_confusion_json(cm: ConfusionMatrix, path) -> None:
    with open(path, "w") as fh:
        json.dump(cm.to_dict(), fh, indent=2)
        fh.write("\n")
