"""Stratified hold-out split, k-fold cross-validation and model selection."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import ContractError, DataError, Label, SlideManifest, exact_fraction, round_half_up
from .encoder import EmbeddingBag
from .metrics import (
    DEFAULT_THRESHOLD,
    FoldSummary,
    MetricReport,
    aggregate_folds,
    build_report,
)
from .mil import AbmilParams, TrainConfig, TrainHistory, forward, train


@dataclass(frozen=True)
class SplitAssignment:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int
    fraction: float


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: dict[str, int]
    k: int

    def members(self, fold: int) -> list[str]:
        return [sid for sid, f in self.fold_of.items() if f == fold]

    def sizes(self) -> list[int]:
        return [len(self.members(i)) for i in range(self.k)]


def class_quotas(counts: Mapping[Label, int], fraction: float) -> dict[Label, int]:
    """Per-class test counts: floor quotas, then leftover slots by largest remainder.

    Equal remainders go to the smaller class first (then the lower label
    value), so 110/90 at 15% yields 16/14.
    """
    frac = exact_fraction(fraction)
    total = round_half_up(sum(counts.values()) * frac)
    quota = {lab: math.floor(n * frac) for lab, n in counts.items()}
    remainder = {lab: n * frac - quota[lab] for lab, n in counts.items()}
    order = sorted(counts, key=lambda lab: (-remainder[lab], counts[lab], int(lab)))
    for lab in order[: total - sum(quota.values())]:
        quota[lab] += 1
    return quota


def stratified_split(manifest: SlideManifest, fraction: float = 0.15, seed: int = 0) -> SplitAssignment:
    if not 0 < fraction < 1:
        raise ContractError("fraction must lie in (0, 1)")
    by_class: dict[Label, list[str]] = {lab: [] for lab in Label}
    for rec in manifest.records:
        by_class[rec.label].append(rec.slide_id)
    empty = [lab.name for lab, ids in by_class.items() if not ids]
    if empty:
        raise ContractError(f"classes without slides: {empty}")

    quota = class_quotas({lab: len(ids) for lab, ids in by_class.items()}, fraction)
    rng = np.random.default_rng(seed)
    test = set()
    for lab in Label:
        ids = by_class[lab]
        test.update(ids[i] for i in rng.permutation(len(ids))[: quota[lab]])
    return SplitAssignment(
        train_ids=tuple(sid for sid in manifest.ids if sid not in test),
        test_ids=tuple(sid for sid in manifest.ids if sid in test),
        seed=seed,
        fraction=fraction,
    )


def kfold(
    train_ids: Sequence[str],
    k: int = 5,
    seed: int = 0,
    labels: Optional[Mapping[str, Label]] = None,
) -> FoldAssignment:
    """Seeded shuffle followed by round-robin fold assignment.

    With ``labels`` the shuffle happens within each class and the round-robin
    counter carries across classes, giving stratified folds of balanced size.
    """
    if k < 2:
        raise ContractError("k must be >= 2")
    if len(train_ids) < k:
        raise ContractError(f"{len(train_ids)} ids cannot fill {k} folds")
    if len(set(train_ids)) != len(train_ids):
        raise ContractError("duplicate ids")
    rng = np.random.default_rng(seed)
    if labels is None:
        groups = [list(train_ids)]
    else:
        groups = [[sid for sid in train_ids if labels[sid] == lab] for lab in Label]
    order = []
    for group in groups:
        order.extend(group[i] for i in rng.permutation(len(group)))
    assigned = {sid: i % k for i, sid in enumerate(order)}
    return FoldAssignment({sid: assigned[sid] for sid in train_ids}, k)


@dataclass(eq=False)
class FoldResult:
    fold: int
    params: AbmilParams
    report: MetricReport
    history: TrainHistory
    val_ids: tuple[str, ...]
    val_scores: tuple[float, ...]

    def __iter__(self):
        # unpacks as (params, report)
        return iter((self.params, self.report))


def _pairs(ids, bags, labels):
    out = []
    for sid in ids:
        if sid not in bags:
            raise DataError(f"no embedding bag for slide {sid!r}")
        out.append((bags[sid], labels[sid]))
    return out


def score_bags(params: AbmilParams, bags: Sequence[EmbeddingBag]) -> list[float]:
    return [forward(bag, params).prob for bag in bags]


def _run_fold(fold, train_pairs, val_pairs, val_ids, config, threshold) -> FoldResult:
    result = train(train_pairs, val_pairs, replace(config, seed=config.seed + fold))
    scores = score_bags(result.params, [b for b, _ in val_pairs])
    report = build_report(scores, [lab for _, lab in val_pairs], threshold)
    return FoldResult(fold, result.params, report, result.history, tuple(val_ids), tuple(scores))


def run_cv(
    bags: Mapping[str, EmbeddingBag],
    labels: Mapping[str, Label],
    folds: FoldAssignment,
    config: TrainConfig = TrainConfig(),
    threshold: float = DEFAULT_THRESHOLD,
    jobs: int = 1,
) -> list[FoldResult]:
    """Train one model per fold, validating on the held-out fold.

    Fold ``i`` trains with seed ``config.seed + i``; results come back in fold
    order and do not depend on ``jobs``.
    """
    tasks = []
    for i in range(folds.k):
        val_ids = [sid for sid, f in folds.fold_of.items() if f == i]
        train_ids = [sid for sid, f in folds.fold_of.items() if f != i]
        if set(val_ids) & set(train_ids):
            raise AssertionError(f"fold {i} leaks slides between training and validation")
        tasks.append((i, _pairs(train_ids, bags, labels), _pairs(val_ids, bags, labels), val_ids, config, threshold))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_fold, *t) for t in tasks]
            return [f.result() for f in futures]
    return [_run_fold(*t) for t in tasks]


def select_best(cv_results: Sequence) -> int:
    """Index of the highest validation accuracy; ties go to the lowest index.

    Items may be :class:`FoldResult`, :class:`MetricReport` or bare accuracies.
    """
    if not cv_results:
        raise ContractError("no results to select from")
    accs = []
    for item in cv_results:
        if isinstance(item, FoldResult):
            item = item.report
        accs.append(item.accuracy if isinstance(item, MetricReport) else float(item))
    return int(np.argmax(accs))  # argmax returns the first maximum


def evaluate_holdout(
    params: AbmilParams,
    bags: Sequence[tuple[EmbeddingBag, Label]],
    threshold: float = DEFAULT_THRESHOLD,
) -> MetricReport:
    if not bags:
        raise ContractError("empty evaluation set")
    scores = score_bags(params, [b for b, _ in bags])
    return build_report(scores, [lab for _, lab in bags], threshold)


# -- full protocol ----------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    fraction: float = 0.15
    k: int = 5
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    threshold: float = DEFAULT_THRESHOLD
    stratified_folds: bool = False

    def __post_init__(self):
        if not 0 < self.fraction < 1:
            raise ContractError("fraction must lie in (0, 1)")
        if self.k < 2:
            raise ContractError("k must be >= 2")
        if not 0 <= self.threshold <= 1:
            raise ContractError("threshold must lie in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ContractError("experiment config must be a JSON object")
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown experiment config keys: {sorted(unknown)}")
        try:
            if "train" in data:
                data["train"] = TrainConfig.from_dict(data["train"])
            return cls(**data)
        except TypeError as exc:
            raise ContractError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ContractError(f"invalid JSON: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "fraction": self.fraction,
            "k": self.k,
            "seed": self.seed,
            "train": self.train.to_dict(),
            "threshold": self.threshold,
            "stratified_folds": self.stratified_folds,
        }


@dataclass(eq=False)
class ExperimentReport:
    config: ExperimentConfig
    split: SplitAssignment
    folds: FoldAssignment
    cv: list[FoldResult]
    cv_summary: FoldSummary
    best_fold: int
    holdout: MetricReport
    holdout_per_fold: list[MetricReport]
    holdout_summary: FoldSummary
    external: Optional[MetricReport] = None

    @property
    def best_params(self) -> AbmilParams:
        return self.cv[self.best_fold].params

    def to_dict(self) -> dict:
        out = {
            "config": self.config.to_dict(),
            "split": {"n_train": len(self.split.train_ids), "n_test": len(self.split.test_ids)},
            "best_fold": self.best_fold,
            "cv": {
                "folds": [
                    {
                        "fold": r.fold,
                        "n_val": len(r.val_ids),
                        "stopped_epoch": r.history.stopped_epoch,
                        "best_epoch": r.history.best_epoch,
                        "report": r.report.to_dict(),
                    }
                    for r in self.cv
                ],
                "summary": self.cv_summary.to_dict(),
            },
            "holdout": self.holdout.to_dict(),
            "holdout_across_folds": self.holdout_summary.to_dict(),
        }
        if self.external is not None:
            out["external"] = self.external.to_dict()
        return out


def run_experiment(
    manifest: SlideManifest,
    bags: Mapping[str, EmbeddingBag],
    config: ExperimentConfig = ExperimentConfig(),
    external: Optional[Sequence[tuple[EmbeddingBag, Label]]] = None,
    jobs: int = 1,
) -> ExperimentReport:
    """Split, cross-validate, pick the best fold by accuracy, score the hold-out.

    Every fold model is also scored on the hold-out set so the report can give
    a mean and spread there as well.
    """
    labels = manifest.labels()
    split = stratified_split(manifest, config.fraction, config.seed)
    folds = kfold(split.train_ids, config.k, config.seed, labels if config.stratified_folds else None)
    cv = run_cv(bags, labels, folds, config.train, config.threshold, jobs=jobs)
    best = select_best(cv)
    test_pairs = _pairs(split.test_ids, bags, labels)
    per_fold = [evaluate_holdout(r.params, test_pairs, config.threshold) for r in cv]
    ext = evaluate_holdout(cv[best].params, external, config.threshold) if external else None
    return ExperimentReport(
        config=config,
        split=split,
        folds=folds,
        cv=cv,
        cv_summary=aggregate_folds([r.report for r in cv]),
        best_fold=best,
        holdout=per_fold[best],
        holdout_per_fold=per_fold,
        holdout_summary=aggregate_folds(per_fold),
        external=ext,
    )


def write_assignments_csv(split: SplitAssignment, folds: Optional[FoldAssignment], path) -> None:
    """Audit trail: ``slide_id,role,fold`` (fold empty for test slides)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["slide_id", "role", "fold"])
        for sid in split.train_ids:
            writer.writerow([sid, "train", folds.fold_of[sid] if folds else ""])
        for sid in split.test_ids:
            writer.writerow([sid, "test", ""])
