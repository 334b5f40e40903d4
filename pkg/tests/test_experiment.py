import csv
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slide_mil.core import ContractError, Label, SlideManifest, SlideRecord, Variant, round_half_up
from slide_mil.experiment import (
    ExperimentConfig,
    FoldAssignment,
    class_quotas,
    evaluate_holdout,
    kfold,
    run_cv,
    run_experiment,
    select_best,
    stratified_split,
    write_assignments_csv,
)
from slide_mil.mil import TrainConfig
from slide_mil.synth import SynthBagSpec, cohort_manifest, generate_cohort


def _manifest(n_pos, n_neg):
    recs = [SlideRecord(f"p{i}", "x", Variant.EGFR) for i in range(n_pos)]
    recs += [SlideRecord(f"n{i}", "x", Variant.ALK) for i in range(n_neg)]
    return SlideManifest.from_records(recs)


def test_quotas_tie_rule():
    P, N = Label.EGFR_POS, Label.EGFR_NEG
    assert class_quotas({P: 110, N: 90}, 0.15) == {P: 16, N: 14}
    assert class_quotas({P: 90, N: 110}, 0.15) == {P: 14, N: 16}
    assert class_quotas({P: 5, N: 5}, 0.5) == {P: 2, N: 3}  # equal sizes: lower label value wins
    assert sum(class_quotas({P: 7, N: 6}, 0.3).values()) == 4  # round(3.9)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 150), st.integers(1, 150), st.sampled_from([0.1, 0.15, 0.2, 0.25, 0.3, 0.5]), st.integers(0, 99))
def test_split_is_partition_with_rounded_total(n_pos, n_neg, fraction, seed):
    m = _manifest(n_pos, n_neg)
    s = stratified_split(m, fraction, seed)
    assert sorted(s.train_ids + s.test_ids) == sorted(m.ids)
    assert not set(s.train_ids) & set(s.test_ids)
    assert len(s.test_ids) == round_half_up((n_pos + n_neg) * Fraction(str(fraction)))


def test_split_seed_changes_membership_not_counts():
    m = _manifest(110, 90)
    a, b = stratified_split(m, 0.15, 0), stratified_split(m, 0.15, 1)
    assert a.test_ids != b.test_ids and len(a.test_ids) == len(b.test_ids) == 30
    assert stratified_split(m, 0.15, 0) == a


def test_split_errors():
    with pytest.raises(ContractError):
        stratified_split(_manifest(5, 0))
    with pytest.raises(ContractError):
        stratified_split(_manifest(5, 5), 1.0)


def test_kfold_sizes():
    assert sorted(kfold([str(i) for i in range(7)], 5, 0).sizes()) == [1, 1, 1, 2, 2]
    assert kfold([str(i) for i in range(170)], 5, 3).sizes() == [34] * 5
    with pytest.raises(ContractError):
        kfold(["a", "b"], 5)
    with pytest.raises(ContractError):
        kfold(["a", "a", "b"], 2)


def test_stratified_kfold_balances_classes():
    ids = [f"p{i}" for i in range(50)] + [f"n{i}" for i in range(35)]
    labels = {s: Label.EGFR_POS if s[0] == "p" else Label.EGFR_NEG for s in ids}
    folds = kfold(ids, 5, 1, labels)
    assert folds.sizes() == [17] * 5
    for f in range(5):
        pos = sum(labels[s] == Label.EGFR_POS for s in folds.members(f))
        assert pos == 10


def test_select_best_ties_go_low():
    assert select_best([0.91, 0.94, 0.94, 0.90, 0.88]) == 1
    with pytest.raises(ContractError):
        select_best([])


def test_config_parsing():
    cfg = ExperimentConfig.from_json('{"k": 3, "train": {"max_epochs": 5}, "stratified_folds": true}')
    assert cfg.k == 3 and cfg.train.max_epochs == 5
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ('{"k": 1}', '{"bogus": 1}', "[1]", "{", '{"fraction": 0}'):
        with pytest.raises(ContractError):
            ExperimentConfig.from_json(bad)


@pytest.fixture(scope="module")
def small_run():
    cohort = generate_cohort(SynthBagSpec(n_bags=40, dim=8, n_min=5, n_max=10, seed=2))
    manifest = cohort_manifest(cohort.bags, cohort.labels)
    cfg = ExperimentConfig(k=3, seed=1, train=TrainConfig(max_epochs=6, hidden_dim=8))
    return manifest, {b.slide_id: b for b in cohort.bags}, cfg, run_experiment(manifest, {b.slide_id: b for b in cohort.bags}, cfg)


def test_run_experiment_shape(small_run):
    manifest, bags, cfg, rep = small_run
    assert len(rep.cv) == 3 and len(rep.holdout_per_fold) == 3
    assert rep.holdout is rep.holdout_per_fold[rep.best_fold]
    assert rep.best_fold == select_best(rep.cv)
    assert rep.holdout.n_pos + rep.holdout.n_neg == len(rep.split.test_ids) == 6
    val = [sid for r in rep.cv for sid in r.val_ids]
    assert sorted(val) == sorted(rep.split.train_ids)
    d = rep.to_dict()
    assert d["split"] == {"n_train": 34, "n_test": 6}
    assert "rendered" in d["cv"]["summary"]["auc"]


def test_run_cv_fold_seeds_and_parallel_agree(small_run):
    manifest, bags, cfg, rep = small_run
    labels = manifest.labels()
    serial = run_cv(bags, labels, rep.folds, cfg.train, jobs=1)
    parallel = run_cv(bags, labels, rep.folds, cfg.train, jobs=2)
    for a, b, c in zip(serial, parallel, rep.cv):
        assert a.params == b.params == c.params
    assert serial[0].params != serial[1].params


def test_evaluate_holdout_matches_build_report(small_run):
    manifest, bags, cfg, rep = small_run
    labels = manifest.labels()
    pairs = [(bags[s], labels[s]) for s in rep.split.test_ids]
    r = evaluate_holdout(rep.best_params, pairs)
    assert r.to_dict() == rep.holdout.to_dict()
    with pytest.raises(ContractError):
        evaluate_holdout(rep.best_params, [])


def test_assignments_csv(tmp_path, small_run):
    _, _, _, rep = small_run
    write_assignments_csv(rep.split, rep.folds, tmp_path / "a.csv")
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert Counter(r["role"] for r in rows) == {"train": 34, "test": 6}
    assert all(r["fold"] == "" for r in rows if r["role"] == "test")
