import csv
import json
import subprocess
import sys

import pytest

from slide_mil import cli
from slide_mil.core import read_manifest, serialize_manifest

SUBCOMMANDS = ["synth-slide", "synth-bags", "segment", "tile", "encode", "train", "evaluate", "report"]
FAST = '{"k": 3, "train": {"max_epochs": 3, "hidden_dim": 8}}'


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def slides(tmp_path_factory):
    out = tmp_path_factory.mktemp("slides")
    assert run("synth-slide", "--out", out, "--n", 3, "--width", 768, "--height", 512, "--blank", "2") == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    assert run("synth-bags", "--out", root / "bags", "--n-bags", 40, "--dim", 8, "--min-size", 5, "--max-size", 10) == 0
    (root / "cfg.json").write_text(FAST)
    code = run("train", "--manifest", root / "bags" / "manifest.csv", "--bags", root / "bags",
               "--config", root / "cfg.json", "--out", root / "out")
    assert code == 0
    return root


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_lists_every_flag_with_default(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main([cmd, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        if action.option_strings and action.dest != "help":
            assert action.option_strings[-1] in text
    options = text.split("options:")[1].split("\n  -")[2:]  # skip -h
    assert all("(default:" in o or "(required)" in o for o in options)


def test_segment_and_tile(slides, tmp_path, capsys):
    assert run("segment", "--manifest", slides / "manifest.csv", "--out", tmp_path / "seg") == 0
    assert (tmp_path / "seg" / "slide_0000_mask.png").exists()
    assert run("tile", "--image", slides / "slide_0000.png", "--out", tmp_path / "tiles") == 0
    rows = (tmp_path / "tiles" / "slide_0000_tiles.csv").read_text().splitlines()
    assert rows[0] == "x,y"
    assert run("tile", "--out", tmp_path / "t2") == 2  # neither --image nor --manifest


def test_encode_blank_slide_exit_4_and_determinism(slides, tmp_path, capsys):
    code = run("encode", "--manifest", slides / "manifest.csv", "--out", tmp_path / "a", "--dim", 32)
    captured = capsys.readouterr()
    assert code == 4
    assert sorted(p.name for p in (tmp_path / "a").glob("*.ebag")) == ["slide_0000.ebag", "slide_0001.ebag"]
    assert "slide_0002" in captured.err
    log = captured.out.splitlines()
    assert log[0] == "slide_id,n_patches,seconds" and [line.split(",")[0] for line in log[1:]] == ["slide_0000", "slide_0001"]
    assert run("encode", "--manifest", slides / "manifest.csv", "--out", tmp_path / "b", "--dim", 32, "--jobs", 2) == 4
    for name in ("slide_0000.ebag", "slide_0001.ebag"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_encode_all_tissue_exit_0(slides, tmp_path):
    m = read_manifest(slides / "manifest.csv")
    (slides / "tissue.csv").write_text(serialize_manifest(m.subset(["slide_0000", "slide_0001"])))
    assert run("encode", "--manifest", slides / "tissue.csv", "--out", tmp_path / "e", "--dim", 16) == 0


def test_encode_precomputed(slides, tmp_path):
    m = read_manifest(slides / "manifest.csv")
    (slides / "two.csv").write_text(serialize_manifest(m.subset(["slide_0000", "slide_0001"])))
    assert run("encode", "--manifest", slides / "two.csv", "--out", tmp_path / "src", "--dim", 16) == 0
    assert run("encode", "--manifest", slides / "two.csv", "--out", tmp_path / "dst", "--encoder", "precomputed",
               "--embeddings", tmp_path / "src", "--dim", 16) == 0
    assert (tmp_path / "dst" / "slide_0000.ebag").read_bytes() == (tmp_path / "src" / "slide_0000.ebag").read_bytes()
    assert run("encode", "--manifest", slides / "two.csv", "--out", tmp_path / "d2", "--encoder", "precomputed",
               "--embeddings", tmp_path / "src", "--dim", 8) == 2
    assert run("encode", "--manifest", slides / "two.csv", "--out", tmp_path / "d3", "--encoder", "precomputed") == 2


def test_encode_io_and_validation_errors(tmp_path):
    assert run("encode", "--manifest", tmp_path / "missing.csv", "--out", tmp_path / "o") == 3
    (tmp_path / "bad.csv").write_text("slide_id,image_uri,variant,magnification,mpp\na,a.png,KRAS,40,0.2\n")
    assert run("encode", "--manifest", tmp_path / "bad.csv", "--out", tmp_path / "o") == 2
    (tmp_path / "gone.csv").write_text("slide_id,image_uri,variant,magnification,mpp\na,nope.png,EGFR,40,0.2\n")
    assert run("encode", "--manifest", tmp_path / "gone.csv", "--out", tmp_path / "o") == 3


def test_train_outputs(trained):
    out = trained / "out"
    names = {p.name for p in out.iterdir()}
    assert {"report.json", "roc.csv", "confusion.json", "roc.svg", "model.abml", "assignments.csv"} <= names
    assert sorted(n for n in names if n.startswith("history_fold")) == [f"history_fold{i}.csv" for i in range(3)]
    doc = json.loads((out / "report.json").read_text())
    assert set(doc) >= {"config", "split", "cv", "holdout", "holdout_across_folds"}
    assert " ± " in doc["cv"]["summary"]["auc"]["rendered"]
    assert doc["holdout"]["roc"]["fpr"][0] == 0.0
    assert (out / "roc.svg").read_text().startswith("<svg")


def test_train_config_error_exit_2(trained, tmp_path):
    (tmp_path / "bad.json").write_text('{"k": 1}')
    code = run("train", "--manifest", trained / "bags" / "manifest.csv", "--bags", trained / "bags",
               "--config", tmp_path / "bad.json", "--out", tmp_path / "o")
    assert code == 2


def test_train_missing_bags_exit_3(trained, tmp_path):
    (tmp_path / "empty").mkdir()
    code = run("train", "--manifest", trained / "bags" / "manifest.csv", "--bags", tmp_path / "empty", "--out", tmp_path / "o")
    assert code == 3


def test_evaluate_and_single_class(trained, tmp_path):
    out, bags = trained / "out", trained / "bags"
    models = [a for i in range(3) for a in ("--model", out / f"model_fold{i}.abml")]
    assert run("evaluate", *models, "--manifest", bags / "manifest.csv", "--bags", bags, "--out", tmp_path / "ev") == 0
    doc = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert len(doc["per_model"]) == 3 and "holdout_across_folds" in doc

    m = read_manifest(bags / "manifest.csv")
    pos = [sid for sid, lab in m.labels().items() if lab == 1]
    (tmp_path / "pos.csv").write_text(serialize_manifest(m.subset(pos)))
    code = run("evaluate", "--model", out / "model.abml", "--manifest", tmp_path / "pos.csv", "--bags", bags,
               "--out", tmp_path / "ev2")
    assert code == 5


def test_report_single_and_comparison(trained, tmp_path):
    rep = trained / "out" / "report.json"
    assert run("report", rep, "--out", tmp_path / "one") == 0
    with open(tmp_path / "one" / "summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 1
    assert not (tmp_path / "one" / "comparison.csv").exists()

    assert run("report", rep, rep, "--names", "internal,external", "--out", tmp_path / "two") == 0
    rows = (tmp_path / "two" / "comparison.csv").read_text().splitlines()
    assert rows[0] == "dataset,auc_mean,auc_std,auc" and len(rows) == 3
    assert rows[1].startswith("internal,") and rows[2].startswith("external,")
    assert all(not line.endswith(" ") for line in (tmp_path / "two" / "summary.txt").read_text().splitlines())


def test_report_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{}")
    assert run("report", tmp_path / "bad.json", "--out", tmp_path / "o") == 2
    proc = subprocess.run([sys.executable, "-m", "slide_mil.cli", "report", "--out", str(tmp_path / "o")],
                          capture_output=True)
    assert proc.returncode == 2


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate"])
    assert info.value.code == 2
