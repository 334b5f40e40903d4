"""Command-line pipeline: one subcommand per stage.

Exit codes
----------
0  success
1  unexpected internal error
2  usage, validation or configuration error (also malformed report files)
3  I/O error (missing or unreadable input, unwritable output)
4  at least one slide had no tissue tiles (other slides are still processed)
5  evaluation set holds a single class, so AUC is undefined
6  numeric failure during training (non-finite loss)
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .core import (
    ContractError,
    DataError,
    FormatError,
    Label,
    ManifestParseError,
    SlideManifest,
    ValidationError,
    read_manifest,
)
from .encoder import (
    DEFAULT_DIM,
    EmptyBagError,
    EncoderKind,
    EncoderSpec,
    bag_path,
    encode_slide,
    load_bag,
    load_precomputed,
    save_bag,
)
from .experiment import (
    ExperimentConfig,
    evaluate_holdout,
    run_experiment,
    write_assignments_csv,
)
from .metrics import (
    DEFAULT_THRESHOLD,
    MetricReport,
    RocCurve,
    UndefinedMetricError,
    aggregate_folds,
    format_mean_std,
    write_confusion_json,
    write_roc_csv,
)
from .mil import NumericError, load_params, save_params, write_history_csv
from .plots import roc_svg
from .preprocess import (
    DEFAULT_MIN_TISSUE_FRACTION,
    DEFAULT_SAT_MIN,
    DEFAULT_VAL_MAX,
    TILE_SIZE,
    build_tile_grid,
    extract_patches,
    filter_tiles,
    read_image,
    segment_tissue,
    write_grid_csv,
    write_mask_png,
)
from .synth import (
    SynthBagSpec,
    SynthSlideSpec,
    generate_cohort,
    write_bag_cohort,
    write_slide_cohort,
)

logger = logging.getLogger("slide_mil")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_EMPTY_TISSUE = 4
EXIT_SINGLE_CLASS = 5
EXIT_NUMERIC = 6


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _configure_logging() -> None:
    level = os.environ.get("SLIDE_MIL_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"{what} not found: {path}", EXIT_IO)
    return path


def _require_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise CliError(f"{what} is not a directory: {path}", EXIT_IO)
    return path


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}", EXIT_IO) from None
    return out


def _manifest(path) -> tuple[SlideManifest, Path]:
    path = _require_file(path, "manifest")
    return read_manifest(path), path.parent


def _image_path(base: Path, uri: str) -> Path:
    p = Path(uri)
    return p if p.is_absolute() else base / p


def _roc_to_dict(curve: RocCurve) -> dict:
    return {"fpr": list(curve.fpr), "tpr": list(curve.tpr)}


def _report_dict(report: MetricReport) -> dict:
    out = report.to_dict()
    if report.roc is not None:
        out["roc"] = _roc_to_dict(report.roc)
    return out


# -- synth ----------------------------------------------------------------------


def cmd_synth_slide(args) -> int:
    out = _out_dir(args.out)
    specs = [
        SynthSlideSpec(width=args.width, height=args.height, n_blobs=args.blobs, seed=args.seed + i)
        for i in range(args.n)
    ]
    labels = [Label.EGFR_POS if i % 2 == 0 else Label.EGFR_NEG for i in range(args.n)]
    blank = tuple(int(i) for i in args.blank.split(",")) if args.blank else ()
    write_slide_cohort(specs, labels, out, blank=blank)
    print(f"wrote {args.n} slides to {out}")
    return EXIT_OK


def cmd_synth_bags(args) -> int:
    out = _out_dir(args.out)
    spec = SynthBagSpec(
        n_bags=args.n_bags,
        dim=args.dim,
        n_min=args.min_size,
        n_max=args.max_size,
        signal_strength=args.mu,
        noise=args.sigma,
        positive_fraction=args.positive_fraction,
        seed=args.seed,
    )
    write_bag_cohort(generate_cohort(spec), out)
    print(f"wrote {spec.n_bags} bags to {out}")
    return EXIT_OK


# -- segment / tile ---------------------------------------------------------------


def _inputs(args) -> list[tuple[str, Path]]:
    if bool(args.image) == bool(args.manifest):
        raise CliError("give exactly one of --image or --manifest", EXIT_USAGE)
    if args.image:
        path = _require_file(args.image, "image")
        return [(path.stem, path)]
    manifest, base = _manifest(args.manifest)
    return [(r.slide_id, _require_file(_image_path(base, r.image_uri), "image")) for r in manifest.records]


def cmd_segment(args) -> int:
    out = _out_dir(args.out)
    for sid, path in _inputs(args):
        mask = segment_tissue(read_image(path), args.sat_min, args.val_max)
        write_mask_png(mask, out / f"{sid}_mask.png")
        print(f"{sid},{int(mask.bits.sum())}")
    return EXIT_OK


def cmd_tile(args) -> int:
    out = _out_dir(args.out)
    for sid, path in _inputs(args):
        image = read_image(path)
        mask = segment_tissue(image, args.sat_min, args.val_max)
        grid = filter_tiles(build_tile_grid(image.dims, args.tile_size), mask, args.min_tissue)
        write_grid_csv(grid, out / f"{sid}_tiles.csv")
        print(f"{sid},{len(grid)}")
    return EXIT_OK


# -- encode ---------------------------------------------------------------------


def _encode_one(task) -> tuple[str, int, float, int, str]:
    """Worker: returns (slide_id, n_patches, seconds, exit code, message)."""
    sid, image_path, spec, out, seg = task
    start = time.perf_counter()
    try:
        if spec.kind is EncoderKind.PRECOMPUTED:
            bag = load_bag(image_path)
            if bag.slide_id != sid:
                return sid, 0, 0.0, EXIT_USAGE, f"{image_path} holds slide_id {bag.slide_id!r}"
            if bag.dim != spec.dim:
                return sid, 0, 0.0, EXIT_USAGE, f"{sid}: embedding dim {bag.dim} != --dim {spec.dim}"
        else:
            image = read_image(image_path)
            mask = segment_tissue(image, seg["sat_min"], seg["val_max"])
            grid = filter_tiles(build_tile_grid(image.dims, TILE_SIZE), mask, seg["min_tissue"])
            bag = encode_slide(extract_patches(image, grid, mask), spec, slide_id=sid)
        save_bag(bag, bag_path(out, sid))
    except EmptyBagError as exc:
        return sid, 0, time.perf_counter() - start, EXIT_EMPTY_TISSUE, str(exc)
    except (OSError, FormatError) as exc:
        return sid, 0, time.perf_counter() - start, EXIT_IO, str(exc)
    except (DataError, ContractError) as exc:
        return sid, 0, time.perf_counter() - start, EXIT_USAGE, str(exc)
    return sid, bag.n, time.perf_counter() - start, EXIT_OK, ""


def cmd_encode(args) -> int:
    manifest, base = _manifest(args.manifest)
    out = _out_dir(args.out)
    kind = EncoderKind(args.encoder)
    spec = EncoderSpec(kind=kind, dim=args.dim, seed=args.seed)
    seg = {"sat_min": args.sat_min, "val_max": args.val_max, "min_tissue": args.min_tissue}
    if kind is EncoderKind.PRECOMPUTED:
        if not args.embeddings:
            raise CliError("--encoder precomputed needs --embeddings DIR", EXIT_USAGE)
        src = _require_dir(args.embeddings, "embeddings")
        tasks = [(r.slide_id, bag_path(src, r.slide_id), spec, out, seg) for r in manifest.records]
    else:
        tasks = [(r.slide_id, _image_path(base, r.image_uri), spec, out, seg) for r in manifest.records]

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_encode_one, tasks))
    else:
        results = [_encode_one(t) for t in tasks]

    codes = set()
    print("slide_id,n_patches,seconds")
    for sid, n, secs, code, msg in sorted(results):
        if code == EXIT_OK:
            print(f"{sid},{n},{secs:.3f}")
        else:
            codes.add(code)
            print(f"error: {msg}", file=sys.stderr)
    # most fundamental failure wins
    for code in (EXIT_USAGE, EXIT_IO, EXIT_EMPTY_TISSUE):
        if code in codes:
            return code
    return EXIT_OK


# -- train / evaluate ---------------------------------------------------------------


def _load_config(args) -> ExperimentConfig:
    if args.config:
        path = _require_file(args.config, "config")
        config = ExperimentConfig.from_json(path.read_text(encoding="utf-8"))
    else:
        config = ExperimentConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed, train=replace(config.train, seed=args.seed))
    if args.threshold is not None:
        config = replace(config, threshold=args.threshold)
    return config


def _load_bags(manifest: SlideManifest, directory) -> dict:
    directory = _require_dir(directory, "bag directory")
    try:
        return load_precomputed(directory, manifest.ids)
    except FileNotFoundError as exc:
        raise CliError(f"missing embedding bag: {exc.filename}", EXIT_IO) from None


def _write_eval_outputs(out: Path, report: MetricReport, name: str, prefix: str = "") -> None:
    write_roc_csv(report.roc, out / f"{prefix}roc.csv")
    write_confusion_json(report.confusion, out / f"{prefix}confusion.json")
    (out / f"{prefix}roc.svg").write_text(roc_svg([(name, report.roc, report.auc)], title=f"ROC: {name}"))


def cmd_train(args) -> int:
    config = _load_config(args)
    manifest, _ = _manifest(args.manifest)
    bags = _load_bags(manifest, args.bags)
    external = None
    if args.external_manifest:
        ext_manifest, _ = _manifest(args.external_manifest)
        ext_bags = _load_bags(ext_manifest, args.external_bags or args.bags)
        labels = ext_manifest.labels()
        external = [(ext_bags[sid], labels[sid]) for sid in ext_manifest.ids]
    out = _out_dir(args.out)

    result = run_experiment(manifest, bags, config, external=external, jobs=args.jobs)

    for fold in result.cv:
        write_history_csv(fold.history, out / f"history_fold{fold.fold}.csv")
        save_params(fold.params, out / f"model_fold{fold.fold}.abml")
    save_params(result.best_params, out / "model.abml")
    write_assignments_csv(result.split, result.folds, out / "assignments.csv")

    report = result.to_dict()
    report["holdout"] = _report_dict(result.holdout)
    if result.external is not None:
        report["external"] = _report_dict(result.external)
        _write_eval_outputs(out, result.external, "external", prefix="external_")
    _write_json(report, out / "report.json")
    _write_eval_outputs(out, result.holdout, "hold-out")

    print(f"best fold {result.best_fold}")
    print(f"cv auc      {result.cv_summary['auc'].render()}")
    print(f"holdout auc {result.holdout.auc:.3f} (across folds {result.holdout_summary['auc'].render()})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    threshold = DEFAULT_THRESHOLD if args.threshold is None else args.threshold
    models = [load_params(_require_file(p, "model")) for p in args.model]
    manifest, _ = _manifest(args.manifest)
    bags = _load_bags(manifest, args.bags)
    labels = manifest.labels()
    pairs = [(bags[sid], labels[sid]) for sid in manifest.ids]
    out = _out_dir(args.out)

    reports = [evaluate_holdout(params, pairs, threshold) for params in models]
    doc = {
        "models": [str(p) for p in args.model],
        "holdout": _report_dict(reports[0]),
        "per_model": [r.to_dict() for r in reports],
    }
    if len(reports) >= 2:
        doc["holdout_across_folds"] = aggregate_folds(reports).to_dict()
    _write_json(doc, out / "report.json")
    _write_eval_outputs(out, reports[0], args.name)
    print(f"auc {reports[0].auc:.3f} mcc {reports[0].mcc:.3f} (n_pos={reports[0].n_pos}, n_neg={reports[0].n_neg})")
    return EXIT_OK


# -- report -----------------------------------------------------------------------

_SUMMARY_FIELDS = ("dataset", "n_pos", "n_neg", "accuracy", "precision", "recall", "f1", "mcc", "auc", "auc_mean_std")


def _read_report(path) -> tuple[dict, MetricReport]:
    path = _require_file(path, "report")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        holdout = MetricReport.from_dict(doc["holdout"])
    except (json.JSONDecodeError, KeyError, TypeError, ContractError) as exc:
        raise CliError(f"malformed report {path}: {exc}", EXIT_USAGE) from None
    return doc, holdout


def _auc_spread(doc: dict, holdout: MetricReport) -> tuple[float, float]:
    spread = doc.get("holdout_across_folds", {}).get("auc")
    if spread:
        return float(spread["mean"]), float(spread["std"])
    return holdout.auc, 0.0


def cmd_report(args) -> int:
    names = args.names.split(",") if args.names else []
    if names and len(names) != len(args.reports):
        raise CliError("--names needs one name per report", EXIT_USAGE)
    rows, curves = [], []
    for i, path in enumerate(args.reports):
        doc, holdout = _read_report(path)
        name = names[i] if names else Path(path).resolve().parent.name
        mean, std = _auc_spread(doc, holdout)
        rows.append(
            {
                "dataset": name,
                "n_pos": holdout.n_pos,
                "n_neg": holdout.n_neg,
                **{k: f"{getattr(holdout, k):.3f}" for k in ("accuracy", "precision", "recall", "f1", "mcc", "auc")},
                "auc_mean_std": format_mean_std(mean, std),
                "_mean": mean,
                "_std": std,
            }
        )
        roc = doc["holdout"].get("roc")
        if roc:
            curves.append((name, RocCurve(tuple(roc["fpr"]), tuple(roc["tpr"]), ()), holdout.auc))

    out = _out_dir(args.out)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_SUMMARY_FIELDS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    widths = {f: max(len(f), *(len(str(r[f])) for r in rows)) for f in _SUMMARY_FIELDS}
    text = [
        "  ".join(f.ljust(widths[f]) for f in _SUMMARY_FIELDS).rstrip(),
        *("  ".join(str(r[f]).ljust(widths[f]) for f in _SUMMARY_FIELDS).rstrip() for r in rows),
    ]
    (out / "summary.txt").write_text("\n".join(text) + "\n", encoding="utf-8")
    print("\n".join(text))
    if len(rows) > 1:
        with open(out / "comparison.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["dataset", "auc_mean", "auc_std", "auc"])
            for r in rows:
                writer.writerow([r["dataset"], f"{r['_mean']:.3f}", f"{r['_std']:.3f}", r["auc_mean_std"]])
    if curves:
        (out / "roc.svg").write_text(roc_svg(curves, title="ROC comparison" if len(curves) > 1 else "ROC"))
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def _add_segmentation_flags(p) -> None:
    p.add_argument("--sat-min", type=float, default=DEFAULT_SAT_MIN, help="HSV saturation must exceed this")
    p.add_argument("--val-max", type=float, default=DEFAULT_VAL_MAX, help="HSV value must stay below this")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows the default for every option, including ones without help text."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "%(default)" in text or action.default is argparse.SUPPRESS or not action.option_strings:
            return text
        if action.required:
            return text + (" " if text else "") + "(required)"
        return text + (" " if text else "") + "(default: %(default)s)"


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="slide-mil", description=__doc__.split("\n")[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-slide", help="write synthetic H&E-like slides with masks", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=3, help="number of slides")
    p.add_argument("--width", type=int, default=1024, help="slide width in pixels")
    p.add_argument("--height", type=int, default=768, help="slide height in pixels")
    p.add_argument("--blobs", type=int, default=6, help="tissue blobs per slide")
    p.add_argument("--blank", default="", help="comma-separated slide indices rendered without tissue")
    p.add_argument("--seed", type=int, default=0, help="base seed; item i uses seed + i")
    p.set_defaults(func=cmd_synth_slide)

    p = sub.add_parser("synth-bags", help="write a synthetic embedding-bag cohort", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-bags", type=int, default=100, help="number of bags")
    p.add_argument("--dim", type=int, default=16, help="instance embedding width")
    p.add_argument("--min-size", type=int, default=20, help="smallest bag")
    p.add_argument("--max-size", type=int, default=50, help="largest bag")
    p.add_argument("--mu", type=float, default=4.0, help="signal strength of planted instances")
    p.add_argument("--sigma", type=float, default=1.0, help="instance noise std")
    p.add_argument("--positive-fraction", type=float, default=0.5, help="share of EGFR-positive bags")
    p.add_argument("--seed", type=int, default=0, help="base seed; item i uses seed + i")
    p.set_defaults(func=cmd_synth_bags)

    for name, func, help_ in (
        ("segment", cmd_segment, "write tissue masks (PNG, tissue=white)"),
        ("tile", cmd_tile, "write kept 256x256 tile origins as CSV"),
    ):
        p = sub.add_parser(name, help=help_, formatter_class=fmt)
        p.add_argument("--image", help="single PNG/PPM input")
        p.add_argument("--manifest", help="manifest CSV; image_uri resolved relative to it")
        p.add_argument("--out", required=True, help="output directory")
        _add_segmentation_flags(p)
        if name == "tile":
            p.add_argument("--tile-size", type=int, default=TILE_SIZE, help="tile edge in pixels")
            p.add_argument("--min-tissue", type=float, default=DEFAULT_MIN_TISSUE_FRACTION, help="minimum tissue fraction per tile")
        p.set_defaults(func=func)

    p = sub.add_parser("encode", help="write one .ebag per manifest slide", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.add_argument("--out", required=True, help="output directory for .ebag files")
    p.add_argument("--encoder", choices=[k.value for k in EncoderKind], default="stub", help="embedding source")
    p.add_argument("--embeddings", help="directory of precomputed <slide_id>.ebag files")
    p.add_argument("--dim", type=int, default=DEFAULT_DIM, help="embedding width")
    p.add_argument("--seed", type=int, default=0, help="stub encoder seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--min-tissue", type=float, default=DEFAULT_MIN_TISSUE_FRACTION, help="minimum tissue fraction per tile")
    _add_segmentation_flags(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="split, cross-validate, select and evaluate", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.add_argument("--bags", required=True, help="directory of <slide_id>.ebag files")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override split/fold/training seed")
    p.add_argument("--threshold", type=float, default=None, help="override decision threshold")
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    p.add_argument("--external-manifest", help="optional external test cohort")
    p.add_argument("--external-bags", help="bag directory for the external cohort; falls back to --bags")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score saved model(s) on a cohort", formatter_class=fmt)
    p.add_argument("--model", required=True, action="append", help=".abml checkpoint; repeat for several")
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.add_argument("--bags", required=True, help="directory of <slide_id>.ebag files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--name", default="evaluation", help="dataset name used in plots")
    p.add_argument("--threshold", type=float, default=None, help=f"decision threshold; {DEFAULT_THRESHOLD} when unset")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summarise one or more report.json files", formatter_class=fmt)
    p.add_argument("reports", nargs="+", help="report.json paths")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--names", help="comma-separated dataset names, one per report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ManifestParseError, ValidationError, ContractError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UndefinedMetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SINGLE_CLASS
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception:  # noqa: BLE001
        logger.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
