"""Slide-level EGFR mutation prediction with gated attention MIL.

Pipeline: raster slide -> tissue mask -> 256x256 tiles -> patch embeddings
(``.ebag``) -> gated attention MIL classifier -> stratified split and k-fold
cross-validation -> metric reports.
"""

from .core import Label, SlideManifest, SlideRecord, Variant, parse_manifest, validate_cohort
from .encoder import EmbeddingBag, EncoderSpec, encode_slide, read_bag, stub_encode, write_bag
from .estimator import AbmilClassifier
from .experiment import ExperimentConfig, kfold, run_cv, run_experiment, select_best, stratified_split
from .metrics import MetricReport, aggregate_folds, build_report, mcc, roc_auc
from .mil import AbmilParams, TrainConfig, forward, grad, train
from .preprocess import TissueSegmenter, build_tile_grid, extract_patches, filter_tiles, segment_tissue

__version__ = "0.1.0"

__all__ = [
    "AbmilClassifier",
    "AbmilParams",
    "EmbeddingBag",
    "EncoderSpec",
    "ExperimentConfig",
    "Label",
    "MetricReport",
    "SlideManifest",
    "SlideRecord",
    "TissueSegmenter",
    "TrainConfig",
    "Variant",
    "aggregate_folds",
    "build_report",
    "build_tile_grid",
    "encode_slide",
    "extract_patches",
    "filter_tiles",
    "forward",
    "grad",
    "kfold",
    "mcc",
    "parse_manifest",
    "read_bag",
    "roc_auc",
    "run_cv",
    "run_experiment",
    "segment_tissue",
    "select_best",
    "stratified_split",
    "stub_encode",
    "train",
    "validate_cohort",
    "write_bag",
]
