"""Synthetic slides and embedding-bag cohorts with known ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    ContractError,
    Label,
    SlideManifest,
    SlideRecord,
    Variant,
    exact_fraction,
    round_half_up,
    serialize_manifest,
)
from .encoder import EmbeddingBag, bag_path, save_bag
from .preprocess import RasterImage, TissueMask, write_image, write_mask_png

_NEG_VARIANTS = (Variant.ALK, Variant.ROS1, Variant.TRIPLE_NEG)


@dataclass(frozen=True)
class SynthSlideSpec:
    width: int = 1024
    height: int = 768
    n_blobs: int = 6
    # every channel combination in these ranges passes the default tissue rule
    blob_low: tuple[int, int, int] = (160, 60, 140)
    blob_high: tuple[int, int, int] = (225, 130, 215)
    background_low: tuple[int, int, int] = (244, 244, 244)
    background_high: tuple[int, int, int] = (252, 252, 252)
    jitter: int = 6
    seed: int = 0


def generate_slide(spec: SynthSlideSpec = SynthSlideSpec()) -> tuple[RasterImage, TissueMask]:
    """Rasterize soft-edged ellipses onto a near-white background.

    The returned mask holds the pixels whose centre lies inside at least one
    ellipse. Edge pixels are alpha-blended over roughly one pixel, so the
    colour rule and the geometric mask disagree only along the boundaries.
    """
    if spec.width < 256 or spec.height < 256:
        raise ContractError("synthetic slides must be at least 256x256")
    if spec.n_blobs < 0:
        raise ContractError("n_blobs must be >= 0")
    rng = np.random.default_rng(spec.seed)
    w, h = spec.width, spec.height
    bg = rng.integers(spec.background_low, np.asarray(spec.background_high) + 1, size=(h, w, 3))
    img = bg.astype(np.float64)
    mask = np.zeros((h, w), dtype=bool)

    ys, xs = np.mgrid[0:h, 0:w]
    xs = xs + 0.5
    ys = ys + 0.5
    short = min(w, h)
    for _ in range(spec.n_blobs):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        rx, ry = rng.uniform(short / 10, short / 4, size=2)
        theta = rng.uniform(0, math.pi)
        base = rng.integers(spec.blob_low, np.asarray(spec.blob_high) + 1)
        # bounding box keeps the per-blob work proportional to its area
        r = max(rx, ry) + 2
        x0, x1 = max(0, int(cx - r)), min(w, int(cx + r) + 1)
        y0, y1 = max(0, int(cy - r)), min(h, int(cy + r) + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        dx, dy = xs[y0:y1, x0:x1] - cx, ys[y0:y1, x0:x1] - cy
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        d = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
        inside = d <= 1.0
        # ~1 px linear ramp across the boundary
        alpha = np.clip((1.0 - d) * min(rx, ry) + 0.5, 0.0, 1.0)
        colour = base + rng.integers(-spec.jitter, spec.jitter + 1, size=(y1 - y0, x1 - x0, 3))
        region = img[y0:y1, x0:x1]
        region[:] = region * (1.0 - alpha[..., None]) + colour * alpha[..., None]
        mask[y0:y1, x0:x1] |= inside

    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return RasterImage(pixels), TissueMask(mask)


@dataclass(frozen=True)
class SynthBagSpec:
    n_bags: int = 100
    dim: int = 16
    n_min: int = 20
    n_max: int = 50
    signal_strength: float = 4.0
    noise: float = 1.0
    positive_fraction: float = 0.5
    max_witnesses: int = 3
    seed: int = 0


@dataclass(eq=False)
class SynthCohort:
    bags: list[EmbeddingBag]
    labels: list[Label]
    witnesses: list[np.ndarray] = field(default_factory=list)  # planted row indices per bag
    direction: Optional[np.ndarray] = None

    def pairs(self) -> list[tuple[EmbeddingBag, Label]]:
        return list(zip(self.bags, self.labels))


def signal_direction(dim: int, seed: int) -> np.ndarray:
    vec = np.random.default_rng([seed, 0x5EED]).standard_normal(dim)
    return vec / np.linalg.norm(vec)


def generate_cohort(spec: SynthBagSpec = SynthBagSpec()) -> SynthCohort:
    """Bags of isotropic noise; positive bags also hold 1-3 shifted witnesses."""
    if not 0 < spec.positive_fraction < 1:
        raise ContractError("positive_fraction must lie in (0, 1)")
    if spec.signal_strength < 0 or spec.noise < 0:
        raise ContractError("signal_strength and noise must be non-negative")
    if spec.dim < 2:
        raise ContractError("dim must be >= 2")
    if spec.n_min < 1 or spec.n_min > spec.n_max:
        raise ContractError(f"invalid bag size range [{spec.n_min}, {spec.n_max}]")
    if spec.max_witnesses < 1:
        raise ContractError("max_witnesses must be >= 1")

    n_pos = round_half_up(spec.n_bags * exact_fraction(spec.positive_fraction))
    flags = np.zeros(spec.n_bags, dtype=bool)
    flags[:n_pos] = True
    flags = np.random.default_rng([spec.seed, 1]).permutation(flags)
    direction = signal_direction(spec.dim, spec.seed)

    bags, labels, witnesses = [], [], []
    for i, positive in enumerate(flags):
        rng = np.random.default_rng([spec.seed, 2, i])
        n = int(rng.integers(spec.n_min, spec.n_max + 1))
        matrix = rng.normal(0.0, spec.noise, size=(n, spec.dim))
        planted = np.zeros(0, dtype=np.int64)
        if positive:
            k = int(rng.integers(1, min(spec.max_witnesses, n) + 1))
            planted = np.sort(rng.choice(n, size=k, replace=False))
            matrix[planted] += spec.signal_strength * direction
        label = Label.EGFR_POS if positive else Label.EGFR_NEG
        coords = np.stack([(np.arange(n) % 16) * 256, (np.arange(n) // 16) * 256], axis=1)
        bags.append(EmbeddingBag(f"synth_{i:04d}", matrix, coords, label))
        labels.append(label)
        witnesses.append(planted)
    return SynthCohort(bags, labels, witnesses, direction)


def generate_bags(spec: SynthBagSpec = SynthBagSpec()) -> list[tuple[EmbeddingBag, Label]]:
    return generate_cohort(spec).pairs()


def cohort_manifest(bags: list[EmbeddingBag], labels: list[Label], suffix: str = ".ebag") -> SlideManifest:
    records = []
    neg = 0
    for bag, label in zip(bags, labels):
        if label == Label.EGFR_POS:
            variant = Variant.EGFR
        else:
            variant = _NEG_VARIANTS[neg % len(_NEG_VARIANTS)]
            neg += 1
        records.append(SlideRecord(bag.slide_id, f"{bag.slide_id}{suffix}", variant))
    return SlideManifest.from_records(records)


def write_bag_cohort(cohort: SynthCohort, out_dir) -> SlideManifest:
    """Write one ``.ebag`` per bag plus ``manifest.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for bag in cohort.bags:
        save_bag(bag, bag_path(out, bag.slide_id))
    manifest = cohort_manifest(cohort.bags, cohort.labels)
    (out / "manifest.csv").write_text(serialize_manifest(manifest), encoding="utf-8")
    return manifest


def write_slide_cohort(
    specs: list[SynthSlideSpec],
    labels: list[Label],
    out_dir,
    blank: tuple[int, ...] = (),
) -> SlideManifest:
    """Write synthetic slides (PNG) with ground-truth masks and a manifest.

    Indices listed in ``blank`` get an all-background slide.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    neg = 0
    for i, (spec, label) in enumerate(zip(specs, labels)):
        if i in blank:
            spec = SynthSlideSpec(**{**spec.__dict__, "n_blobs": 0})
        image, mask = generate_slide(spec)
        sid = f"slide_{i:04d}"
        write_image(image, out / f"{sid}.png")
        write_mask_png(mask, out / f"{sid}_mask.png")
        if label == Label.EGFR_POS:
            variant = Variant.EGFR
        else:
            variant = _NEG_VARIANTS[neg % len(_NEG_VARIANTS)]
            neg += 1
        records.append(SlideRecord(sid, f"{sid}.png", variant))
    manifest = SlideManifest.from_records(records)
    (out / "manifest.csv").write_text(serialize_manifest(manifest), encoding="utf-8")
    return manifest
