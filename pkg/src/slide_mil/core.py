"""Cohort types and the slide manifest format."""

from __future__ import annotations

import csv
import enum
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, TextIO

MANIFEST_HEADER = ("slide_id", "image_uri", "variant", "magnification", "mpp")


class SlideMilError(Exception):
    """Base class for all errors raised by this package."""


class ManifestParseError(SlideMilError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(SlideMilError):
    pass


class ContractError(SlideMilError, ValueError):
    """A caller broke a documented precondition."""


class DataError(SlideMilError):
    pass


class FormatError(SlideMilError):
    """A binary container has the wrong magic, version or encoding."""


class TruncationError(FormatError):
    """Declared sizes disagree with the stream length."""


class Label(enum.IntEnum):
    EGFR_NEG = 0
    EGFR_POS = 1


class Variant(enum.Enum):
    EGFR = "EGFR"
    ALK = "ALK"
    ROS1 = "ROS1"
    TRIPLE_NEG = "TRIPLE_NEG"

    @property
    def label(self) -> Label:
        return Label.EGFR_POS if self is Variant.EGFR else Label.EGFR_NEG


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    image_uri: str
    variant: Variant
    magnification: float = 40.0
    microns_per_pixel: float = 0.23

    @property
    def label(self) -> Label:
        return self.variant.label


def round_half_up(x) -> int:
    return math.floor(Fraction(x) + Fraction(1, 2))


def exact_fraction(x: float) -> Fraction:
    """The decimal a user typed, not the nearest binary double (0.15 -> 3/20)."""
    return Fraction(repr(float(x)))


def _count(records: Iterable[SlideRecord]) -> dict[Label, int]:
    counts = Counter(r.label for r in records)
    return {lab: counts.get(lab, 0) for lab in Label}


@dataclass(frozen=True)
class SlideManifest:
    records: tuple[SlideRecord, ...] = ()
    class_counts: dict[Label, int] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Iterable[SlideRecord]) -> "SlideManifest":
        records = tuple(records)
        seen = set()
        for r in records:
            if not r.slide_id:
                raise ValidationError("empty slide_id")
            if r.slide_id in seen:
                raise ValidationError(f"duplicate slide_id {r.slide_id!r}")
            seen.add(r.slide_id)
        return cls(records, _count(records))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.slide_id for r in self.records]

    def labels(self) -> dict[str, Label]:
        return {r.slide_id: r.label for r in self.records}

    def subset(self, ids: Iterable[str]) -> "SlideManifest":
        keep = set(ids)
        return SlideManifest.from_records(r for r in self.records if r.slide_id in keep)


def _positive_decimal(text: str, name: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ManifestParseError(line, f"{name} is not a decimal: {text!r}") from None
    if not math.isfinite(value) or value <= 0:
        raise ManifestParseError(line, f"{name} must be positive, got {text!r}")
    return value


def parse_manifest(text: str | TextIO, format: str = "CSV") -> SlideManifest:
    """Parse a manifest CSV.

    Labels are derived from the variant column, never read. Line numbers in
    errors are 1-based and count the header as line 1.
    """
    if format.upper() != "CSV":
        raise ValueError(f"unsupported manifest format {format!r}")
    stream = io.StringIO(text) if isinstance(text, str) else text
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestParseError(1, "missing header") from None
    if tuple(h.strip() for h in header) != MANIFEST_HEADER:
        raise ManifestParseError(1, f"header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}")

    records = []
    seen: set[str] = set()
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestParseError(line, f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        slide_id, uri, variant, mag, mpp = (c.strip() for c in row)
        if not slide_id:
            raise ManifestParseError(line, "empty slide_id")
        try:
            var = Variant(variant)
        except ValueError:
            raise ValidationError(f"line {line}: unknown variant {variant!r}") from None
        if slide_id in seen:
            raise ValidationError(f"line {line}: duplicate slide_id {slide_id!r}")
        seen.add(slide_id)
        records.append(
            SlideRecord(
                slide_id,
                uri,
                var,
                _positive_decimal(mag, "magnification", line),
                _positive_decimal(mpp, "mpp", line),
            )
        )
    return SlideManifest.from_records(records)


def serialize_manifest(manifest: SlideManifest) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for r in manifest.records:
        writer.writerow([r.slide_id, r.image_uri, r.variant.value, repr(r.magnification), repr(r.microns_per_pixel)])
    return out.getvalue()


def read_manifest(path) -> SlideManifest:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_manifest(fh)


def validate_cohort(manifest: SlideManifest, exclusion: Iterable[str]) -> tuple[SlideManifest, list[str]]:
    """Drop excluded slides (e.g. multi-mutation cases).

    Returns the filtered manifest and a warning per exclusion ID that is not
    present in the manifest.
    """
    exclusion = list(exclusion)
    present = set(manifest.ids)
    warnings = [f"excluded slide_id {sid!r} not in manifest" for sid in exclusion if sid not in present]
    drop = set(exclusion)
    kept = SlideManifest.from_records(r for r in manifest.records if r.slide_id not in drop)
    return kept, warnings
