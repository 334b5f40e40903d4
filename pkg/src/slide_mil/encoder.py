"""Patch encoders and the ``.ebag`` embedding-bag container.

The container layout (all integers little-endian)::

    magic      4 bytes   b"EBAG"
    version    u16       1
    id_len     u16       byte length of slide_id
    slide_id   id_len    UTF-8
    n          u32       instance count
    dim        u32       embedding width
    reserved   u64       0
    coords     n * (u32 x, u32 y)
    matrix     n * dim * f32, row-major
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Optional

import numpy as np

from .core import ContractError, DataError, FormatError, Label, SlideMilError, TruncationError
from .preprocess import Patch

BAG_MAGIC = b"EBAG"
BAG_VERSION = 1
BAG_SUFFIX = ".ebag"
DEFAULT_DIM = 1536

_GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class EmptyBagError(SlideMilError):
    """A slide produced no tissue patches and cannot be classified."""


class EncoderKind(enum.Enum):
    STUB = "stub"
    PRECOMPUTED = "precomputed"


@dataclass(frozen=True)
class EncoderSpec:
    kind: EncoderKind = EncoderKind.STUB
    dim: int = DEFAULT_DIM
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ContractError("embedding dim must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ContractError("seed must fit in an unsigned 64-bit integer")


@dataclass(eq=False)
class EmbeddingBag:
    slide_id: str
    matrix: np.ndarray  # (n, dim) float32
    coords: np.ndarray  # (n, 2) int64
    label: Optional[Label] = None

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        if self.matrix.ndim != 2:
            raise ContractError("bag matrix must be two-dimensional")
        if self.matrix.shape[0] < 1 or self.matrix.shape[1] < 1:
            raise EmptyBagError(f"bag {self.slide_id!r} has shape {self.matrix.shape}")
        if self.coords.shape[0] != self.matrix.shape[0]:
            raise ContractError(f"{self.coords.shape[0]} coords for {self.matrix.shape[0]} rows")
        if not np.isfinite(self.matrix).all():
            raise DataError(f"bag {self.slide_id!r} contains non-finite values")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingBag):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and self.label == other.label
            and np.array_equal(self.coords, other.coords)
            and self.matrix.shape == other.matrix.shape
            and self.matrix.tobytes() == other.matrix.tobytes()
        )


# -- stub encoder ---------------------------------------------------------------


def splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of the splitmix64 generator started at ``seed``."""
    with np.errstate(over="ignore"):
        state = np.uint64(seed) + np.uint64(_GOLDEN_GAMMA) * np.arange(1, count + 1, dtype=np.uint64)
        z = state
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def content_hash(pixels: np.ndarray) -> int:
    """64-bit BLAKE2b digest of the raw row-major RGB bytes."""
    digest = hashlib.blake2b(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _unit_vector(patch: Patch, spec: EncoderSpec) -> np.ndarray:
    raw = splitmix64(content_hash(patch.pixels) ^ spec.seed, spec.dim)
    # top 53 bits -> uniform [-1, 1)
    vec = (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53 * 2.0 - 1.0
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec[0], norm = 1.0, 1.0
    return vec / norm


def _summary_offset(patch: Patch) -> np.ndarray:
    rgb = patch.pixels.reshape(-1, 3).astype(np.float64) / 255.0
    return np.concatenate([rgb.mean(axis=0), rgb.std(axis=0), [patch.tissue_fraction, 0.0]])


def stub_encode(patch: Patch, spec: EncoderSpec = EncoderSpec()) -> np.ndarray:
    """Deterministic stand-in for a foundation-model patch encoder.

    A content hash of the pixels, xor-ed with ``spec.seed``, seeds splitmix64;
    the resulting vector is scaled to unit norm and its first eight entries are
    shifted by colour statistics (mean RGB, std RGB, tissue fraction, 0) in
    [0, 1] units so that differently coloured patches separate linearly.
    """
    if spec.kind is not EncoderKind.STUB:
        raise ContractError("stub_encode requires an EncoderSpec of kind STUB")
    vec = _unit_vector(patch, spec)
    k = min(8, spec.dim)
    vec[:k] += _summary_offset(patch)[:k]
    return vec.astype(np.float32)


def encode_slide(
    patches: list[Patch],
    spec: EncoderSpec = EncoderSpec(),
    slide_id: str = "",
    label: Optional[Label] = None,
) -> EmbeddingBag:
    if not patches:
        raise EmptyBagError(f"slide {slide_id!r} has no tissue patches")
    matrix = np.stack([stub_encode(p, spec) for p in patches])
    coords = np.array([p.origin for p in patches], dtype=np.int64)
    return EmbeddingBag(slide_id, matrix, coords, label)


# -- container I/O --------------------------------------------------------------

_HEAD = struct.Struct("<4sHH")
_SIZES = struct.Struct("<IIQ")


def bag_to_bytes(bag: EmbeddingBag) -> bytes:
    sid = bag.slide_id.encode("utf-8")
    if len(sid) > 0xFFFF:
        raise ContractError("slide_id longer than 65535 bytes")
    if bag.coords.min(initial=0) < 0 or bag.coords.max(initial=0) > 0xFFFFFFFF:
        raise ContractError("tile coordinates must fit in u32")
    return b"".join(
        [
            _HEAD.pack(BAG_MAGIC, BAG_VERSION, len(sid)),
            sid,
            _SIZES.pack(bag.n, bag.dim, 0),
            bag.coords.astype("<u4").tobytes(),
            bag.matrix.astype("<f4").tobytes(),
        ]
    )


def write_bag(bag: EmbeddingBag, sink: BinaryIO) -> int:
    data = bag_to_bytes(bag)
    sink.write(data)
    return len(data)


def bag_from_bytes(data: bytes) -> EmbeddingBag:
    if len(data) < _HEAD.size:
        raise TruncationError("stream shorter than the fixed header")
    magic, version, id_len = _HEAD.unpack_from(data, 0)
    if magic != BAG_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {BAG_MAGIC!r}")
    if version != BAG_VERSION:
        raise FormatError(f"unsupported EBAG version {version}")
    off = _HEAD.size
    if len(data) < off + id_len + _SIZES.size:
        raise TruncationError("stream ends inside the header")
    try:
        slide_id = data[off:off + id_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"slide_id is not UTF-8: {exc}") from None
    off += id_len
    n, dim, _reserved = _SIZES.unpack_from(data, off)
    off += _SIZES.size
    expected = off + 8 * n + 4 * n * dim
    if len(data) != expected:
        raise TruncationError(f"declared n={n}, dim={dim} needs {expected} bytes, stream has {len(data)}")
    coords = np.frombuffer(data, dtype="<u4", count=2 * n, offset=off).reshape(n, 2)
    off += 8 * n
    matrix = np.frombuffer(data, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
    if not np.isfinite(matrix).all():
        raise DataError(f"bag {slide_id!r} contains non-finite values")
    return EmbeddingBag(slide_id, matrix.astype(np.float32), coords.astype(np.int64))


def read_bag(source: BinaryIO) -> EmbeddingBag:
    return bag_from_bytes(source.read())


def save_bag(bag: EmbeddingBag, path) -> int:
    with open(path, "wb") as fh:
        return write_bag(bag, fh)


def load_bag(path) -> EmbeddingBag:
    with open(path, "rb") as fh:
        return read_bag(fh)


def bag_path(directory, slide_id: str) -> Path:
    return Path(directory) / f"{slide_id}{BAG_SUFFIX}"


def load_precomputed(directory, slide_ids: Optional[Iterable[str]] = None) -> dict[str, EmbeddingBag]:
    """Load ``.ebag`` files from a directory, keyed by the slide_id in each header.

    With ``slide_ids`` given, only ``<slide_id>.ebag`` files are read and a
    missing file raises :class:`FileNotFoundError`.
    """
    if slide_ids is None:
        paths = sorted(Path(directory).glob(f"*{BAG_SUFFIX}"))
    else:
        paths = [bag_path(directory, sid) for sid in slide_ids]
    bags = {}
    for path in paths:
        bag = load_bag(path)
        if slide_ids is not None and bag.slide_id != path.stem:
            raise DataError(f"{path} holds slide_id {bag.slide_id!r}")
        if bag.slide_id in bags:
            raise DataError(f"slide_id {bag.slide_id!r} appears in more than one file")
        bags[bag.slide_id] = bag
    return bags


def bag_nbytes(slide_id: str, n: int, dim: int) -> int:
    return _HEAD.size + len(slide_id.encode("utf-8")) + _SIZES.size + 8 * n + 4 * n * dim


__all__ = [
    "EmbeddingBag",
    "EmptyBagError",
    "EncoderKind",
    "EncoderSpec",
    "bag_from_bytes",
    "bag_nbytes",
    "bag_to_bytes",
    "encode_slide",
    "load_bag",
    "load_precomputed",
    "read_bag",
    "save_bag",
    "splitmix64",
    "stub_encode",
    "write_bag",
]
