"""Tissue segmentation and non-overlapping tile extraction for raster slides."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin

from .core import ContractError

TILE_SIZE = 256
DEFAULT_SAT_MIN = 0.08
DEFAULT_VAL_MAX = 0.95
DEFAULT_MIN_TISSUE_FRACTION = 0.5


@dataclass(frozen=True, eq=False)
class RasterImage:
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ContractError(f"expected (H, W, 3) uint8 pixels, got {px.shape} {px.dtype}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ContractError("image must be at least 1x1")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return self.width, self.height


@dataclass(frozen=True, eq=False)
class TissueMask:
    bits: np.ndarray  # (height, width) bool

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        return self.width, self.height


@dataclass(frozen=True)
class TileGrid:
    tile_size: int
    tiles: tuple[tuple[int, int], ...]
    source_dims: tuple[int, int]

    def __len__(self) -> int:
        return len(self.tiles)


@dataclass(frozen=True, eq=False)
class Patch:
    origin: tuple[int, int]
    pixels: np.ndarray  # (256, 256, 3) uint8
    tissue_fraction: float


def rgb_to_sv(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """HSV saturation and value channels in [0, 1] for an RGB uint8 array."""
    rgb = pixels.astype(np.float64)
    cmax = rgb.max(axis=-1)
    cmin = rgb.min(axis=-1)
    sat = np.zeros_like(cmax)
    np.divide(cmax - cmin, cmax, out=sat, where=cmax > 0)
    return sat, cmax / 255.0


def segment_tissue(
    image: RasterImage,
    sat_min: float = DEFAULT_SAT_MIN,
    val_max: float = DEFAULT_VAL_MAX,
) -> TissueMask:
    """Mark a pixel as tissue iff saturation > sat_min and value < val_max."""
    if not (0.0 <= sat_min <= 1.0 and 0.0 <= val_max <= 1.0):
        raise ContractError("sat_min and val_max must lie in [0, 1]")
    sat, val = rgb_to_sv(image.pixels)
    return TissueMask((sat > sat_min) & (val < val_max))


def build_tile_grid(dims: tuple[int, int], tile_size: int = TILE_SIZE) -> TileGrid:
    """All full tiles of a (width, height) raster in row-major order.

    Partial tiles at the right and bottom edges are dropped.
    """
    if tile_size < 1:
        raise ContractError("tile_size must be >= 1")
    width, height = dims
    cols, rows = width // tile_size, height // tile_size
    tiles = tuple((i * tile_size, j * tile_size) for j in range(rows) for i in range(cols))
    return TileGrid(tile_size, tiles, (width, height))


def _tile_fractions(grid: TileGrid, mask: TissueMask) -> np.ndarray:
    if mask.dims != grid.source_dims:
        raise ContractError(f"mask dims {mask.dims} != grid source dims {grid.source_dims}")
    if not grid.tiles:
        return np.zeros(0)
    t = grid.tile_size
    # integral image gives every tile sum in O(1)
    integral = np.zeros((mask.height + 1, mask.width + 1), dtype=np.int64)
    integral[1:, 1:] = mask.bits.cumsum(0, dtype=np.int64).cumsum(1)
    xy = np.asarray(grid.tiles, dtype=np.int64)
    x, y = xy[:, 0], xy[:, 1]
    counts = integral[y + t, x + t] - integral[y, x + t] - integral[y + t, x] + integral[y, x]
    return counts / float(t * t)


def filter_tiles(
    grid: TileGrid,
    mask: TissueMask,
    min_tissue_fraction: float = DEFAULT_MIN_TISSUE_FRACTION,
) -> TileGrid:
    if not 0.0 <= min_tissue_fraction <= 1.0:
        raise ContractError("min_tissue_fraction must lie in [0, 1]")
    fractions = _tile_fractions(grid, mask)
    kept = tuple(tile for tile, f in zip(grid.tiles, fractions) if f >= min_tissue_fraction)
    return TileGrid(grid.tile_size, kept, grid.source_dims)


def extract_patches(image: RasterImage, grid: TileGrid, mask: TissueMask) -> list[Patch]:
    t = grid.tile_size
    for x, y in grid.tiles:
        if x < 0 or y < 0 or x + t > image.width or y + t > image.height:
            raise ContractError(f"tile ({x}, {y}) lies outside image {image.dims}")
    fractions = _tile_fractions(grid, mask)
    return [
        Patch((x, y), image.pixels[y:y + t, x:x + t].copy(), float(f))
        for (x, y), f in zip(grid.tiles, fractions)
    ]


def tissue_patches(
    image: RasterImage,
    sat_min: float = DEFAULT_SAT_MIN,
    val_max: float = DEFAULT_VAL_MAX,
    min_tissue_fraction: float = DEFAULT_MIN_TISSUE_FRACTION,
    tile_size: int = TILE_SIZE,
) -> list[Patch]:
    """Segment, tile, filter and extract in one go."""
    mask = segment_tissue(image, sat_min, val_max)
    grid = filter_tiles(build_tile_grid(image.dims, tile_size), mask, min_tissue_fraction)
    return extract_patches(image, grid, mask)


def iou(a: TissueMask | np.ndarray, b: TissueMask | np.ndarray) -> float:
    a = a.bits if isinstance(a, TissueMask) else np.asarray(a, dtype=bool)
    b = b.bits if isinstance(b, TissueMask) else np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


# -- file formats -------------------------------------------------------------


def read_image(path) -> RasterImage:
    """Load a PNG or binary PPM (P6) as RGB."""
    with Image.open(path) as im:
        return RasterImage(np.asarray(im.convert("RGB"), dtype=np.uint8).copy())


def write_image(image: RasterImage, path) -> None:
    fmt = "PPM" if Path(path).suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(image.pixels, "RGB").save(path, format=fmt)


def write_mask_png(mask: TissueMask, path) -> None:
    Image.fromarray(np.where(mask.bits, 255, 0).astype(np.uint8), "L").save(path, format="PNG")


def read_mask_png(path) -> TissueMask:
    with Image.open(path) as im:
        return TissueMask(np.asarray(im.convert("L")) > 127)


def write_grid_csv(grid: TileGrid, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y"])
        writer.writerows(grid.tiles)


def read_grid_csv(path, dims: tuple[int, int], tile_size: int = TILE_SIZE) -> TileGrid:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return TileGrid(tile_size, tuple((int(r["x"]), int(r["y"])) for r in rows), tuple(dims))


class TissueSegmenter(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping RGB images to boolean tissue masks.

    Accepts :class:`RasterImage` objects or ``(H, W, 3)`` uint8 arrays and
    returns a list of ``(H, W)`` boolean arrays, so it can sit at the head of
    a pipeline.
    """

    def __init__(self, sat_min=DEFAULT_SAT_MIN, val_max=DEFAULT_VAL_MAX):
        self.sat_min = sat_min
        self.val_max = val_max

    def fit(self, X, y=None):
        if not (0.0 <= self.sat_min <= 1.0 and 0.0 <= self.val_max <= 1.0):
            raise ValueError("sat_min and val_max must lie in [0, 1]")
        return self

    def transform(self, X):
        out = []
        for img in X:
            if not isinstance(img, RasterImage):
                img = RasterImage(np.asarray(img, dtype=np.uint8))
            out.append(segment_tissue(img, self.sat_min, self.val_max).bits)
        return out
