import colorsys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slide_mil.core import ContractError
from slide_mil.preprocess import (
    RasterImage,
    TileGrid,
    TissueMask,
    TissueSegmenter,
    build_tile_grid,
    extract_patches,
    filter_tiles,
    iou,
    read_grid_csv,
    read_image,
    read_mask_png,
    rgb_to_sv,
    segment_tissue,
    tissue_patches,
    write_grid_csv,
    write_image,
    write_mask_png,
)


def _image(colour, h=4, w=4):
    return RasterImage(np.full((h, w, 3), colour, dtype=np.uint8))


def test_hsv_matches_colorsys_oracle():
    s, v = rgb_to_sv(np.array([[180, 90, 160]], dtype=np.uint8))
    _, s_ref, v_ref = colorsys.rgb_to_hsv(180 / 255, 90 / 255, 160 / 255)
    assert s[0] == pytest.approx(s_ref, abs=1e-12) == pytest.approx(0.5)
    assert v[0] == pytest.approx(v_ref, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.tuples(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255)))
def test_segmentation_rule_against_colorsys(rgb):
    _, s, v = colorsys.rgb_to_hsv(*(c / 255 for c in rgb))
    expected = s > 0.08 and v < 0.95
    assert bool(segment_tissue(_image(rgb, 1, 1)).bits[0, 0]) == expected


def test_white_is_background_and_stain_is_tissue():
    assert not segment_tissue(_image((250, 250, 250))).bits.any()
    assert segment_tissue(_image((180, 90, 160))).bits.all()
    assert not segment_tissue(_image((0, 0, 0))).bits.any()  # black: zero saturation


def test_segment_rejects_bad_thresholds():
    with pytest.raises(ContractError):
        segment_tissue(_image((1, 2, 3)), sat_min=1.5)


def test_tile_grid_row_major_and_drops_partials():
    g = build_tile_grid((600, 300), 256)
    assert g.tiles == ((0, 0), (256, 0))
    assert build_tile_grid((255, 1000)).tiles == ()
    assert len(build_tile_grid((512, 512))) == 4


def test_filter_tiles_threshold_inclusive():
    bits = np.zeros((256, 512), dtype=bool)
    bits[:128, :256] = True  # exactly half of tile 0
    bits[:127, 256:] = True  # just under half of tile 1
    kept = filter_tiles(build_tile_grid((512, 256)), TissueMask(bits), 0.5)
    assert kept.tiles == ((0, 0),)


def test_filter_tiles_matches_brute_force(rng):
    bits = rng.random((300, 700)) < 0.5
    grid = build_tile_grid((700, 300), 64)
    mask = TissueMask(bits)
    kept = filter_tiles(grid, mask, 0.5)
    brute = tuple(t for t in grid.tiles if bits[t[1]:t[1] + 64, t[0]:t[0] + 64].mean() >= 0.5)
    assert kept.tiles == brute


def test_mask_grid_mismatch():
    with pytest.raises(ContractError):
        filter_tiles(build_tile_grid((512, 512)), TissueMask(np.zeros((256, 512), bool)))


def test_extract_patches_content_and_bounds(rng):
    px = rng.integers(0, 256, (300, 600, 3), dtype=np.uint8)
    img = RasterImage(px)
    mask = TissueMask(np.ones((300, 600), bool))
    patches = extract_patches(img, build_tile_grid(img.dims), mask)
    assert [p.origin for p in patches] == [(0, 0), (256, 0)]
    assert np.array_equal(patches[1].pixels, px[:256, 256:512])
    assert patches[0].tissue_fraction == 1.0
    bad = TileGrid(256, ((400, 0),), img.dims)
    with pytest.raises(ContractError):
        extract_patches(img, bad, mask)


def test_tissue_patches_blank_slide_is_empty():
    assert tissue_patches(_image((248, 248, 248), 512, 512)) == []


def test_iou():
    a = np.array([[1, 1, 0, 0]], bool)
    b = np.array([[0, 1, 1, 0]], bool)
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 1.0


def test_image_mask_grid_io(tmp_path, rng):
    img = RasterImage(rng.integers(0, 256, (20, 30, 3), dtype=np.uint8))
    for name in ("a.png", "a.ppm"):
        write_image(img, tmp_path / name)
        assert np.array_equal(read_image(tmp_path / name).pixels, img.pixels)
    mask = TissueMask(rng.random((20, 30)) < 0.3)
    write_mask_png(mask, tmp_path / "m.png")
    assert np.array_equal(read_mask_png(tmp_path / "m.png").bits, mask.bits)
    grid = build_tile_grid((1024, 512))
    write_grid_csv(grid, tmp_path / "g.csv")
    assert read_grid_csv(tmp_path / "g.csv", (1024, 512)) == grid


def test_raster_validation():
    with pytest.raises(ContractError):
        RasterImage(np.zeros((4, 4), np.uint8))
    with pytest.raises(ContractError):
        RasterImage(np.zeros((4, 4, 3), np.float32))


def test_tissue_segmenter_estimator():
    seg = TissueSegmenter(sat_min=0.1)
    assert seg.get_params() == {"sat_min": 0.1, "val_max": 0.95}
    out = seg.fit_transform([np.full((2, 2, 3), (180, 90, 160), np.uint8), _image((250, 250, 250))])
    assert out[0].all() and not out[1].any()
    with pytest.raises(ValueError):
        TissueSegmenter(val_max=2).fit([])
