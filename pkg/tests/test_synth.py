import numpy as np
import pytest

from slide_mil.core import ContractError, Label, read_manifest
from slide_mil.encoder import load_bag
from slide_mil.preprocess import read_image, read_mask_png, segment_tissue, tissue_patches
from slide_mil.synth import (
    SynthBagSpec,
    SynthSlideSpec,
    generate_bags,
    generate_cohort,
    generate_slide,
    signal_direction,
    write_bag_cohort,
    write_slide_cohort,
)


def test_slide_is_deterministic_and_tissue_present():
    a_img, a_mask = generate_slide(SynthSlideSpec(seed=5))
    b_img, b_mask = generate_slide(SynthSlideSpec(seed=5))
    assert np.array_equal(a_img.pixels, b_img.pixels) and np.array_equal(a_mask.bits, b_mask.bits)
    assert 0.05 < a_mask.bits.mean() < 0.95
    assert not np.array_equal(a_img.pixels, generate_slide(SynthSlideSpec(seed=6))[0].pixels)


def test_blank_slide_has_no_tissue():
    img, mask = generate_slide(SynthSlideSpec(n_blobs=0, seed=1))
    assert not mask.bits.any() and not segment_tissue(img).bits.any()
    assert tissue_patches(img) == []


def test_slide_spec_validation():
    with pytest.raises(ContractError):
        generate_slide(SynthSlideSpec(width=100))


def test_cohort_structure():
    spec = SynthBagSpec(n_bags=30, dim=8, n_min=4, n_max=9, positive_fraction=0.4, seed=3)
    c = generate_cohort(spec)
    assert sum(lab == Label.EGFR_POS for lab in c.labels) == 12
    assert all(4 <= b.n <= 9 and b.dim == 8 for b in c.bags)
    for lab, w in zip(c.labels, c.witnesses):
        assert (1 <= len(w) <= 3) if lab == Label.EGFR_POS else len(w) == 0
    assert np.linalg.norm(c.direction) == pytest.approx(1.0)
    assert [b.slide_id for b, _ in generate_bags(spec)] == [b.slide_id for b in c.bags]


def test_witnesses_carry_the_signal():
    c = generate_cohort(SynthBagSpec(n_bags=40, signal_strength=6, seed=1))
    for bag, w in zip(c.bags, c.witnesses):
        proj = bag.matrix @ c.direction
        if len(w):
            assert proj[w].min() > np.delete(proj, w).mean() + 2


def test_zero_signal_matches_noise_only():
    c = generate_cohort(SynthBagSpec(n_bags=10, signal_strength=0, seed=4))
    d = generate_cohort(SynthBagSpec(n_bags=10, signal_strength=4, seed=4))
    for a, b, w in zip(c.bags, d.bags, d.witnesses):
        diff = np.flatnonzero(np.any(a.matrix != b.matrix, axis=1))
        assert diff.tolist() == w.tolist()


def test_cohort_validation():
    for bad in (dict(positive_fraction=1.0), dict(noise=-1), dict(n_min=5, n_max=3), dict(dim=1)):
        with pytest.raises(ContractError):
            generate_cohort(SynthBagSpec(**bad))


def test_signal_direction_unit_and_seeded():
    assert np.array_equal(signal_direction(16, 2), signal_direction(16, 2))
    assert np.linalg.norm(signal_direction(16, 2)) == pytest.approx(1.0)


def test_writers(tmp_path):
    c = generate_cohort(SynthBagSpec(n_bags=6, dim=4, n_min=2, n_max=3, seed=0))
    m = write_bag_cohort(c, tmp_path / "bags")
    assert read_manifest(tmp_path / "bags" / "manifest.csv") == m
    assert load_bag(tmp_path / "bags" / f"{c.bags[0].slide_id}.ebag").matrix.tobytes() == c.bags[0].matrix.tobytes()
    assert m.labels() == {b.slide_id: lab for b, lab in zip(c.bags, c.labels)}

    specs = [SynthSlideSpec(width=512, height=512, seed=i) for i in range(2)]
    sm = write_slide_cohort(specs, [Label.EGFR_POS, Label.EGFR_NEG], tmp_path / "slides", blank=(1,))
    img = read_image(tmp_path / "slides" / "slide_0000.png")
    assert np.array_equal(img.pixels, generate_slide(specs[0])[0].pixels)
    assert not read_mask_png(tmp_path / "slides" / "slide_0001_mask.png").bits.any()
    assert [r.variant.value for r in sm.records] == ["EGFR", "ALK"]
