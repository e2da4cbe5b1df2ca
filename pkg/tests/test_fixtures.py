import json

import numpy as np
import pytest

from selfperturb.fixtures import (
    MIN_MARGIN,
    FixtureSpec,
    derive_seed,
    gen_dataset,
    gen_fixture,
    sha256_file,
)
from selfperturb.imaging import REGION_GROUPS, check_image, convex_hull, rasterize_hull, sobel_magnitude
from selfperturb.perturb_gan import DegenerateRegionError, GanPerturbConfig, select_high_freq_pixels


@pytest.mark.parametrize("side", [64, 256])
def test_regions_respect_margin(side):
    spec = FixtureSpec(side=side)
    spec.validate()
    for x0, y0, x1, y1 in spec.region_boxes().values():
        assert min(x0, y0) >= MIN_MARGIN and max(x1, y1) <= side - 1 - MIN_MARGIN


@pytest.mark.parametrize("side", [64, 256])
def test_fixture_invariants_and_texture_strength(side):
    for seed in range(10):
        img, lms = gen_fixture(FixtureSpec(side=side, seed=seed))
        check_image(img)
        lms.check_bounds(side, side)
        assert len(lms.points) == 68
        sob = sobel_magnitude(img)
        for g in REGION_GROUPS:
            mask = rasterize_hull(convex_hull(lms.group_points(g)), side, side)
            assert (sob[mask] >= 50).mean() >= 0.30


def test_landmarks_on_region_boundaries():
    spec = FixtureSpec(seed=3)
    _, lms = gen_fixture(spec)
    boxes = spec.region_boxes()
    for g in ("left_eye", "right_eye", "mouth"):
        x0, y0, x1, y1 = boxes[g]
        pts = lms.group_points(g)
        assert (pts[:, 0] >= x0 - 1e-9).all() and (pts[:, 0] <= x1 + 1e-9).all()
        assert (pts[:, 1] >= y0 - 1e-9).all() and (pts[:, 1] <= y1 + 1e-9).all()


def test_default_h_nonempty_and_inside_hulls():
    img, lms = gen_fixture(FixtureSpec(seed=5))
    h = select_high_freq_pixels(img, lms, GanPerturbConfig())
    union = np.zeros_like(h)
    for g in REGION_GROUPS:
        union |= rasterize_hull(convex_hull(lms.group_points(g)), 64, 64)
    assert h.any() and not (h & ~union).any()


def test_zero_amplitude_gives_empty_h():
    img, lms = gen_fixture(FixtureSpec(texture_amplitude=0.0, seed=2))
    assert not select_high_freq_pixels(img, lms, GanPerturbConfig()).any()


def test_zero_amplitude_gc_path_is_degenerate():
    from selfperturb.perturb_gan import gan_field

    img, lms = gen_fixture(FixtureSpec(texture_amplitude=0.0, seed=2))
    with pytest.raises(DegenerateRegionError):
        gan_field(img, lms, GanPerturbConfig(), np.random.default_rng(0))


def test_same_seed_same_fixture():
    a, la = gen_fixture(FixtureSpec(seed=9))
    b, lb = gen_fixture(FixtureSpec(seed=9))
    c, _ = gen_fixture(FixtureSpec(seed=10))
    assert np.array_equal(a, b) and np.array_equal(la.points, lb.points)
    assert not np.array_equal(a, c)


def test_derive_seed_distinct_across_bases():
    a = {derive_seed(1, i) for i in range(500)}
    b = {derive_seed(99, i) for i in range(500)}
    assert len(a) == 500 and not a & b


def test_empty_dataset_writes_nothing(tmp_path):
    out = tmp_path / "d"
    manifest = gen_dataset(0, FixtureSpec(), out, 7)
    assert manifest["items"] == []
    assert not any(out.iterdir())


def test_dataset_checksums_and_determinism(tmp_path):
    m = gen_dataset(100, FixtureSpec(), tmp_path / "a", 7)
    gen_dataset(100, FixtureSpec(), tmp_path / "b", 7)
    assert len(m["items"]) == 100
    disk = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert disk["version"] == 1 and disk["base_seed"] == 7
    for it in disk["items"]:
        assert sha256_file(tmp_path / "a" / it["image"]) == it["image_sha256"]
        assert sha256_file(tmp_path / "a" / it["landmarks"]) == it["landmarks_sha256"]
        assert it["seed"] == derive_seed(7, int(it["image"][5:10]))
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_bad_spec_rejected():
    with pytest.raises(ValueError):
        FixtureSpec(side=40).validate()
    with pytest.raises(ValueError):
        FixtureSpec(texture_amplitude=0.9).validate()
