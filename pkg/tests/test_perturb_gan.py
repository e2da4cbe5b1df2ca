import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import binary_dilation

from selfperturb import perturb_gan
from selfperturb.fixtures import FixtureSpec, gen_fixture
from selfperturb.imaging import LandmarkSet, region_union_mask, sobel_magnitude
from selfperturb.perturb_gan import (
    DegenerateRegionError,
    GanPerturbConfig,
    gan_field,
    gc_patch,
    gen_gc_patch,
    perturb_image_gan,
    select_high_freq_pixels,
)


def rng_(seed=0):
    return np.random.default_rng(seed)


# --- high-frequency selection ---------------------------------------------------------

def test_constant_image_has_empty_h(fixture_pairs):
    _, lms = fixture_pairs[0]
    h = select_high_freq_pixels(np.full((64, 64, 3), 0.4), lms, GanPerturbConfig())
    assert not h.any()


def test_h_nonempty_and_inside_hulls(fixture_pairs):
    for img, lms in fixture_pairs[:10]:
        h = select_high_freq_pixels(img, lms, GanPerturbConfig())
        union = region_union_mask(lms, 64, 64)
        assert h.any() and not (h & ~union).any()
        assert np.array_equal(h, union & (sobel_magnitude(img) >= 50))


def test_gamma_zero_rejected():
    with pytest.raises(ValueError):
        GanPerturbConfig(gamma=0)


def test_empty_hull_union_is_degenerate():
    # each group hull is a sliver between pixel centres, so the union covers no pixel
    pts = np.array([[0.2, 0.2], [0.8, 0.2], [0.5, 0.7]] * 4)
    groups = {g: [3 * k, 3 * k + 1, 3 * k + 2] for k, g in enumerate(("left_eye", "right_eye", "nose", "mouth"))}
    with pytest.raises(DegenerateRegionError):
        select_high_freq_pixels(np.zeros((16, 16, 3)), LandmarkSet(pts, groups), GanPerturbConfig())


# --- patches ----------------------------------------------------------------------------

def test_patch_constant_when_colours_equal():
    p = gc_patch(5, 7, [0.01, -0.02, 0.0], [0.01, -0.02, 0.0], 1.1)
    assert (p == p[0, 0]).all()


def test_patch_horizontal_ramp_closed_form():
    e = 0.05
    p = gc_patch(4, 9, [-e, 0, 0], [e, 0, 0], 0.0)
    assert np.allclose(p[:, 0, 0], -e) and np.allclose(p[:, -1, 0], e)
    assert np.allclose(p[0, :, 0], np.linspace(-e, e, 9))
    assert not p[..., 1:].any()


def test_patch_transpose():
    p = gc_patch(3, 5, [0, 0, 0], [1, 1, 1], 0.3)
    assert np.array_equal(gc_patch(3, 5, [0, 0, 0], [1, 1, 1], 0.3, transpose=True), p.transpose(1, 0, 2))


@settings(max_examples=60, deadline=None)
@given(st.integers(10, 70), st.integers(0, 2**32))
def test_patch_bounds_and_monotone(eps, seed):
    r = rng_(seed)
    p = gen_gc_patch(eps, (2, 25), r)
    assert 2 <= p.shape[0] <= 25 and 2 <= p.shape[1] <= 25
    assert np.abs(p).max() <= eps / 255 + 1e-15
    # ramp is linear along some axis: rows and columns are each monotone per channel
    for axis in (0, 1):
        d = np.diff(p, axis=axis)
        for ch in range(3):
            dc = d[..., ch]
            assert (dc >= -1e-15).all() or (dc <= 1e-15).all()


# --- full GC perturbation --------------------------------------------------------------------

def test_eps_bound_and_range(fixture_pairs):
    cfg = GanPerturbConfig()
    seen = []
    for i in range(200):
        img, lms = fixture_pairs[i % 50]
        eps, f = gan_field(img, lms, cfg, rng_(i))
        seen.append(eps)
        assert 10 <= eps <= 70 and float(eps).is_integer()
        assert np.abs(f).max() <= eps / 255
        assert np.abs(f).max() <= 70 / 255
    assert min(seen) < 20 and max(seen) > 60


def test_support_within_dilated_hulls_and_far_pixels_untouched(fixture_pairs):
    cfg = GanPerturbConfig()
    half = cfg.patch_side_range[1] // 2  # tight reach of a centred patch
    for i, (img, lms) in enumerate(fixture_pairs):
        out = perturb_image_gan(img, lms, cfg, rng_(i))
        union = region_union_mask(lms, 64, 64)
        allowed = binary_dilation(union, np.ones((2 * half + 1, 2 * half + 1), bool))
        changed = np.any(out != img, axis=-1)
        assert changed.any()
        assert not (changed & ~allowed).any()


def test_subset_size_expectation():
    # 1x1 patches make each anchor exactly one changed pixel, so the count is |H_s| ~ Binomial(|H|, p)
    img = np.zeros((64, 64, 3))
    yy, xx = np.mgrid[0:64, 0:64]
    img[((yy // 3) + (xx // 3)) % 2 == 1] = 0.6
    pts = np.array([[2, 2], [61, 2], [61, 61], [2, 61]] * 3, float)
    groups = {g: [0, 1, 2, 3] for g in ("left_eye", "right_eye", "nose", "mouth")}
    lms = LandmarkSet(pts, groups)
    n_h = int(select_high_freq_pixels(img, lms, GanPerturbConfig()).sum())
    assert n_h > 1000
    p = 0.016
    cfg = GanPerturbConfig(subset_prob_range=(p, p), patch_side_range=(1, 1), dominant_patch_prob=0.0)
    counts = [np.count_nonzero(np.any(gan_field(img, lms, cfg, rng_(s))[1] != 0, axis=-1)) for s in range(300)]
    mean, sd = np.mean(counts), np.sqrt(n_h * p * (1 - p) / len(counts))
    assert abs(mean - n_h * p) <= 4 * sd


def test_dominant_patch_mechanism(fixture_pairs, monkeypatch):
    calls = []
    real = perturb_gan.gen_gc_patch

    def counting(*a, **k):
        calls.append(1)
        return real(*a, **k)

    monkeypatch.setattr(perturb_gan, "gen_gc_patch", counting)
    img, lms = fixture_pairs[1]
    gan_field(img, lms, GanPerturbConfig(dominant_patch_prob=1.0), rng_(3))
    assert len(calls) == 1
    calls.clear()
    cfg = GanPerturbConfig(dominant_patch_prob=0.0, subset_prob_range=(0.04, 0.04))
    gan_field(img, lms, cfg, rng_(3))
    assert len(calls) > 2


def test_at_least_one_anchor(fixture_pairs):
    img, lms = fixture_pairs[2]
    cfg = GanPerturbConfig(subset_prob_range=(0.0, 0.0))
    _, f = gan_field(img, lms, cfg, rng_(0))
    assert f.any()


def test_determinism(fixture_pairs):
    img, lms = fixture_pairs[4]
    a = perturb_image_gan(img, lms, GanPerturbConfig(), rng_(11))
    assert np.array_equal(a, perturb_image_gan(img, lms, GanPerturbConfig(), rng_(11)))


def test_textureless_fixture_is_degenerate():
    img, lms = gen_fixture(FixtureSpec(texture_amplitude=0.0, seed=1))
    with pytest.raises(DegenerateRegionError):
        gan_field(img, lms, GanPerturbConfig(), rng_())


@pytest.mark.parametrize("kwargs", [{"eps_range": (0, 5)}, {"eps_range": (9, 3)}, {"patch_side_range": (0, 2)},
                                    {"subset_prob_range": (0.5, 0.1)}, {"dominant_patch_prob": 1.2}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        GanPerturbConfig(**kwargs)
