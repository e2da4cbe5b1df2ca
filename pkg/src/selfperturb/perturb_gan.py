"""Gradient-colour patch self-perturbation for GAN-style artefacts.

Patches of smoothly interpolated colour offsets are stamped onto a random
subset of high-frequency pixels (strong Sobel response inside the eye, nose
and mouth hulls).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import (
    REGION_GROUPS,
    LandmarkSet,
    apply_perturbation,
    clip_perturbation,
    region_union_mask,
    sobel_magnitude,
)


class DegenerateRegionError(ValueError):
    """No usable high-frequency region for patch placement."""


@dataclass(frozen=True)
class GanPerturbConfig:
    eps_range: tuple[int, int] = (10, 70)
    gamma: float = 50.0
    subset_prob_range: tuple[float, float] = (0.016, 0.040)
    patch_side_range: tuple[int, int] = (2, 25)
    dominant_patch_prob: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        lo, hi = self.eps_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad eps_range {self.eps_range}")
        lo, hi = self.patch_side_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad patch_side_range {self.patch_side_range}")
        lo, hi = self.subset_prob_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"bad subset_prob_range {self.subset_prob_range}")
        if not 0.0 <= self.dominant_patch_prob <= 1.0:
            raise ValueError("dominant_patch_prob must lie in [0, 1]")


def select_high_freq_pixels(img: np.ndarray, landmarks: LandmarkSet, cfg: GanPerturbConfig) -> np.ndarray:
    """Pixels inside the facial-region hulls whose Sobel magnitude is >= gamma."""
    h, w = img.shape[:2]
    landmarks.check_bounds(h, w)
    union = region_union_mask(landmarks, h, w, REGION_GROUPS)
    if not union.any():
        raise DegenerateRegionError("landmark hulls cover no pixel centre")
    return union & (sobel_magnitude(img) >= cfg.gamma)


def gc_patch(height: int, width: int, c0, c1, theta: float, transpose: bool = False) -> np.ndarray:
    """Linear two-colour ramp along direction ``theta`` (radians, x right, y down).

    Each pixel is ``c0 + t * (c1 - c0)`` with ``t`` its projection onto the
    ramp axis rescaled to ``[0, 1]``.
    """
    c0 = np.asarray(c0, dtype=np.float64)
    c1 = np.asarray(c1, dtype=np.float64)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    proj = xs * np.cos(theta) + ys * np.sin(theta)
    span = proj.max() - proj.min()
    t = (proj - proj.min()) / span if span > 1e-12 else np.zeros_like(proj)
    patch = c0 + t[..., None] * (c1 - c0)
    return patch.transpose(1, 0, 2) if transpose else patch


def gen_gc_patch(eps: float, side_range, rng: np.random.Generator) -> np.ndarray:
    lo, hi = side_range
    h, w = rng.integers(lo, hi + 1, size=2)
    bound = eps / 255.0
    c0 = rng.uniform(-bound, bound, size=3)
    c1 = rng.uniform(-bound, bound, size=3)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    transpose = bool(rng.integers(2))
    return gc_patch(int(h), int(w), c0, c1, theta, transpose)


def _stamp(field: np.ndarray, patch: np.ndarray, r: int, c: int) -> None:
    ph, pw = patch.shape[:2]
    H, W = field.shape[:2]
    top, left = r - ph // 2, c - pw // 2
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + ph, H), min(left + pw, W)
    field[r0:r1, c0:c1] = patch[r0 - top : r1 - top, c0 - left : c1 - left]


def gan_field(img: np.ndarray, landmarks: LandmarkSet, cfg: GanPerturbConfig, rng: np.random.Generator):
    """Build the clipped patch field; returns ``(eps, field)``."""
    high_freq = select_high_freq_pixels(img, landmarks, cfg)
    candidates = np.argwhere(high_freq)
    if len(candidates) == 0:
        raise DegenerateRegionError("no pixel passes the high-frequency threshold")

    eps = int(rng.integers(cfg.eps_range[0], cfg.eps_range[1] + 1))
    prob = rng.uniform(*cfg.subset_prob_range)
    chosen = rng.random(len(candidates)) < prob
    if not chosen.any():
        # keep at least one patch so the output always differs from the input
        chosen[rng.integers(len(candidates))] = True
    anchors = candidates[chosen]

    field = np.zeros(img.shape, dtype=np.float64)
    dominant = gen_gc_patch(eps, cfg.patch_side_range, rng)
    for r, c in anchors:
        if rng.random() < cfg.dominant_patch_prob:
            patch = dominant
        else:
            patch = gen_gc_patch(eps, cfg.patch_side_range, rng)
        _stamp(field, patch, int(r), int(c))
    return eps, clip_perturbation(field, eps)


def perturb_image_gan(img: np.ndarray, landmarks: LandmarkSet, cfg: GanPerturbConfig, rng: np.random.Generator) -> np.ndarray:
    _, field = gan_field(img, landmarks, cfg, rng)
    return apply_perturbation(img, field)
