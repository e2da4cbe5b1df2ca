"""Point-wise, block-wise and mixed self-perturbations.

These imitate the sign-of-gradient noise of FGSM-style attacks: every
perturbed pixel moves by ``alpha * r`` where ``r`` is a random vector in
``{-1, +1}^3`` and ``alpha ~ U[0, eps/255]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import apply_perturbation, clip_perturbation

GRADIENT_MODES = ("point", "block", "mix")


@dataclass(frozen=True)
class GradientPerturbConfig:
    eps: float = 5.0
    mode: str | None = None  # None -> drawn uniformly per image
    block_side_range: tuple[int, int] = (2, 8)
    block_anchor_density: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.mode is not None and self.mode not in GRADIENT_MODES:
            raise ValueError(f"unknown gradient mode {self.mode!r}")
        lo, hi = self.block_side_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad block_side_range {self.block_side_range}")
        if not 0.0 <= self.block_anchor_density <= 1.0:
            raise ValueError("block_anchor_density must lie in [0, 1]")


def sample_direction_field(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=(height, width, 3)).astype(np.float64) * 2.0 - 1.0


def gen_pointwise(height: int, width: int, cfg: GradientPerturbConfig, rng: np.random.Generator) -> np.ndarray:
    directions = sample_direction_field(height, width, rng)
    alpha = rng.uniform(0.0, cfg.eps / 255.0, size=(height, width, 1))
    return clip_perturbation(alpha * directions, cfg.eps)


def gen_blockwise(height: int, width: int, cfg: GradientPerturbConfig, rng: np.random.Generator) -> np.ndarray:
    """Constant-valued squares centred on Bernoulli-scattered anchor pixels.

    Later anchors (row-major) overwrite earlier ones where blocks overlap.
    """
    directions = sample_direction_field(height, width, rng)
    anchors = np.argwhere(rng.random((height, width)) < cfg.block_anchor_density)
    lo, hi = cfg.block_side_range
    sides = rng.integers(lo, hi + 1, size=len(anchors))
    alphas = rng.uniform(0.0, cfg.eps / 255.0, size=len(anchors))

    field = np.zeros((height, width, 3))
    for (r, c), side, alpha in zip(anchors, sides, alphas):
        top, left = r - side // 2, c - side // 2
        field[max(top, 0) : top + side, max(left, 0) : left + side] = alpha * directions[r, c]
    return clip_perturbation(field, cfg.eps)


def gen_mix(height: int, width: int, cfg: GradientPerturbConfig, rng: np.random.Generator) -> np.ndarray:
    # the two parts are each clipped already; the sum is clipped once more
    total = gen_pointwise(height, width, cfg, rng) + gen_blockwise(height, width, cfg, rng)
    return clip_perturbation(total, cfg.eps)


_GENERATORS = {"point": gen_pointwise, "block": gen_blockwise, "mix": gen_mix}


def gradient_field(height: int, width: int, cfg: GradientPerturbConfig, rng: np.random.Generator):
    """Return ``(mode, field)``; the mode is drawn when ``cfg.mode`` is unset."""
    mode = cfg.mode if cfg.mode is not None else GRADIENT_MODES[int(rng.integers(len(GRADIENT_MODES)))]
    return mode, _GENERATORS[mode](height, width, cfg, rng)


def perturb_image_gradient(img: np.ndarray, cfg: GradientPerturbConfig, rng: np.random.Generator) -> np.ndarray:
    _, field = gradient_field(img.shape[0], img.shape[1], cfg, rng)
    return apply_perturbation(img, field)
