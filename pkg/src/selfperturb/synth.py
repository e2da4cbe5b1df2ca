"""Dispatch between the gradient-style and GC self-perturbations."""
from __future__ import annotations

import logging

import numpy as np

from .imaging import apply_perturbation
from .perturb_gan import DegenerateRegionError, GanPerturbConfig, gan_field
from .perturb_gradient import GRADIENT_MODES, GradientPerturbConfig, gradient_field

log = logging.getLogger(__name__)

ALL_MODES = GRADIENT_MODES + ("gc",)
CLI_MODES = ALL_MODES + ("auto",)


def _gc_field(img, landmarks, gan_cfg, rng):
    if landmarks is None:
        raise DegenerateRegionError("gc mode needs landmarks")
    return gan_field(img, landmarks, gan_cfg, rng)


def perturbation_field(img, landmarks, mode: str, eps: float, rng: np.random.Generator,
                       gan_cfg: GanPerturbConfig | None = None,
                       grad_cfg: GradientPerturbConfig | None = None):
    """Return ``(mode, eps, field)`` for one image.

    ``mode="auto"`` draws uniformly from point/block/mix/gc; when the GC
    draw has no usable region it falls back to a gradient mode. ``eps``
    applies to gradient modes; GC draws its own from ``gan_cfg.eps_range``.
    """
    gan_cfg = gan_cfg or GanPerturbConfig()
    grad_cfg = grad_cfg or GradientPerturbConfig()
    h, w = img.shape[:2]
    if mode == "auto":
        mode = ALL_MODES[int(rng.integers(len(ALL_MODES)))]
        if mode == "gc":
            try:
                return ("gc",) + _gc_field(img, landmarks, gan_cfg, rng)
            except DegenerateRegionError as exc:
                log.info("gc perturbation unavailable (%s); falling back to a gradient mode", exc)
                mode = GRADIENT_MODES[int(rng.integers(len(GRADIENT_MODES)))]
    if mode == "gc":
        return ("gc",) + _gc_field(img, landmarks, gan_cfg, rng)
    if mode not in GRADIENT_MODES:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    cfg = GradientPerturbConfig(eps=eps, mode=mode, block_side_range=grad_cfg.block_side_range,
                                block_anchor_density=grad_cfg.block_anchor_density)
    _, field = gradient_field(h, w, cfg, rng)
    return mode, eps, field


def self_perturb(img, landmarks, mode: str, eps: float, rng: np.random.Generator, **kwargs):
    """Return ``(perturbed_image, mode, eps)``."""
    used_mode, used_eps, field = perturbation_field(img, landmarks, mode, eps, rng, **kwargs)
    return apply_perturbation(img, field), used_mode, used_eps
