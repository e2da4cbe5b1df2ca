"""Training loop: real/self-perturbed split, fresh noise every epoch.

Half of the real images (seeded shuffle) stay real with label 1; the other
half are re-perturbed at the start of each epoch and labelled 0.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .detector import (
    ADV,
    REAL,
    Adam,
    DetectorConfig,
    DetectorModel,
    OODState,
    init_model,
    train_step,
)
from .imaging import quantize
from .ood import FeatureBank
from .perturb_gan import GanPerturbConfig
from .perturb_gradient import GradientPerturbConfig
from .synth import CLI_MODES, perturbation_field

log = logging.getLogger(__name__)

RUN_CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    gan: GanPerturbConfig = field(default_factory=GanPerturbConfig)
    perturb_mode: str = "auto"
    eps: float = 5.0
    block_side_range: tuple[int, int] = (2, 8)
    block_anchor_density: float = 0.02
    ood_candidates: int = 1000
    ood_keep: int = 20
    ood_ridge: float = 1e-4
    bank_capacity: int = 1024
    quantize: bool = True  # snap perturbed training images to 8 bits, like saved PNGs
    seed: int = 0

    def __post_init__(self):
        if self.perturb_mode not in CLI_MODES:
            raise ConfigError(f"unknown perturb_mode {self.perturb_mode!r}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if not 1 <= self.ood_keep <= self.ood_candidates:
            raise ConfigError("need 1 <= ood_keep <= ood_candidates")

    @property
    def grad_cfg(self) -> GradientPerturbConfig:
        return GradientPerturbConfig(eps=self.eps, block_side_range=tuple(self.block_side_range),
                                     block_anchor_density=self.block_anchor_density)

    def to_json(self) -> dict:
        d = asdict(self)
        d["detector"] = self.detector.to_json()
        d["gan"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["gan"].items()}
        d["block_side_range"] = list(self.block_side_range)
        d["version"] = RUN_CONFIG_VERSION
        return d

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        data = dict(data)
        version = data.pop("version", None)
        if version != RUN_CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            det = data.pop("detector", {})
            _reject_unknown(det, DetectorConfig, "detector")
            gan = data.pop("gan", {})
            _reject_unknown(gan, GanPerturbConfig, "gan")
            gan = {k: tuple(v) if isinstance(v, list) else v for k, v in gan.items()}
            if "block_side_range" in data:
                data["block_side_range"] = tuple(data["block_side_range"])
            return cls(detector=DetectorConfig(**det), gan=GanPerturbConfig(**gan), **data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _reject_unknown(section: dict, klass, name: str) -> None:
    unknown = set(section) - {f.name for f in fields(klass)}
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")


@dataclass
class TrainResult:
    model: DetectorModel
    curve: list[dict]
    ood_state: OODState
    real_idx: np.ndarray
    perturbed_idx: np.ndarray
    mode_counts: dict


def split_real(n: int, seed: int):
    """Seeded 50/50 split into (kept-real indices, to-be-perturbed indices)."""
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    half = n // 2
    return np.sort(perm[:half]), np.sort(perm[half : 2 * half])


def perturb_epoch(images, landmarks, idx, cfg: RunConfig, epoch: int):
    out = np.empty((len(idx),) + images.shape[1:])
    modes = []
    for j, i in enumerate(idx):
        rng = np.random.default_rng([cfg.seed, epoch, int(i)])
        mode, _, fieldv = perturbation_field(images[i], landmarks[i] if landmarks is not None else None,
                                             cfg.perturb_mode, cfg.eps, rng, cfg.gan, cfg.grad_cfg)
        x = np.clip(images[i] + fieldv, 0.0, 1.0)
        out[j] = quantize(x) if cfg.quantize else x
        modes.append(mode)
    return out, modes


def train_detector(images, landmarks, cfg: RunConfig, progress=None) -> TrainResult:
    """Train from scratch on real images only (plus their self-perturbations)."""
    images = np.asarray(images, dtype=np.float64)
    dcfg = cfg.detector
    if len(images) < 2 * dcfg.batch_size:
        raise ConfigError(f"need at least {2 * dcfg.batch_size} real images, got {len(images)}")
    real_idx, pert_idx = split_real(len(images), cfg.seed)

    model = init_model(dcfg)
    opt = Adam(model.params, lr=dcfg.learning_rate)
    ood_state = OODState(rng=np.random.default_rng([cfg.seed, 0x00D]),
                         bank=FeatureBank(cfg.bank_capacity), num_candidates=cfg.ood_candidates,
                         keep=cfg.ood_keep, ridge=cfg.ood_ridge)
    curve: list[dict] = []
    mode_counts: dict[str, int] = {}
    step = 0
    for epoch in range(dcfg.epochs):
        adv, modes = perturb_epoch(images, landmarks, pert_idx, cfg, epoch)
        for m in modes:
            mode_counts[m] = mode_counts.get(m, 0) + 1
        x = np.concatenate([images[real_idx], adv])
        y = np.concatenate([np.full(len(real_idx), REAL), np.full(len(adv), ADV)])
        order = np.random.default_rng([cfg.seed, epoch, 0xBA7C]).permutation(len(x))
        for start in range(0, len(order), dcfg.batch_size):
            batch = order[start : start + dcfg.batch_size]
            _, losses = train_step(model, x[batch], y[batch], ood_state, opt, dcfg.beta)
            curve.append({"epoch": epoch, "step": step, "total": losses.total,
                          "cls": losses.cls, "unc": losses.unc})
            step += 1
        if progress:
            progress(epoch, curve)
        ep = [c["cls"] for c in curve if c["epoch"] == epoch]
        log.info("epoch %d: mean L_cls %.4f", epoch, float(np.mean(ep)))
    return TrainResult(model, curve, ood_state, real_idx, pert_idx, mode_counts)
