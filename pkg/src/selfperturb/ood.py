"""Gaussian feature model, virtual outliers and the energy-based uncertainty loss.

Real-face features (spatially pooled embeddings) are modelled as one
multivariate Gaussian. Virtual outliers are the lowest-density draws from
that Gaussian. The uncertainty loss pushes an MLP-calibrated negative-energy
score up on outliers and down on real features.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianModel:
    mean: np.ndarray
    cov: np.ndarray  # ridge already added
    chol: np.ndarray  # lower Cholesky factor of cov
    count: int
    ridge: float
    underdetermined: bool = False  # fewer than d+1 samples: covariance is mostly ridge

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def log_det(self) -> float:
        return float(2.0 * np.log(np.diag(self.chol)).sum())

    def mahalanobis_sq(self, v: np.ndarray) -> np.ndarray:
        diff = np.atleast_2d(np.asarray(v, dtype=np.float64)) - self.mean
        z = solve_triangular(self.chol, diff.T, lower=True)
        return (z * z).sum(axis=0)

    def to_json(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "count": self.count,
            "ridge": self.ridge,
        }

    @classmethod
    def from_json(cls, data: dict) -> "GaussianModel":
        cov = np.asarray(data["cov"], dtype=np.float64)
        mean = np.asarray(data["mean"], dtype=np.float64)
        return cls(mean, cov, np.linalg.cholesky(cov), int(data["count"]), float(data["ridge"]),
                   int(data["count"]) < mean.shape[0] + 1)


def fit_gaussian(features, ridge: float = 1e-4) -> GaussianModel:
    """Sample mean and unbiased covariance plus ``ridge * I``."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientDataError("need at least 2 feature vectors to fit a Gaussian")
    n, d = x.shape
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / (n - 1)
    cov = 0.5 * (cov + cov.T) + ridge * np.eye(d)
    return GaussianModel(mean, cov, np.linalg.cholesky(cov), n, ridge, n < d + 1)


def log_density(g: GaussianModel, v) -> np.ndarray | float:
    """Exact multivariate normal log-density (vectorised over rows of ``v``)."""
    out = -0.5 * (g.dim * LOG_2PI + g.log_det + g.mahalanobis_sq(v))
    return float(out[0]) if np.ndim(v) == 1 else out


@dataclass(frozen=True)
class VirtualOutlierSet:
    samples: np.ndarray  # (t, d)
    log_densities: np.ndarray
    cutoff: float  # t-th smallest candidate log-density
    source_mean: np.ndarray

    def __len__(self) -> int:
        return len(self.samples)


def sample_virtual_outliers(g: GaussianModel, rng: np.random.Generator,
                            num_candidates: int = 1000, keep: int = 20) -> VirtualOutlierSet:
    """Draw candidates from ``g`` and keep the ``keep`` least likely ones."""
    if not 1 <= keep <= num_candidates:
        raise ValueError("need 1 <= keep <= num_candidates")
    z = rng.standard_normal((num_candidates, g.dim))
    cands = g.mean + z @ g.chol.T
    logp = log_density(g, cands)
    order = np.argsort(logp, kind="stable")[:keep]
    return VirtualOutlierSet(cands[order], logp[order], float(logp[order[-1]]), g.mean.copy())


class FeatureBank:
    """Bounded FIFO of pooled real-face features."""

    def __init__(self, capacity: int = 1024):
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def push(self, features) -> None:
        for row in np.atleast_2d(np.asarray(features, dtype=np.float64)):
            self._items.append(row.copy())

    def __len__(self) -> int:
        return len(self._items)

    def array(self) -> np.ndarray:
        return np.array(self._items)


def ood_logits(params: dict, features) -> np.ndarray:
    return np.atleast_2d(features) @ params["ood.weight"].T + params["ood.bias"]


def energy_from_logits(logits) -> np.ndarray:
    return -logsumexp(np.asarray(logits, dtype=np.float64), axis=-1)


def energy(model, feature) -> np.ndarray | float:
    """Free energy ``-logsumexp`` of the OOD linear head."""
    e = energy_from_logits(ood_logits(model.params, feature))
    return float(e[0]) if np.ndim(feature) == 1 else e


def mlp_score(params: dict, t) -> np.ndarray:
    """The scalar MLP (1 -> hidden -> 1, ReLU) applied elementwise."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    hidden = np.maximum(t @ params["mlp1.weight"].T + params["mlp1.bias"], 0.0)
    return (hidden @ params["mlp2.weight"].T + params["mlp2.bias"])[:, 0]


def ood_score(model, features) -> np.ndarray:
    """OOD score ``phi(-E(u))``; high means outlier-like."""
    return mlp_score(model.params, -energy_from_logits(ood_logits(model.params, features)))


def softplus(x) -> np.ndarray:
    return np.logaddexp(0.0, x)


def uncertainty_loss_from_scores(outlier_scores, real_scores) -> float:
    return float(softplus(-np.asarray(outlier_scores)).mean() + softplus(np.asarray(real_scores)).mean())


def uncertainty_loss(model, real_features, outliers) -> float:
    samples = outliers.samples if isinstance(outliers, VirtualOutlierSet) else outliers
    if len(samples) == 0 or len(real_features) == 0:
        raise ValueError("uncertainty loss needs outliers and real features")
    return uncertainty_loss_from_scores(ood_score(model, samples), ood_score(model, real_features))


def combined_loss(cls_loss: float, unc_loss: float, beta: float) -> float:
    return cls_loss + beta * unc_loss
