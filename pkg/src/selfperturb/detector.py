"""Small from-scratch convnet with a Max-Pooling Classifier head.

Four stride-2 3x3 conv+ReLU blocks (replicate padding) turn an ``S x S``
image into an ``N x N x d`` feature map, ``N = S / 16``. A linear head gives
two logits per cell (index 0 = adversarial, 1 = real). The image's logits
are those of its most adversarial cell, i.e. the cell maximising
``z[0] - z[1]``.

A second branch pools the feature map to a d-vector and feeds a 2-logit
linear head whose negative free energy passes through a 1->16->1 MLP; this
is the OOD score used by the uncertainty regulariser.

Everything runs in float64 with hand-written reverse-mode gradients.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, log_softmax, softmax

from . import ood

ADV, REAL = 0, 1
STEM_CHANNELS = {"raw": 3, "highpass": 3, "raw+highpass": 6}
INIT_SCHEME = "kaiming_uniform_fan_in"


class TrainingDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    input_side: int = 64
    channels: tuple[int, ...] = (8, 16, 32, 32)
    embed_dim: int = 32
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 5
    beta: float = 0.1
    pooling: str = "margin"  # "margin" or "per_class"
    ood_hidden: int = 16
    stem: str = "highpass"  # fixed input transform: "raw", "highpass" or "raw+highpass"
    highpass_scale: float = 51.0  # residual gain; 5/255 maps to 1.0
    highpass_clip: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.input_side % 16 or self.input_side < 32:
            raise ValueError("input_side must be a multiple of 16 giving N >= 2")
        if len(self.channels) != 4:
            raise ValueError("exactly four conv blocks are supported")
        if self.channels[-1] != self.embed_dim or self.embed_dim < 2:
            raise ValueError("embed_dim must equal the last channel width and be >= 2")
        if self.stem not in STEM_CHANNELS:
            raise ValueError(f"unknown stem {self.stem!r}")
        if self.pooling not in ("margin", "per_class"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0 or self.beta < 0:
            raise ValueError("invalid optimisation settings")

    @property
    def grid(self) -> int:
        return self.input_side // 16

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def param_shapes(cfg: DetectorConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = STEM_CHANNELS[cfg.stem]
    for k, c_out in enumerate(cfg.channels, start=1):
        shapes[f"conv{k}.weight"] = (c_out, 3, 3, c_in)
        shapes[f"conv{k}.bias"] = (c_out,)
        c_in = c_out
    d = cfg.embed_dim
    shapes["cls.weight"] = (2, d)
    shapes["cls.bias"] = (2,)
    shapes["ood.weight"] = (2, d)
    shapes["ood.bias"] = (2,)
    shapes["mlp1.weight"] = (cfg.ood_hidden, 1)
    shapes["mlp1.bias"] = (cfg.ood_hidden,)
    shapes["mlp2.weight"] = (1, cfg.ood_hidden)
    shapes["mlp2.bias"] = (1,)
    return shapes


@dataclass
class DetectorModel:
    cfg: DetectorConfig
    params: dict[str, np.ndarray]
    init: dict = field(default_factory=dict)

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def init_model(cfg: DetectorConfig) -> DetectorModel:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return DetectorModel(cfg, params, {"seed": cfg.seed, "scheme": INIT_SCHEME})


# --- convolution plumbing -------------------------------------------------

@lru_cache(maxsize=None)
def _conv_geometry(h: int, w: int):
    """Gather indices for a stride-2 3x3 conv with replicate padding.

    Returns ``(rows, cols, scatter)`` where ``scatter`` is a sparse
    ``(h*w, h2*w2*9)`` matrix summing column gradients back onto pixels.
    """
    h2, w2 = h // 2, w // 2
    rows = np.clip(2 * np.arange(h2)[:, None] + np.arange(3)[None, :] - 1, 0, h - 1)
    cols = np.clip(2 * np.arange(w2)[:, None] + np.arange(3)[None, :] - 1, 0, w - 1)
    flat = rows[:, None, :, None] * w + cols[None, :, None, :]  # (h2, w2, 3, 3)
    flat = flat.ravel()
    scatter = sp.csr_matrix(
        (np.ones(flat.size), (flat, np.arange(flat.size))), shape=(h * w, flat.size)
    )
    return rows, cols, scatter


def _im2col(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    rows, cols, _ = _conv_geometry(h, w)
    patches = x[:, rows[:, None, :, None], cols[None, :, None, :], :]  # (b, h2, w2, 3, 3, c)
    return patches.reshape(b * (h // 2) * (w // 2), 9 * c)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    b, h, w, c = shape
    _, _, scatter = _conv_geometry(h, w)
    # (b, h2*w2*9, c) -> (h2*w2*9, b*c)
    d = dcols.reshape(b, -1, c).transpose(1, 0, 2).reshape(-1, b * c)
    return np.asarray(scatter @ d).reshape(h, w, b, c).transpose(2, 0, 1, 3)


# --- forward ----------------------------------------------------------------

@dataclass
class PredictionScore:
    cell_logits: np.ndarray  # (N, N, 2)
    cell: tuple[int, int]  # selected cell (for per_class pooling: the adv-class argmax)
    logits: np.ndarray  # (2,)
    probs: np.ndarray  # S_cls
    label: int

    @property
    def adv_score(self) -> float:
        return float(self.probs[ADV])


def _as_batch(images, cfg: DetectorConfig) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (cfg.input_side, cfg.input_side, 3):
        raise ValueError(f"expected images of shape ({cfg.input_side}, {cfg.input_side}, 3), got {x.shape[1:]}")
    return x


def mpc_select(cell_logits: np.ndarray):
    """Pick the cell with the largest ``z[adv] - z[real]`` (first in row-major on ties).

    Accepts ``(N, N, 2)`` or a batch ``(B, N, N, 2)``; returns flat cell
    indices and the selected logits unchanged.
    """
    z = np.asarray(cell_logits, dtype=np.float64)
    single = z.ndim == 3
    if single:
        z = z[None]
    flat = z.reshape(z.shape[0], -1, 2)
    idx = np.argmax(flat[..., ADV] - flat[..., REAL], axis=1)
    chosen = flat[np.arange(flat.shape[0]), idx]
    if single:
        return int(idx[0]), chosen[0]
    return idx, chosen


def _pool_per_class(flat: np.ndarray):
    idx = np.argmax(flat, axis=1)  # (B, 2)
    chosen = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]
    return idx, chosen


def highpass_residual(x: np.ndarray, scale: float, clip: float) -> np.ndarray:
    """Truncated residual ``x - mean3x3(x)`` per channel (replicate borders).

    Smooth content (constant or linear ramps) maps to zero, so pixel-level
    noise dominates what the first conv layer sees.
    """
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = x.shape[1:3]
    box = sum(pad[:, i : i + h, j : j + w] for i in range(3) for j in range(3)) / 9.0
    return np.clip(scale * (x - box), -clip, clip)


def _stem(x: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    if cfg.stem == "raw":
        return x
    hp = highpass_residual(x, cfg.highpass_scale, cfg.highpass_clip)
    return hp if cfg.stem == "highpass" else np.concatenate([x, hp], axis=-1)


def _forward(model: DetectorModel, x: np.ndarray):
    p = model.params
    cache = []
    h = _stem(x, model.cfg)
    for k in range(1, 5):
        w = p[f"conv{k}.weight"]
        cols = _im2col(h)
        pre = cols @ w.reshape(w.shape[0], -1).T + p[f"conv{k}.bias"]
        b, hh, ww, _ = h.shape
        out = np.maximum(pre, 0.0).reshape(b, hh // 2, ww // 2, w.shape[0])
        cache.append((h.shape, cols, pre))
        h = out
    fmap = h  # (B, N, N, d)
    cell_logits = fmap @ p["cls.weight"].T + p["cls.bias"]
    flat = cell_logits.reshape(fmap.shape[0], -1, 2)
    if model.cfg.pooling == "margin":
        sel, logits = mpc_select(cell_logits)
    else:
        sel, logits = _pool_per_class(flat)
    return fmap, cell_logits, sel, logits, cache


def forward(model: DetectorModel, img: np.ndarray):
    """Return ``(feature_map, PredictionScore)`` for one image."""
    x = _as_batch(img, model.cfg)
    if x.shape[0] != 1:
        raise ValueError("forward takes a single image; use predict_batch for batches")
    fmap, cell_logits, sel, logits, _ = _forward(model, x)
    return fmap[0], _score(cell_logits[0], sel[0], logits[0])


def _score(cell_logits, sel, logits) -> PredictionScore:
    n = cell_logits.shape[0]
    flat_idx = int(sel if np.ndim(sel) == 0 else sel[ADV])
    probs = softmax(logits)
    # argmax returns the first index on ties, so a 50/50 split is labelled adversarial
    return PredictionScore(cell_logits, divmod(flat_idx, n), logits, probs, int(np.argmax(probs)))


def predict(model: DetectorModel, img: np.ndarray) -> PredictionScore:
    return forward(model, img)[1]


def predict_batch(model: DetectorModel, images, chunk: int = 64) -> list[PredictionScore]:
    x = _as_batch(images, model.cfg)
    out = []
    for start in range(0, len(x), chunk):
        _, cell_logits, sel, logits, _ = _forward(model, x[start : start + chunk])
        out.extend(_score(c, s, l) for c, s, l in zip(cell_logits, sel, logits))
    return out


def adv_scores(model: DetectorModel, images, chunk: int = 64) -> np.ndarray:
    """``S_cls[adv]`` for every image."""
    return np.array([s.adv_score for s in predict_batch(model, images, chunk)])


def pooled_features(model: DetectorModel, images, chunk: int = 64) -> np.ndarray:
    x = _as_batch(images, model.cfg)
    feats = [_forward(model, x[i : i + chunk])[0].mean(axis=(1, 2)) for i in range(0, len(x), chunk)]
    return np.concatenate(feats) if feats else np.zeros((0, model.cfg.embed_dim))


def cross_entropy(logits, labels) -> np.ndarray:
    """Per-sample ``-log softmax(logits)[label]`` evaluated in log space."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(labels).astype(int)
    return -log_softmax(logits, axis=-1)[np.arange(len(labels)), labels]


# --- loss and gradients -----------------------------------------------------

@dataclass
class LossBreakdown:
    total: float
    cls: float
    unc: float


def _loss_grad(model: DetectorModel, images, labels, outliers=None, beta: float | None = None,
                  scale: float = 1.0):
    cfg = model.cfg
    beta = cfg.beta if beta is None else beta
    p = model.params
    x = _as_batch(images, cfg)
    labels = np.asarray(labels).astype(int)
    bsz = x.shape[0]
    fmap, cell_logits, sel, logits, cache = _forward(model, x)
    grads = {k: np.zeros_like(v) for k, v in p.items()}

    ce = cross_entropy(logits, labels)
    cls_loss = float(ce.mean())
    dlogits = softmax(logits, axis=-1)
    dlogits[np.arange(bsz), labels] -= 1.0
    dlogits *= scale / bsz

    ncell = cell_logits.shape[1] * cell_logits.shape[2]
    dcell = np.zeros((bsz, ncell, 2))
    if cfg.pooling == "margin":
        dcell[np.arange(bsz), sel] = dlogits
    else:
        for k in range(2):
            dcell[np.arange(bsz), sel[:, k], k] = dlogits[:, k]
    dcell = dcell.reshape(cell_logits.shape)
    grads["cls.weight"] = np.einsum("bijk,bijd->kd", dcell, fmap)
    grads["cls.bias"] = dcell.sum(axis=(0, 1, 2))
    dfmap = dcell @ p["cls.weight"]

    unc_loss = 0.0
    real = labels == REAL
    if beta > 0 and outliers is not None and len(outliers) and real.any():
        samples = outliers.samples if isinstance(outliers, ood.VirtualOutlierSet) else np.asarray(outliers)
        pooled = fmap[real].mean(axis=(1, 2))
        feats = np.concatenate([samples, pooled])
        n_out, n_real = len(samples), len(pooled)

        f = ood.ood_logits(p, feats)  # (n, 2)
        t = -ood.energy_from_logits(f)  # logsumexp
        hid_pre = t[:, None] @ p["mlp1.weight"].T + p["mlp1.bias"]
        hid = np.maximum(hid_pre, 0.0)
        s = (hid @ p["mlp2.weight"].T + p["mlp2.bias"])[:, 0]
        s_out, s_real = s[:n_out], s[n_out:]
        unc_loss = ood.uncertainty_loss_from_scores(s_out, s_real)

        w = scale * beta
        ds = np.concatenate([-expit(-s_out) / n_out, expit(s_real) / n_real]) * w
        grads["mlp2.weight"] = ds[None, :] @ hid
        grads["mlp2.bias"] = np.array([ds.sum()])
        dhid = (ds[:, None] @ p["mlp2.weight"]) * (hid_pre > 0)
        grads["mlp1.weight"] = dhid.T @ t[:, None]
        grads["mlp1.bias"] = dhid.sum(axis=0)
        dt = dhid @ p["mlp1.weight"][:, 0]
        df = dt[:, None] * softmax(f, axis=-1)
        grads["ood.weight"] = df.T @ feats
        grads["ood.bias"] = df.sum(axis=0)
        dpooled = (df @ p["ood.weight"])[n_out:]
        n_grid = fmap.shape[1] * fmap.shape[2]
        dfmap[real] += dpooled[:, None, None, :] / n_grid

    dout = dfmap
    for k in range(4, 0, -1):
        in_shape, cols, pre = cache[k - 1]
        w = p[f"conv{k}.weight"]
        dpre = dout.reshape(-1, w.shape[0]) * (pre > 0)
        grads[f"conv{k}.weight"] = (dpre.T @ cols).reshape(w.shape)
        grads[f"conv{k}.bias"] = dpre.sum(axis=0)
        if k > 1:
            dout = _col2im(dpre @ w.reshape(w.shape[0], -1), in_shape)

    total = cls_loss + beta * unc_loss
    if not np.isfinite(total):
        raise TrainingDivergenceError(f"non-finite loss {total}")
    return LossBreakdown(total, cls_loss, unc_loss), grads, fmap.mean(axis=(1, 2))


def loss_and_grad(model: DetectorModel, images, labels, outliers=None, beta: float | None = None,
                  scale: float = 1.0):
    """Loss ``L_cls + beta * L_uncertainty`` and its exact gradient.

    ``outliers`` are virtual-outlier feature vectors (treated as constants).
    The uncertainty term uses the pooled features of the label-1 images in
    the batch and is skipped when ``beta == 0``, no outliers are given, or
    the batch holds no real image. Gradients reach the max-pooled logits
    only through the selected cell. ``scale`` multiplies the gradients.
    """
    losses, grads, _ = _loss_grad(model, images, labels, outliers, beta, scale)
    return losses, grads


def backward(model: DetectorModel, images, labels, outliers=None, beta: float | None = None):
    return loss_and_grad(model, images, labels, outliers, beta)[1]


# --- optimisation -----------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class OODState:
    """Online real-feature statistics feeding the uncertainty loss."""

    rng: np.random.Generator
    bank: ood.FeatureBank = field(default_factory=ood.FeatureBank)
    num_candidates: int = 1000
    keep: int = 20
    ridge: float = 1e-4
    gaussian: ood.GaussianModel | None = None

    def outliers(self, dim: int):
        """Refit the Gaussian on the bank and draw outliers; ``None`` during warm-up."""
        if len(self.bank) < dim + 1:
            return None
        self.gaussian = ood.fit_gaussian(self.bank.array(), self.ridge)
        return ood.sample_virtual_outliers(self.gaussian, self.rng, self.num_candidates, self.keep)


def train_step(model: DetectorModel, images, labels, ood_state: OODState | None, optimizer: Adam,
               beta: float | None = None):
    """One Adam step on ``L_cls + beta * L_uncertainty``; returns ``(model, LossBreakdown)``."""
    beta = model.cfg.beta if beta is None else beta
    labels = np.asarray(labels).astype(int)
    outliers = None
    if beta > 0 and ood_state is not None:
        outliers = ood_state.outliers(model.cfg.embed_dim)
    losses, grads, pooled = _loss_grad(model, images, labels, outliers, beta)
    if ood_state is not None:
        ood_state.bank.push(pooled[labels == REAL])
    optimizer.step(model.params, grads)
    if not all(np.isfinite(v).all() for v in model.params.values()):
        raise TrainingDivergenceError("non-finite parameter after update")
    return model, losses
