"""Detection metrics, noise clustering and train/test experiment matrices."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

REPORT_SCHEMA_VERSION = 1


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredSample:
    score: float  # S_cls[adv]
    true_label: int  # 0 adv, 1 real
    source: str = ""

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.true_label not in (0, 1):
            raise ValueError("true_label must be 0 (adv) or 1 (real)")


def _unpack(samples):
    scores = np.array([s.score for s in samples], dtype=np.float64)
    labels = np.array([s.true_label for s in samples], dtype=int)
    return scores, labels


def auc_from_scores(scores, is_adv) -> float:
    """Mann-Whitney AUC with adversarial samples as the positive class."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_adv, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one adversarial and one real sample")
    ranks = rankdata(scores)  # average ranks -> ties count 1/2
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(samples: Sequence[ScoredSample]) -> float:
    scores, labels = _unpack(samples)
    return auc_from_scores(scores, labels == 0)


def accuracy_at(samples: Sequence[ScoredSample], threshold: float = 0.5) -> float:
    """Fraction classified correctly when ``score >= threshold`` means adversarial."""
    scores, labels = _unpack(samples)
    if len(scores) == 0:
        raise UndefinedMetricError("no samples")
    predicted_adv = scores >= threshold
    return float(np.mean(predicted_adv == (labels == 0)))


# --- K-Means noise clustering ------------------------------------------------

NOISE_REPRESENTATIONS = ("coverage", "raw", "abs")


def downsample_area(field: np.ndarray, side: int) -> np.ndarray:
    """Area-mean downsample an ``(H, W, C)`` array to ``(side, side, C)``.

    Sides must divide evenly; this holds for the 16-multiple images here.
    """
    h, w, c = field.shape
    if h % side or w % side:
        raise ValueError(f"cannot area-downsample {h}x{w} to {side}x{side}")
    return field.reshape(side, h // side, side, w // side, c).mean(axis=(1, 3))


def noise_vector(field: np.ndarray, side: int = 32, representation: str = "coverage") -> np.ndarray:
    """Flatten a noise field for clustering.

    ``coverage`` area-averages the indicator of perturbed (nonzero) offsets,
    i.e. where and how densely noise was placed; ``raw`` and ``abs`` average
    the signed offsets or their magnitudes.
    """
    field = np.asarray(field, dtype=np.float64)
    if representation == "coverage":
        field = (field != 0.0).astype(np.float64)
    elif representation == "abs":
        field = np.abs(field)
    elif representation != "raw":
        raise ValueError(f"unknown representation {representation!r}")
    return downsample_area(field, side).ravel()


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_trace: list[float]
    iterations: int
    converged: bool

    @property
    def inertia(self) -> float:
        return self.inertia_trace[-1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: each step draws ``2 + floor(ln k)`` D^2-weighted candidates
    and keeps the one giving the lowest potential."""
    n = len(x)
    trials = 2 + int(np.log(k))
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            cands = rng.choice(n, size=trials, p=d2 / total)
        else:  # every point coincides with a centre already
            rest = np.setdiff1d(np.arange(n), chosen)
            cands = rng.choice(rest, size=1)
        cand_d2 = np.minimum(d2[None, :], _sq_dists(x, x[cands]).T)
        best = int(np.argmin(cand_d2.sum(axis=1)))
        chosen.append(int(cands[best]))
        d2 = cand_d2[best]
    return x[chosen].copy()


def kmeans(x, k: int, rng: np.random.Generator, max_iter: int = 300) -> KMeansResult:
    """k-means++ seeding then Lloyd iterations until the assignment is a fixpoint.

    ``inertia_trace[i]`` is the within-cluster sum of squares after the
    i-th assignment step. Empty clusters keep their previous centroid.
    """
    x = np.asarray(x, dtype=np.float64)
    if k < 1 or k > len(x):
        raise ValueError(f"K={k} must lie in [1, {len(x)}]")
    centroids = kmeans_pp_init(x, k, rng)
    labels = None
    trace: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        new_labels = np.argmin(d, axis=1)
        trace.append(float(((x - centroids[new_labels]) ** 2).sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return KMeansResult(centroids, labels, trace, it, converged)


@dataclass
class ClusterReport:
    k: int
    tags: list[str]
    counts: list[list[int]]  # counts[cluster][tag]
    inertia_trace: list[float]
    converged: bool
    representation: str
    downsample_side: int
    seed: int

    @property
    def composition(self) -> list[list[float]]:
        return [[c / sum(row) if sum(row) else 0.0 for c in row] for row in self.counts]

    @property
    def purity(self) -> float:
        total = sum(sum(row) for row in self.counts)
        return sum(max(row) for row in self.counts) / total

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "kind": "cluster",
            "k": self.k,
            "seed": self.seed,
            "representation": self.representation,
            "downsample_side": self.downsample_side,
            "tags": self.tags,
            "counts": self.counts,
            "composition": self.composition,
            "purity": self.purity,
            "inertia_trace": self.inertia_trace,
            "converged": self.converged,
        }

    def to_text(self) -> str:
        width = max(8, *(len(t) for t in self.tags))
        lines = [f"K-Means noise clustering  K={self.k}  purity={self.purity:.4f}",
                 "cluster " + " ".join(f"{t:>{width}}" for t in self.tags)]
        for j, row in enumerate(self.composition):
            lines.append(f"{j:>7} " + " ".join(f"{v:>{width}.3f}" for v in row))
        return "\n".join(lines) + "\n"


def kmeans_noise(noise_fields, tags: Sequence[str], k: int, rng: np.random.Generator,
                 downsample_side: int = 32, representation: str = "coverage", seed: int | None = None,
                 max_iter: int = 300) -> ClusterReport:
    if len(noise_fields) != len(tags):
        raise ValueError("need one tag per noise field")
    if k > len(noise_fields):
        raise ValueError(f"K={k} exceeds the number of noise fields ({len(noise_fields)})")
    x = np.stack([noise_vector(f, downsample_side, representation) for f in noise_fields])
    res = kmeans(x, k, rng, max_iter)
    tag_names = sorted(set(tags))
    tag_idx = {t: i for i, t in enumerate(tag_names)}
    counts = [[0] * len(tag_names) for _ in range(k)]
    for lab, tag in zip(res.labels, tags):
        counts[int(lab)][tag_idx[tag]] += 1
    return ClusterReport(k, tag_names, counts, res.inertia_trace, res.converged, representation,
                         downsample_side, -1 if seed is None else int(seed))


# --- experiment matrices -----------------------------------------------------

@dataclass
class MatrixReport:
    kind: str  # "mode" or "eps"
    metric: str
    train_keys: list[str]
    test_keys: list[str]
    values: list[list[float]]
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "kind": f"{self.kind}_matrix",
            "metric": self.metric,
            "train": self.train_keys,
            "test": self.test_keys,
            "values": self.values,
            **self.extra,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["train\\test"] + self.test_keys)
        for key, row in zip(self.train_keys, self.values):
            writer.writerow([key] + [f"{v:.6f}" for v in row])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(8, *(len(k) for k in self.train_keys + self.test_keys))
        lines = [f"{self.metric} ({self.kind}): rows = train, columns = test",
                 " " * width + " " + " ".join(f"{k:>{width}}" for k in self.test_keys)]
        for key, row in zip(self.train_keys, self.values):
            lines.append(f"{key:>{width}} " + " ".join(f"{v:>{width}.4f}" for v in row))
        return "\n".join(lines) + "\n"

    def write(self, stem) -> None:
        """Write ``<stem>.json``, ``<stem>.csv`` and ``<stem>.txt``."""
        from pathlib import Path

        stem = Path(stem)
        stem.with_suffix(".json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        stem.with_suffix(".csv").write_text(self.to_csv())
        stem.with_suffix(".txt").write_text(self.to_text())


def cross_matrix(train_modes: Sequence[str], test_modes: Sequence[str],
                 runner: Callable[[str, str], float], kind: str = "mode", metric: str = "auc") -> MatrixReport:
    """Evaluate ``runner(train, test)`` over the full grid.

    The runner is expected to cache its trained detectors so each train
    key trains once.
    """
    values = [[float(runner(tr, te)) for te in test_modes] for tr in train_modes]
    return MatrixReport(kind, metric, [str(m) for m in train_modes], [str(m) for m in test_modes], values)


def eps_cross(train_eps: Sequence[float], test_eps: Sequence[float],
              runner: Callable[[float, float], float], metric: str = "auc") -> MatrixReport:
    values = [[float(runner(tr, te)) for te in test_eps] for tr in train_eps]
    return MatrixReport("eps", metric, [_fmt_eps(e) for e in train_eps], [_fmt_eps(e) for e in test_eps], values)


def _fmt_eps(e: float) -> str:
    return f"{e:g}"
