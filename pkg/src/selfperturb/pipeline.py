"""Dataset directories, noise sidecars, held-out scoring and experiment matrices.

Shared by the command-line entry points and the acceptance tests.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import save_checkpoint
from .detector import ADV, REAL, DetectorModel, adv_scores
from .evalkit import MatrixReport, ScoredSample, accuracy_at, auc, cross_matrix, eps_cross
from .fixtures import FixtureSpec, gen_dataset, sha256_file
from .imaging import apply_perturbation, landmark_path, load_image, load_landmarks, quantize
from .perturb_gan import DegenerateRegionError, GanPerturbConfig
from .perturb_gradient import GradientPerturbConfig
from .synth import perturbation_field
from .training import ConfigError, RunConfig, TrainResult, train_detector

log = logging.getLogger(__name__)

WORKERS_ENV = "SELFPERTURB_WORKERS"
NOISE_FORMAT = "selfperturb-noise"
NOISE_VERSION = 1
NOISE_SCALE = 1.0 / 32640.0  # 1/(255*128); int16 spans about +-1.004
EVAL_SCHEMA_VERSION = 1
HELDOUT_SALT = 0x7E57


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def run_stamp(command: str, config: dict) -> dict:
    return {"tool": "selfperturb", "version": __version__, "command": command, "config": config}


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# --- image directories --------------------------------------------------------

@dataclass
class ImageDataset:
    paths: list[Path]
    images: np.ndarray  # (n, H, W, 3)
    landmarks: list  # LandmarkSet or None per image
    sha256: list[str]

    def __len__(self) -> int:
        return len(self.paths)


def load_image_dir(directory, landmarks_dir=None) -> ImageDataset:
    """Load every ``*.png`` (sorted by name) plus sibling landmark files when present."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such directory: {directory}")
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise ValueError(f"no PNG images in {directory}")
    images, lms = [], []
    for p in paths:
        images.append(load_image(p))
        lp = landmark_path(p, landmarks_dir)
        lms.append(load_landmarks(lp) if lp.exists() else None)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images in {directory} differ in shape: {sorted(shapes)}")
    return ImageDataset(paths, np.stack(images), lms, [sha256_file(p) for p in paths])


# --- noise sidecars ------------------------------------------------------------

def write_noise(field_: np.ndarray, stem, mode: str, eps: float) -> tuple[Path, Path]:
    """Write ``<stem>.noise.raw`` (int16 LE) and its ``<stem>.noise.json`` header."""
    stem = Path(stem)
    raw_path = stem.with_name(stem.name + ".noise.raw")
    hdr_path = stem.with_name(stem.name + ".noise.json")
    q = np.rint(np.asarray(field_) / NOISE_SCALE)
    if np.abs(q).max(initial=0) > 32767:
        raise ValueError("noise exceeds the int16 sidecar range")
    raw_path.write_bytes(q.astype("<i2").tobytes())
    header = {"format": NOISE_FORMAT, "version": NOISE_VERSION, "dtype": "int16", "byteorder": "little",
              "shape": list(field_.shape), "scale": NOISE_SCALE, "mode": mode, "eps": float(eps)}
    write_json(hdr_path, header)
    return raw_path, hdr_path


def read_noise(raw_path) -> tuple[np.ndarray, dict]:
    raw_path = Path(raw_path)
    hdr_path = raw_path.with_name(raw_path.name[: -len(".raw")] + ".json")
    header = json.loads(hdr_path.read_text())
    if header.get("format") != NOISE_FORMAT or header.get("version") != NOISE_VERSION:
        raise ValueError(f"{hdr_path}: unsupported noise header")
    data = np.frombuffer(raw_path.read_bytes(), dtype="<i2").astype(np.float64)
    return data.reshape(header["shape"]) * header["scale"], header


def list_noise(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.noise.raw"))


# --- perturbation -------------------------------------------------------------

@dataclass
class PerturbOutcome:
    index: int
    mode: str | None
    eps: float | None
    field: np.ndarray | None
    reason: str = ""

    @property
    def skipped(self) -> bool:
        return self.field is None


def _perturb_one(task) -> PerturbOutcome:
    idx, img, lms, mode, eps, seed, salt, gan_cfg, grad_cfg = task
    rng = np.random.default_rng([seed, *salt, idx])
    try:
        used_mode, used_eps, f = perturbation_field(img, lms, mode, eps, rng, gan_cfg, grad_cfg)
    except DegenerateRegionError as exc:
        return PerturbOutcome(idx, None, None, None, str(exc))
    return PerturbOutcome(idx, used_mode, float(used_eps), f)


def perturb_many(images, landmarks, mode: str, eps: float, seed: int, salt: tuple = (),
                 gan_cfg: GanPerturbConfig | None = None, grad_cfg: GradientPerturbConfig | None = None,
                 workers: int | None = None) -> list[PerturbOutcome]:
    """Perturb each image with its own generator ``default_rng([seed, *salt, index])``.

    Results do not depend on ``workers``.
    """
    gan_cfg = gan_cfg or GanPerturbConfig()
    grad_cfg = grad_cfg or GradientPerturbConfig()
    workers = default_workers() if workers is None else workers
    landmarks = landmarks if landmarks is not None else [None] * len(images)
    tasks = [(i, images[i], landmarks[i], mode, eps, seed, tuple(salt), gan_cfg, grad_cfg)
             for i in range(len(images))]
    if workers <= 1 or len(tasks) < 2:
        return [_perturb_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_perturb_one, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


# --- held-out evaluation ----------------------------------------------------------

@dataclass
class LabelledSet:
    images: np.ndarray
    labels: np.ndarray
    tags: list[str]


def heldout_set(images, landmarks, mode: str, eps: float, seed: int,
                gan_cfg: GanPerturbConfig | None = None, grad_cfg: GradientPerturbConfig | None = None,
                workers: int | None = None) -> LabelledSet:
    """First half of the images stays real; the second half is perturbed and 8-bit quantized.

    Images without a usable GC region are dropped from the adversarial half.
    """
    images = np.asarray(images)
    half = len(images) // 2
    lms = list(landmarks) if landmarks is not None else [None] * len(images)
    outcomes = perturb_many(images[half:], lms[half:], mode, eps, seed, (HELDOUT_SALT,),
                            gan_cfg, grad_cfg, workers)
    adv, tags = [], []
    for o in outcomes:
        if o.skipped:
            log.info("held-out image %d skipped: %s", half + o.index, o.reason)
            continue
        adv.append(quantize(apply_perturbation(images[half + o.index], o.field)))
        tags.append(o.mode)
    if not adv:
        raise DegenerateRegionError(f"no held-out image could be perturbed with mode {mode!r}")
    x = np.concatenate([images[:half], np.stack(adv)])
    labels = np.concatenate([np.full(half, REAL), np.full(len(adv), ADV)])
    return LabelledSet(x, labels, ["real"] * half + tags)


def score_samples(model: DetectorModel, images, labels, tags) -> list[ScoredSample]:
    scores = adv_scores(model, images)
    return [ScoredSample(float(np.clip(s, 0.0, 1.0)), int(y), str(t)) for s, y, t in zip(scores, labels, tags)]


def eval_report(samples: list[ScoredSample], threshold: float = 0.5, extra: dict | None = None) -> dict:
    """Overall AUC and accuracy plus a per-source breakdown (each adversarial source against all reals)."""
    reals = [s for s in samples if s.true_label == REAL]
    per_source = []
    for src in sorted({s.source for s in samples}):
        group = [s for s in samples if s.source == src]
        is_adv = group[0].true_label == ADV
        per_source.append({
            "source": src,
            "label": group[0].true_label,
            "n": len(group),
            "accuracy": accuracy_at(group, threshold),
            "auc": auc(group + reals) if is_adv and reals else None,
        })
    report = {
        "schema_version": EVAL_SCHEMA_VERSION,
        "kind": "eval",
        "auc": auc(samples),
        f"accuracy@{threshold:g}": accuracy_at(samples, threshold),
        "threshold": threshold,
        "n_real": len(reals),
        "n_adv": len(samples) - len(reals),
        "per_source": per_source,
    }
    report.update(extra or {})
    return report


# --- training + experiment matrices --------------------------------------------------

def train_and_save(dataset: ImageDataset, cfg: RunConfig, out_dir) -> TrainResult:
    """Train, then write ``model.json``, ``curve.json``, ``config.json`` and ``run.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train_detector(dataset.images, dataset.landmarks, cfg)
    metadata = {
        "run_seed": cfg.seed,
        "training_images": [{"image": p.name, "sha256": h} for p, h in zip(dataset.paths, dataset.sha256)],
        "mode_counts": dict(sorted(result.mode_counts.items())),
    }
    save_checkpoint(result.model, out / "model.json", metadata)
    write_json(out / "curve.json", result.curve)
    write_json(out / "config.json", cfg.to_json())
    write_json(out / "run.json", run_stamp("train", cfg.to_json()))
    return result


def ensure_fixtures(directory, count: int, base_seed: int, spec: FixtureSpec) -> ImageDataset:
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        gen_dataset(count, spec, directory, base_seed)
    ds = load_image_dir(directory)
    if len(ds) != count:
        raise ValueError(f"{directory} holds {len(ds)} images, expected {count}")
    return ds


@dataclass
class CrossSettings:
    modes: list[str] = field(default_factory=lambda: ["point", "block", "mix", "gc"])
    eps_list: list[float] = field(default_factory=lambda: [5.0, 10.0])
    eps_mode: str = "auto"
    train_count: int = 800
    test_count: int = 200
    fixture_side: int = 64
    seed: int = 0
    base: RunConfig = field(default_factory=RunConfig)

    def to_json(self) -> dict:
        return {"modes": list(self.modes), "eps_list": [float(e) for e in self.eps_list],
                "eps_mode": self.eps_mode, "train_count": self.train_count, "test_count": self.test_count,
                "fixture_side": self.fixture_side, "seed": self.seed, "base": self.base.to_json()}


def run_cross(settings: CrossSettings, workdir) -> tuple[MatrixReport | None, MatrixReport | None]:
    """Train one detector per mode and per eps, score every test column, write matrix reports."""
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    spec = FixtureSpec(side=settings.fixture_side)
    train = ensure_fixtures(work / "fixtures" / "train", settings.train_count, settings.seed, spec)
    test = ensure_fixtures(work / "fixtures" / "test", settings.test_count, settings.seed + HELDOUT_SALT, spec)
    base = replace(settings.base, seed=settings.seed,
                   detector=replace(settings.base.detector, input_side=settings.fixture_side))
    write_json(work / "run.json", run_stamp("cross", settings.to_json()))

    models: dict[str, DetectorModel] = {}
    test_sets: dict[tuple, LabelledSet] = {}

    def model_for(key: str, cfg: RunConfig) -> DetectorModel:
        if key not in models:
            log.info("training %s", key)
            models[key] = train_and_save(train, cfg, work / "models" / key).model
        return models[key]

    def test_set(mode: str, eps: float) -> LabelledSet:
        if (mode, eps) not in test_sets:
            test_sets[(mode, eps)] = heldout_set(test.images, test.landmarks, mode, eps, settings.seed,
                                                 base.gan, replace(base.grad_cfg, eps=eps))
        return test_sets[(mode, eps)]

    def auc_of(model, ls: LabelledSet) -> float:
        return auc(score_samples(model, ls.images, ls.labels, ls.tags))

    mode_report = eps_report = None
    if settings.modes:
        mode_report = cross_matrix(
            settings.modes, settings.modes,
            lambda tr, te: auc_of(model_for(f"mode-{tr}", replace(base, perturb_mode=tr)), test_set(te, base.eps)))
        mode_report.extra.update({"eps": base.eps, "seed": settings.seed})
        mode_report.write(work / "mode_matrix")
    if settings.eps_list:
        eps_report = eps_cross(
            settings.eps_list, settings.eps_list,
            lambda tr, te: auc_of(model_for(f"eps-{tr:g}", replace(base, perturb_mode=settings.eps_mode, eps=tr)),
                                  test_set(settings.eps_mode, te)))
        eps_report.extra.update({"mode": settings.eps_mode, "seed": settings.seed})
        eps_report.write(work / "eps_matrix")
    return mode_report, eps_report
