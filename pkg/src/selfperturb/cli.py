"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointVersionError, load_checkpoint
from .detector import ADV, REAL
from .evalkit import NOISE_REPRESENTATIONS, kmeans_noise
from .fixtures import FixtureSpec, gen_dataset
from .imaging import apply_perturbation, save_image
from .perturb_gan import GanPerturbConfig
from .perturb_gradient import GradientPerturbConfig
from .pipeline import (
    WORKERS_ENV,
    CrossSettings,
    default_workers,
    eval_report,
    list_noise,
    load_image_dir,
    perturb_many,
    read_noise,
    run_cross,
    run_stamp,
    score_samples,
    train_and_save,
    write_json,
    write_noise,
)
from .synth import CLI_MODES
from .training import ConfigError, RunConfig

log = logging.getLogger("selfperturb")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _ensure_writable_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {path}: {exc}") from exc
    return path


def _csv_list(text: str, conv=str) -> list:
    try:
        return [conv(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"bad list {text!r}: {exc}") from exc


def _load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_json(data)


# --- commands -------------------------------------------------------------

def cmd_synth_fixtures(args) -> int:
    out = _ensure_writable_dir(args.out)
    spec = FixtureSpec(side=args.side, texture_amplitude=args.texture_amplitude)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest = gen_dataset(args.count, spec, out, args.seed)
    config = {"count": args.count, "seed": args.seed, "spec": {k: v for k, v in asdict(spec).items() if k != "seed"}}
    write_json(out / "run.json", run_stamp("synth-fixtures", config))
    print(f"wrote {len(manifest['items'])} fixtures to {out}")
    return EXIT_OK


def cmd_perturb(args) -> int:
    if args.eps <= 0:
        raise UsageError("--eps must be positive")
    out = _ensure_writable_dir(args.out)
    ds = load_image_dir(args.in_dir, args.landmarks)
    grad_cfg = GradientPerturbConfig(eps=args.eps)
    gan_cfg = GanPerturbConfig()
    outcomes = perturb_many(ds.images, ds.landmarks, args.mode, args.eps, args.seed,
                            gan_cfg=gan_cfg, grad_cfg=grad_cfg, workers=args.workers)
    items, skipped = [], []
    for o in outcomes:  # single writer: all files are written here, in input order
        src = ds.paths[o.index]
        if o.skipped:
            log.warning("skipping %s: %s", src.name, o.reason)
            skipped.append({"source": src.name, "reason": o.reason})
            continue
        stem = out / src.stem
        save_image(apply_perturbation(ds.images[o.index], o.field), stem.with_suffix(".png"))
        raw, hdr = write_noise(o.field, stem, o.mode, o.eps)
        items.append({"source": src.name, "source_sha256": ds.sha256[o.index], "image": f"{src.stem}.png",
                      "noise": raw.name, "noise_header": hdr.name, "mode": o.mode, "eps": o.eps,
                      "index": o.index})
    config = {"mode": args.mode, "eps": args.eps, "seed": args.seed, "gan": _jsonable(asdict(gan_cfg)),
              "gradient": _jsonable(asdict(grad_cfg)), "in": str(args.in_dir),
              "landmarks": None if args.landmarks is None else str(args.landmarks)}
    write_json(out / "manifest.json", {"version": 1, "label": ADV, "config": config, "items": items,
                                       "skipped": skipped})
    write_json(out / "run.json", run_stamp("perturb", config))
    print(f"perturbed {len(items)} images, skipped {len(skipped)}")
    if not items:
        log.error("every image was skipped")
        return EXIT_RUNTIME
    return EXIT_OK


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    ds = load_image_dir(args.real, args.landmarks)
    side = ds.images.shape[1]
    if ds.images.shape[1] != ds.images.shape[2]:
        raise ConfigError("training images must be square")
    if side != cfg.detector.input_side:
        raise ConfigError(f"images are {side}px but detector.input_side is {cfg.detector.input_side}")
    _ensure_writable_dir(args.out)
    result = train_and_save(ds, cfg, args.out)
    first = np.mean([c["cls"] for c in result.curve if c["epoch"] == 0])
    last = np.mean([c["cls"] for c in result.curve if c["epoch"] == cfg.detector.epochs - 1])
    print(f"trained on {len(ds)} images: mean L_cls {first:.4f} (first epoch) -> {last:.4f} (last epoch)")
    return EXIT_OK


def _adv_tags(adv_dir: Path, paths) -> list[str]:
    manifest = adv_dir / "manifest.json"
    if not manifest.exists():
        return ["adv"] * len(paths)
    modes = {it["image"]: it["mode"] for it in json.loads(manifest.read_text()).get("items", [])}
    return [modes.get(p.name, "adv") for p in paths]


def cmd_eval(args) -> int:
    try:
        model, meta = load_checkpoint(args.model)
    except CheckpointVersionError as exc:
        raise ConfigError(str(exc)) from exc
    real = load_image_dir(args.real)
    adv = load_image_dir(args.adv)
    images = np.concatenate([real.images, adv.images])
    labels = np.concatenate([np.full(len(real), REAL), np.full(len(adv), ADV)])
    tags = ["real"] * len(real) + _adv_tags(Path(args.adv), adv.paths)
    samples = score_samples(model, images, labels, tags)

    trained = {it["sha256"] for it in meta.get("training_images", [])}
    overlap = sorted(p.name for p, h in zip(real.paths + adv.paths, real.sha256 + adv.sha256) if h in trained)
    if overlap:
        log.warning("%d evaluation images also appear in the training set", len(overlap))
    report = eval_report(samples, args.threshold, {
        "overlap": {"count": len(overlap), "images": overlap},
        "model": {"path": str(args.model), "tool_version": __version__},
        "version": __version__,
    })
    report_path = Path(args.report)
    _ensure_writable_dir(report_path.parent if str(report_path.parent) else ".")
    write_json(report_path, report)
    print(f"AUC {report['auc']:.4f}  accuracy@{args.threshold:g} {report[f'accuracy@{args.threshold:g}']:.4f}"
          f"  (n_real={report['n_real']}, n_adv={report['n_adv']})")
    return EXIT_OK


def cmd_cluster(args) -> int:
    dirs = _csv_list(args.noise_dirs)
    if not dirs:
        raise UsageError("--noise-dirs is empty")
    fields, tags = [], []
    names = [Path(d).name or str(d) for d in dirs]
    if len(set(names)) != len(names):
        names = [str(d) for d in dirs]
    for d, name in zip(dirs, names):
        files = list_noise(d)
        if not files:
            log.warning("no noise sidecars in %s", d)
        for f in files:
            fields.append(read_noise(f)[0])
            tags.append(name)
    if len(fields) < args.k:
        log.error("need at least K=%d noise files, found %d", args.k, len(fields))
        return EXIT_RUNTIME
    report = kmeans_noise(fields, tags, args.k, np.random.default_rng(args.seed), args.side,
                          args.representation, seed=args.seed)
    data = report.to_json()
    data["version"] = __version__
    data["noise_dirs"] = [str(d) for d in dirs]
    report_path = Path(args.report)
    _ensure_writable_dir(report_path.parent if str(report_path.parent) else ".")
    write_json(report_path, data)
    report_path.with_suffix(".txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_cross(args) -> int:
    base = _load_run_config(args.config)
    if args.epochs is not None:
        base = replace(base, detector=replace(base.detector, epochs=args.epochs))
    modes = _csv_list(args.modes)
    bad = [m for m in modes if m not in CLI_MODES]
    if bad:
        raise UsageError(f"unknown modes: {bad}")
    settings = CrossSettings(modes=modes, eps_list=_csv_list(args.eps_list, float), eps_mode=args.eps_mode,
                             train_count=args.train_count, test_count=args.test_count, fixture_side=args.side,
                             seed=args.seed, base=base)
    _ensure_writable_dir(args.workdir)
    mode_report, eps_report = run_cross(settings, args.workdir)
    for rep in (mode_report, eps_report):
        if rep is not None:
            print(rep.to_text(), end="")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfperturb", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"selfperturb {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-fixtures", help="write synthetic face fixtures with landmarks")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--texture-amplitude", type=float, default=FixtureSpec.texture_amplitude)
    s.set_defaults(func=cmd_synth_fixtures)

    s = sub.add_parser("perturb", help="self-perturb a directory of real images")
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=CLI_MODES, default="auto")
    s.add_argument("--eps", type=float, default=5.0, help="gradient-mode bound in 1/255 units")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--landmarks", default=None, help="landmark directory (default: next to each image)")
    s.add_argument("--workers", type=int, default=None, help=f"worker processes (default: ${WORKERS_ENV} or 1)")
    s.set_defaults(func=cmd_perturb)

    s = sub.add_parser("train", help="train a detector on real images only")
    s.add_argument("--real", required=True)
    s.add_argument("--config", default=None, help="run config JSON (with a version field)")
    s.add_argument("--out", required=True)
    s.add_argument("--landmarks", default=None)
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score real and adversarial directories")
    s.add_argument("--model", required=True)
    s.add_argument("--real", required=True)
    s.add_argument("--adv", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cluster", help="K-Means over noise sidecars, tagged by directory")
    s.add_argument("--noise-dirs", required=True, help="comma-separated directories")
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--side", type=int, default=32, help="area-downsampled side before clustering")
    s.add_argument("--representation", choices=NOISE_REPRESENTATIONS, default="coverage")
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("cross", help="cross-mode and cross-eps AUC matrices on fixtures")
    s.add_argument("--modes", default="point,block,mix,gc")
    s.add_argument("--eps-list", default="5,10")
    s.add_argument("--eps-mode", choices=CLI_MODES, default="auto")
    s.add_argument("--workdir", required=True)
    s.add_argument("--train-count", type=int, default=800)
    s.add_argument("--test-count", type=int, default=200)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--config", default=None)
    s.set_defaults(func=cmd_cross)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "workers", None) is None and args.command == "perturb":
            args.workers = default_workers()
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
