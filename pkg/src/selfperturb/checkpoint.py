"""JSON checkpoint container: detector config, flat parameter arrays, seed record."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import __version__
from .detector import DetectorConfig, DetectorModel, param_shapes

CHECKPOINT_FORMAT = "selfperturb-detector"
CHECKPOINT_VERSION = 1


class CheckpointVersionError(ValueError):
    pass


def model_to_json(model: DetectorModel, metadata: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "tool_version": __version__,
        "config": model.cfg.to_json(),
        "init": dict(model.init),
        "params": {name: {"shape": list(p.shape), "data": p.ravel().tolist()}
                   for name, p in sorted(model.params.items())},
        "metadata": metadata or {},
    }


def dumps(model: DetectorModel, metadata: dict | None = None) -> str:
    # repr-exact floats keep save/load lossless and byte-stable
    return json.dumps(model_to_json(model, metadata), sort_keys=True, separators=(",", ":")) + "\n"


def save_checkpoint(model: DetectorModel, path, metadata: dict | None = None) -> None:
    Path(path).write_text(dumps(model, metadata))


def model_from_json(data: dict) -> tuple[DetectorModel, dict]:
    if data.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointVersionError(f"not a detector checkpoint (format {data.get('format')!r})")
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {data.get('version')!r}")
    cfg_data = dict(data["config"])
    cfg = DetectorConfig(**cfg_data)
    shapes = param_shapes(cfg)
    if set(shapes) != set(data["params"]):
        raise ValueError("checkpoint parameter names do not match its config")
    params = {}
    for name, shape in shapes.items():
        entry = data["params"][name]
        if tuple(entry["shape"]) != shape:
            raise ValueError(f"{name}: shape {entry['shape']} does not match config {shape}")
        params[name] = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
    return DetectorModel(cfg, params, dict(data.get("init", {}))), dict(data.get("metadata", {}))


def load_checkpoint(path) -> tuple[DetectorModel, dict]:
    with open(path) as fh:
        return model_from_json(json.load(fh))
