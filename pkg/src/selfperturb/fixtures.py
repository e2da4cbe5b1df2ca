"""Synthetic stand-in faces with known landmarks.

A fixture is a smooth two-colour diagonal gradient with a few faint blobs,
plus high-contrast stripe/checker textures at canonical eye, nose and mouth
positions. Landmarks follow dlib-68 indexing so the GC perturbation runs
unchanged on fixtures and on real aligned faces.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .imaging import LandmarkSet, check_image, save_image, save_landmarks

MANIFEST_VERSION = 1

# (centre x, centre y, width, height) as fractions of the side
CANONICAL_REGIONS = {
    "left_eye": (0.32, 0.38, 0.22, 0.10),
    "right_eye": (0.68, 0.38, 0.22, 0.10),
    "nose": (0.50, 0.56, 0.14, 0.18),
    "mouth": (0.50, 0.76, 0.34, 0.10),
}
MIN_MARGIN = 4


@dataclass(frozen=True)
class FixtureSpec:
    side: int = 64
    texture_amplitude: float = 0.12
    blob_count: int = 3
    blob_amplitude: float = 0.04
    seed: int = 0

    def region_boxes(self) -> dict[str, tuple[int, int, int, int]]:
        """Inclusive pixel boxes ``(x0, y0, x1, y1)`` for each textured region."""
        boxes = {}
        s = self.side
        for name, (cx, cy, w, h) in CANONICAL_REGIONS.items():
            pw, ph = max(int(round(w * s)), 3), max(int(round(h * s)), 3)
            x0 = int(round(cx * s - pw / 2))
            y0 = int(round(cy * s - ph / 2))
            boxes[name] = (x0, y0, x0 + pw - 1, y0 + ph - 1)
        return boxes

    def validate(self) -> None:
        if self.side < 16 or self.side % 16:
            raise ValueError("fixture side must be a multiple of 16")
        if self.texture_amplitude < 0 or self.texture_amplitude > 0.5:
            raise ValueError("texture_amplitude must lie in [0, 0.5]")
        for name, (x0, y0, x1, y1) in self.region_boxes().items():
            if min(x0, y0) < MIN_MARGIN or max(x1, y1) > self.side - 1 - MIN_MARGIN:
                raise ValueError(f"region {name} violates the {MIN_MARGIN}px margin at side {self.side}")


def _texture(kind: str, period: int, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    half = 2 if period == 4 else 1
    on_x = (xs % period) < half
    on_y = (ys % period) < half
    if kind == "stripes_v":
        pattern = on_x
    elif kind == "stripes_h":
        pattern = on_y
    else:
        pattern = on_x ^ on_y
    return pattern.astype(np.float64) - 0.5


def _landmark_points(boxes) -> np.ndarray:
    pts = np.zeros((68, 2))

    x0, y0, x1, y1 = boxes["mouth"]
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    # jaw 0-16 and brows 17-26 only need to sit somewhere plausible
    lx0, _, _, ly1 = boxes["left_eye"]
    _, _, rx1, _ = boxes["right_eye"]
    ang = np.linspace(np.pi, 0.0, 17)
    pts[0:17, 0] = cx + (rx1 - lx0) / 2 * np.cos(ang)
    pts[0:17, 1] = ly1 + (y1 + 2 - ly1) * np.sin(ang)
    for start, name in ((17, "left_eye"), (22, "right_eye")):
        ex0, ey0, ex1, _ = boxes[name]
        pts[start : start + 5, 0] = np.linspace(ex0, ex1, 5)
        pts[start : start + 5, 1] = ey0 - 2

    # eyes: hexagon on the box boundary, dlib order (outer corner, top, inner, bottom)
    for start, name in ((36, "left_eye"), (42, "right_eye")):
        ex0, ey0, ex1, ey1 = boxes[name]
        w, ym = ex1 - ex0, (ey0 + ey1) / 2
        pts[start : start + 6] = [
            (ex0, ym), (ex0 + w / 3, ey0), (ex0 + 2 * w / 3, ey0),
            (ex1, ym), (ex0 + 2 * w / 3, ey1), (ex0 + w / 3, ey1),
        ]

    # nose: bridge 27-30 down the centre line, nostrils 31-35 along the bottom
    nx0, ny0, nx1, ny1 = boxes["nose"]
    ncx = (nx0 + nx1) / 2
    pts[27:31, 0] = ncx
    pts[27:31, 1] = np.linspace(ny0, ny0 + 0.75 * (ny1 - ny0), 4)
    pts[31:36, 0] = np.linspace(nx0, nx1, 5)
    pts[31:36, 1] = ny1

    # mouth: 12 outer points on the box-inscribed ellipse, 8 inner points
    a, b = (x1 - x0) / 2, (y1 - y0) / 2
    outer = np.linspace(np.pi, -np.pi, 12, endpoint=False)
    pts[48:60, 0] = cx + a * np.cos(outer)
    pts[48:60, 1] = cy + b * np.sin(outer)
    inner = np.linspace(np.pi, -np.pi, 8, endpoint=False)
    pts[60:68, 0] = cx + 0.6 * a * np.cos(inner)
    pts[60:68, 1] = cy + 0.5 * b * np.sin(inner)
    return pts


def gen_fixture(spec: FixtureSpec):
    """Return ``(image, landmarks)`` for one synthetic face."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    s = spec.side

    ca = rng.uniform(0.3, 0.7, size=3)
    cb = rng.uniform(0.3, 0.7, size=3)
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    t = (xs + ys) / (2.0 * (s - 1))
    img = ca + t[..., None] * (cb - ca)
    for _ in range(spec.blob_count):
        bx, by = rng.uniform(0, s, size=2)
        sigma = rng.uniform(0.1, 0.3) * s
        amp = rng.uniform(-spec.blob_amplitude, spec.blob_amplitude, size=3)
        img += np.exp(-((xs - bx) ** 2 + (ys - by) ** 2) / (2 * sigma**2))[..., None] * amp

    boxes = spec.region_boxes()
    for name in CANONICAL_REGIONS:
        x0, y0, x1, y1 = boxes[name]
        kind = ("checker", "stripes_h", "stripes_v")[int(rng.integers(3))]
        period = int(rng.integers(3, 5))
        tex = _texture(kind, period, y1 - y0 + 1, x1 - x0 + 1)
        img[y0 : y1 + 1, x0 : x1 + 1] += spec.texture_amplitude * tex[..., None]

    img = check_image(np.clip(img, 0.0, 1.0))
    return img, LandmarkSet(_landmark_points(boxes))


def derive_seed(base_seed: int, index: int) -> int:
    """Hash ``(base_seed, index)`` to a 64-bit seed; distinct bases give unrelated sets."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, np.uint64)[0])


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def gen_dataset(count: int, spec: FixtureSpec, out_dir, base_seed: int, prefix: str = "face") -> dict:
    """Write ``count`` fixtures (PNG + landmark JSON) and a ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = []
    for i in range(count):
        seed = derive_seed(base_seed, i)
        img, lms = gen_fixture(replace(spec, seed=seed))
        stem = f"{prefix}_{i:05d}"
        image_path, lm_path = out / f"{stem}.png", out / f"{stem}.landmarks.json"
        save_image(img, image_path)
        save_landmarks(lms, lm_path)
        items.append({
            "image": image_path.name,
            "landmarks": lm_path.name,
            "seed": seed,
            "label": 1,
            "image_sha256": sha256_file(image_path),
            "landmarks_sha256": sha256_file(lm_path),
        })
    manifest = {
        "version": MANIFEST_VERSION,
        "base_seed": int(base_seed),
        "spec": {k: v for k, v in asdict(spec).items() if k != "seed"},
        "items": items,
    }
    if count:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
