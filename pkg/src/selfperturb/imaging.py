"""Image tensors, PNG/landmark I/O, Sobel gradients and convex-hull masks.

Images are ``(H, W, 3)`` float64 arrays in ``[0, 1]``. Perturbation fields
share that shape and hold signed offsets. Magnitudes (``eps``, ``gamma``)
are given on the 0-255 scale and converted here.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MIN_SIDE = 16

# dlib-68 index groups used when a landmark file carries no "groups" entry.
DLIB68_GROUPS: dict[str, list[int]] = {
    "left_eye": list(range(36, 42)),
    "right_eye": list(range(42, 48)),
    "nose": list(range(27, 36)),
    "mouth": list(range(48, 68)),
}
REGION_GROUPS = ("left_eye", "right_eye", "nose", "mouth")


class ImageDimensionError(ValueError):
    """Image side is below 16 or not a multiple of 16."""


class DegenerateInputError(ValueError):
    """Too few or collinear points for a convex hull."""


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageDimensionError(f"expected (H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    if h < MIN_SIDE or w < MIN_SIDE or h % 16 or w % 16:
        raise ImageDimensionError(f"image sides must be multiples of 16 and >= 16, got {h}x{w}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return img


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:  # PIL.UnidentifiedImageError subclasses OSError
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return check_image(arr.astype(np.float64) / 255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid, i.e. what ``load_image(save_image(img))`` returns."""
    return to_uint8(img).astype(np.float64) / 255.0


def save_image(img: np.ndarray, path) -> None:
    img = check_image(img)
    Image.fromarray(to_uint8(img), mode="RGB").save(Path(path), format="PNG")


def sobel_magnitude(img: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude of the RGB-mean luminance on the 0-255 scale.

    Borders are handled by edge replication, so the output has the image's
    spatial shape.
    """
    gray = np.asarray(img, dtype=np.float64).mean(axis=2) * 255.0
    p = np.pad(gray, 1, mode="edge")
    # p[r + dr, c + dc] for dr, dc in {0, 1, 2} maps to offsets -1, 0, +1
    tl, tc, tr = p[:-2, :-2], p[:-2, 1:-1], p[:-2, 2:]
    ml, mr = p[1:-1, :-2], p[1:-1, 2:]
    bl, bc, br = p[2:, :-2], p[2:, 1:-1], p[2:, 2:]
    gx = (tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl)
    gy = (bl + 2.0 * bc + br) - (tl + 2.0 * tc + tr)
    return np.sqrt(gx * gx + gy * gy)


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> np.ndarray:
    """Andrew's monotone chain.

    Returns the hull vertices as a ``(k, 2)`` array in counter-clockwise order
    (positive signed area in the given x/y frame), without collinear vertices.
    """
    pts = sorted({(float(x), float(y)) for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2)})
    if len(pts) < 3:
        raise DegenerateInputError("convex hull needs at least 3 distinct points")

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise DegenerateInputError("all points are collinear")
    return np.array(hull, dtype=np.float64)


def rasterize_hull(hull, height: int, width: int, tol: float = 1e-9) -> np.ndarray:
    """Boolean mask of pixel centres (x=col, y=row) inside or on a CCW hull."""
    hull = np.asarray(hull, dtype=np.float64)
    mask = np.zeros((height, width), dtype=bool)
    x0 = max(int(np.floor(hull[:, 0].min())), 0)
    x1 = min(int(np.ceil(hull[:, 0].max())), width - 1)
    y0 = max(int(np.floor(hull[:, 1].min())), 0)
    y1 = min(int(np.ceil(hull[:, 1].max())), height - 1)
    if x0 > x1 or y0 > y1:
        return mask
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1].astype(np.float64)
    inside = np.ones(xs.shape, dtype=bool)
    for a, b in zip(hull, np.roll(hull, -1, axis=0)):
        cross = (b[0] - a[0]) * (ys - a[1]) - (b[1] - a[1]) * (xs - a[0])
        inside &= cross >= -tol * max(1.0, np.hypot(*(b - a)))
    mask[y0 : y1 + 1, x0 : x1 + 1] = inside
    return mask


def clip_perturbation(field: np.ndarray, eps: float) -> np.ndarray:
    """Clamp offsets to ``[-eps/255, eps/255]``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    bound = eps / 255.0
    return np.clip(np.asarray(field, dtype=np.float64), -bound, bound)


def apply_perturbation(img: np.ndarray, field: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    field = np.asarray(field, dtype=np.float64)
    if img.shape != field.shape:
        raise ValueError(f"shape mismatch: image {img.shape} vs field {field.shape}")
    return np.clip(img + field, 0.0, 1.0)


def residual(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a - b


@dataclass(frozen=True)
class LandmarkSet:
    """Facial keypoints as ``(n, 2)`` pixel (x, y) coordinates plus named groups."""

    points: np.ndarray
    groups: dict = field(default_factory=lambda: dict(DLIB68_GROUPS))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        for name, idx in self.groups.items():
            if len(idx) < 3:
                raise DegenerateInputError(f"landmark group {name!r} has fewer than 3 points")
            if max(idx) >= len(pts) or min(idx) < 0:
                raise ValueError(f"landmark group {name!r} indexes outside the point list")

    def group_points(self, name: str) -> np.ndarray:
        return self.points[self.groups[name]]

    def check_bounds(self, height: int, width: int) -> None:
        x, y = self.points[:, 0], self.points[:, 1]
        if (x < 0).any() or (y < 0).any() or (x > width - 1).any() or (y > height - 1).any():
            raise ValueError(f"landmarks fall outside a {height}x{width} image")

    def to_json(self) -> dict:
        return {
            "points": [[float(x), float(y)] for x, y in self.points],
            "groups": {k: [int(i) for i in v] for k, v in self.groups.items()},
        }

    @classmethod
    def from_json(cls, data: dict) -> "LandmarkSet":
        groups = data.get("groups") or DLIB68_GROUPS
        return cls(np.asarray(data["points"], dtype=np.float64), {k: list(v) for k, v in groups.items()})


def landmark_path(image_path, landmarks_dir=None) -> Path:
    image_path = Path(image_path)
    folder = Path(landmarks_dir) if landmarks_dir is not None else image_path.parent
    return folder / f"{image_path.stem}.landmarks.json"


def load_landmarks(path) -> LandmarkSet:
    with open(path) as fh:
        return LandmarkSet.from_json(json.load(fh))


def save_landmarks(landmarks: LandmarkSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(landmarks.to_json(), fh, sort_keys=True)


def region_union_mask(landmarks: LandmarkSet, height: int, width: int, groups=REGION_GROUPS) -> np.ndarray:
    """Union of the rasterised convex hulls of the given landmark groups."""
    mask = np.zeros((height, width), dtype=bool)
    for name in groups:
        mask |= rasterize_hull(convex_hull(landmarks.group_points(name)), height, width)
    return mask
