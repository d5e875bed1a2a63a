"""Scene data model, annotation IO and synthetic crowd-scene generation.

Coordinates follow image convention: x grows rightward, y grows downward,
origin at the center of the top-left pixel. Subpixel (real-valued) point
locations are allowed everywhere.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

ANNOTATION_VERSION = 1


class AnnotationError(ValueError):
    """Raised for malformed or out-of-bounds annotation records."""


@dataclass
class PointSet:
    """Ordered head-center coordinates with optional per-point scale and score.

    points: (N, 2) float array, columns (x, y).
    scales: optional (N,) positive floats (head size in pixels).
    scores: optional (N,) floats in [0, 1].
    """

    points: np.ndarray
    scales: np.ndarray | None = None
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        n = len(self.points)
        if self.scales is not None:
            self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
            if len(self.scales) != n:
                raise ValueError("scales length must equal points length")
            if not np.all(np.isfinite(self.scales)) or np.any(self.scales <= 0):
                raise ValueError("scales must be finite and > 0")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if len(self.scores) != n:
                raise ValueError("scores length must equal points length")
            if not np.all(np.isfinite(self.scores)):
                raise ValueError("scores must be finite")
            if np.any(self.scores < 0) or np.any(self.scores > 1):
                raise ValueError("scores must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointSet":
        return cls(points=np.zeros((0, 2), dtype=np.float64))

    def inside(self, height: int, width: int) -> np.ndarray:
        """Boolean mask of points with 0 <= x < width and 0 <= y < height."""
        x, y = self.points[:, 0], self.points[:, 1]
        return (x >= 0) & (x < width) & (y >= 0) & (y < height)


@dataclass
class ImageGrid:
    """Dense image with values in [0, 1].

    values has shape (height, width) for one channel, else
    (height, width, channels).
    """

    height: int
    width: int
    channels: int
    values: np.ndarray

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("height and width must be positive")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = (self.height, self.width) if self.channels == 1 else (
            self.height, self.width, self.channels)
        if self.values.shape != expected:
            raise ValueError(
                f"values shape {self.values.shape} does not match {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("image values must be finite")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")

    @classmethod
    def from_array(cls, values: np.ndarray) -> "ImageGrid":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 2:
            h, w = values.shape
            return cls(height=h, width=w, channels=1, values=values)
        h, w, c = values.shape
        return cls(height=h, width=w, channels=c, values=values)


@dataclass
class AnnotatedScene:
    """An image together with its ground-truth head points."""

    image: ImageGrid
    truth: PointSet
    domain_tag: str = ""

    def __post_init__(self):
        if len(self.truth) and not self.truth.inside(
                self.image.height, self.image.width).all():
            raise ValueError("truth points must lie inside image bounds")


@dataclass
class SceneGenSpec:
    """Parameters of the synthetic scene generator.

    process is "uniform-poisson" (homogeneous Poisson point process) or
    "thomas-cluster" (Thomas process: uniform parents, Gaussian offspring).
    intensity is the expected total number of points per image.
    """

    height: int = 96
    width: int = 96
    process: str = "uniform-poisson"
    intensity: float = 12.0
    cluster_count: int = 3
    cluster_std: float = 3.0
    blob_sigma_range: tuple[float, float] = (1.2, 2.2)
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("height and width must be positive")
        if self.process not in ("uniform-poisson", "thomas-cluster"):
            raise ValueError(f"unknown point process: {self.process!r}")
        if self.intensity < 0:
            raise ValueError("intensity must be >= 0")
        lo, hi = self.blob_sigma_range
        if lo > hi or lo <= 0:
            raise ValueError("blob_sigma_range must satisfy 0 < lo <= hi")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.cluster_count < 1:
            raise ValueError("cluster_count must be >= 1")
        if self.cluster_std <= 0:
            raise ValueError("cluster_std must be > 0")


# ---------------------------------------------------------------------------
# Annotation JSON IO
#
# Format (one object per file):
#   {"version": 1, "scenes": [{"image": "rel/path.png", "width": W,
#     "height": H, "points": [[x, y], ...]}, ...]}
# "scales" and "domain" are optional per-scene keys.
# ---------------------------------------------------------------------------


def _scene_from_record(record: dict, base: Path, index: int) -> AnnotatedScene:
    try:
        width = int(record["width"])
        height = int(record["height"])
        raw_points = record["points"]
        image_rel = record["image"]
    except (KeyError, TypeError) as exc:
        raise AnnotationError(f"record {index}: missing or invalid key ({exc})")

    points = np.asarray(raw_points, dtype=np.float64).reshape(-1, 2)
    if len(points):
        x, y = points[:, 0], points[:, 1]
        bad = ~((x >= 0) & (x < width) & (y >= 0) & (y < height))
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise AnnotationError(
                f"record {index}: point {j} {points[j].tolist()} outside "
                f"{width}x{height} image bounds")

    scales = record.get("scales")
    if scales is not None:
        scales = np.asarray(scales, dtype=np.float64)

    image_path = base / image_rel
    if not image_path.exists():
        raise AnnotationError(f"record {index}: image file {image_rel!r} not found")
    with Image.open(image_path) as img:
        arr = np.asarray(img)
    if arr.dtype == np.uint8:
        values = arr.astype(np.float64) / 255.0
    elif arr.dtype == np.uint16 or arr.dtype == np.int32:
        values = arr.astype(np.float64) / 65535.0
    else:
        values = np.clip(arr.astype(np.float64), 0.0, 1.0)
    if values.ndim == 3 and values.shape[2] > 3:
        values = values[:, :, :3]
    grid = ImageGrid.from_array(np.clip(values, 0.0, 1.0))
    if (grid.height, grid.width) != (height, width):
        raise AnnotationError(
            f"record {index}: image size {grid.width}x{grid.height} does not "
            f"match declared {width}x{height}")

    return AnnotatedScene(
        image=grid,
        truth=PointSet(points=points, scales=scales),
        domain_tag=str(record.get("domain", "")),
    )


def load_annotations(path: str | Path, strict: bool = False) -> list[AnnotatedScene]:
    """Load annotated scenes from an annotation JSON file.

    Records failing validation are skipped with a warning; with strict=True
    the first bad record raises instead.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"annotation file not found: {path}")
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"malformed annotation JSON: {exc}")
    if not isinstance(payload, dict) or "scenes" not in payload:
        raise AnnotationError("annotation JSON must be an object with a 'scenes' list")

    scenes = []
    for index, record in enumerate(payload["scenes"]):
        try:
            scenes.append(_scene_from_record(record, path.parent, index))
        except AnnotationError as exc:
            if strict:
                raise
            warnings.warn(f"skipping annotation record: {exc}")
    return scenes


def save_annotations(scenes: Sequence[AnnotatedScene], path: str | Path) -> None:
    """Write scenes as annotation JSON plus one 16-bit PNG per scene.

    Point coordinates survive a save/load round-trip to better than 1e-9;
    image values are quantized to 16 bits.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image_dir = path.parent / (path.stem + "_images")
    image_dir.mkdir(exist_ok=True)

    records = []
    for i, scene in enumerate(scenes):
        rel = f"{image_dir.name}/scene_{i:05d}.png"
        arr = np.round(scene.image.values * 65535.0).astype(np.uint16)
        if scene.image.channels == 1:
            Image.fromarray(arr, mode="I;16").save(path.parent / rel)
        else:
            # PIL has no 16-bit RGB mode; fall back to 8-bit for color.
            Image.fromarray(
                np.round(scene.image.values * 255.0).astype(np.uint8)).save(
                    path.parent / rel)
        record = {
            "image": rel,
            "width": scene.image.width,
            "height": scene.image.height,
            "points": [[float(x), float(y)] for x, y in scene.truth.points],
        }
        if scene.truth.scales is not None:
            record["scales"] = [float(s) for s in scene.truth.scales]
        if scene.domain_tag:
            record["domain"] = scene.domain_tag
        records.append(record)

    with open(path, "w") as fh:
        json.dump({"version": ANNOTATION_VERSION, "scenes": records}, fh)


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


def _sample_points(spec: SceneGenSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.process == "uniform-poisson":
        n = rng.poisson(spec.intensity)
        xy = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
        return xy
    # Thomas cluster process: fixed parent count, Poisson offspring per
    # parent, Gaussian displacement; offspring outside bounds are resampled
    # so the expected total stays at `intensity`.
    per_cluster = spec.intensity / spec.cluster_count
    parents = np.column_stack([
        rng.uniform(0, w, spec.cluster_count),
        rng.uniform(0, h, spec.cluster_count),
    ])
    pts = []
    for cx, cy in parents:
        n = rng.poisson(per_cluster)
        for _ in range(n):
            for _attempt in range(64):
                x = cx + rng.normal(0, spec.cluster_std)
                y = cy + rng.normal(0, spec.cluster_std)
                if 0 <= x < w and 0 <= y < h:
                    pts.append((x, y))
                    break
            else:
                pts.append((min(max(cx, 0.0), w - 1e-6),
                            min(max(cy, 0.0), h - 1e-6)))
    return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


def render_scene_image(truth: PointSet, spec: SceneGenSpec) -> ImageGrid:
    """Render a grayscale image: one Gaussian blob per point, plus noise.

    Blob sigmas come from truth.scales when present, otherwise drawn from
    spec.blob_sigma_range (seeded). Output clipped to [0, 1].
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed) & (2**63 - 1), 1]))
    h, w = spec.height, spec.width
    canvas = np.zeros((h, w), dtype=np.float64)
    if len(truth):
        if truth.scales is not None:
            sigmas = truth.scales
        else:
            lo, hi = spec.blob_sigma_range
            sigmas = rng.uniform(lo, hi, len(truth))
        ys = np.arange(h, dtype=np.float64)
        xs = np.arange(w, dtype=np.float64)
        for (px, py), sigma in zip(truth.points, sigmas):
            r = int(np.ceil(4.0 * sigma))
            x0, x1 = max(0, int(np.floor(px)) - r), min(w, int(np.floor(px)) + r + 1)
            y0, y1 = max(0, int(np.floor(py)) - r), min(h, int(np.floor(py)) + r + 1)
            gx = np.exp(-((xs[x0:x1] - px) ** 2) / (2 * sigma * sigma))
            gy = np.exp(-((ys[y0:y1] - py) ** 2) / (2 * sigma * sigma))
            canvas[y0:y1, x0:x1] += np.outer(gy, gx)
    if spec.noise_std > 0:
        canvas = canvas + rng.normal(0.0, spec.noise_std, size=canvas.shape)
    return ImageGrid.from_array(np.clip(canvas, 0.0, 1.0))


def generate_synthetic_scene(spec: SceneGenSpec, domain_tag: str = "") -> AnnotatedScene:
    """Generate one annotated scene; deterministic in spec.seed.

    Per-point scales are set to the rendered blob sigma, so the detector's
    scale target matches the visible head size.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed) & (2**63 - 1), 0]))
    points = _sample_points(spec, rng)
    lo, hi = spec.blob_sigma_range
    scales = rng.uniform(lo, hi, len(points)) if len(points) else None
    truth = PointSet(points=points, scales=scales)
    image = render_scene_image(truth, spec)
    return AnnotatedScene(image=image, truth=truth, domain_tag=domain_tag)


def generate_domain(spec: SceneGenSpec, count: int, domain_tag: str = "",
                    seed_offset: int = 0) -> list[AnnotatedScene]:
    """Generate `count` scenes from per-scene reseeded copies of `spec`."""
    scenes = []
    for i in range(count):
        s = replace(spec, seed=spec.seed + seed_offset + i)
        scenes.append(generate_synthetic_scene(s, domain_tag=domain_tag))
    return scenes
