"""Det-to-Reg transformer: point detections to crowd density maps.

Each point is rasterized as a unit-integral Gaussian whose bandwidth is
either fixed or geometry-adaptive (proportional to the mean distance to the
nearest annotated neighbors). Kernels are truncated and optionally
renormalized on the grid so the map sum equals the point count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .scene_data import PointSet

GRID_MAGIC = b"BIKTGRD1"


@dataclass
class DensityMap:
    """Dense grid of non-negative reals; the sum is the crowd count."""

    height: int
    width: int
    values: np.ndarray

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("height and width must be positive")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.height, self.width):
            raise ValueError(
                f"values shape {self.values.shape} != ({self.height}, {self.width})")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("density values must be finite")
        if self.values.min() < 0:
            raise ValueError("density values must be non-negative")

    @classmethod
    def from_array(cls, values: np.ndarray) -> "DensityMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(height=values.shape[0], width=values.shape[1], values=values)

    @classmethod
    def zeros(cls, height: int, width: int) -> "DensityMap":
        return cls(height=height, width=width,
                   values=np.zeros((height, width), dtype=np.float64))


@dataclass
class KernelSpec:
    """Gaussian kernel rule shared by ground truth generation and transfer.

    mode "fixed" uses fixed_sigma for every point; mode "adaptive" uses
    sigma_j = beta * (mean distance from point j to its neighbor_count
    nearest other points). Kernels are truncated at
    truncation_radius_sigmas * sigma and, when renormalize_clipped is set,
    rescaled so each on-grid kernel sums to exactly 1.
    """

    mode: str = "fixed"
    fixed_sigma: float = 2.0
    beta: float = 0.3
    neighbor_count: int = 3
    truncation_radius_sigmas: float = 4.0
    renormalize_clipped: bool = True

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown kernel mode: {self.mode!r}")
        if self.fixed_sigma <= 0:
            raise ValueError("fixed_sigma must be > 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.neighbor_count < 1:
            raise ValueError("neighbor_count must be >= 1")
        if self.truncation_radius_sigmas <= 0:
            raise ValueError("truncation_radius_sigmas must be > 0")

    def window_size(self, points: PointSet | None = None) -> int:
        """Odd side of the kernel footprint for a representative sigma.

        Uses fixed_sigma in fixed mode, the median adaptive sigma otherwise.
        This is the k used for detection-confidence weight blocks.
        """
        if self.mode == "fixed" or points is None or len(points) < 2:
            sigma = self.fixed_sigma
        else:
            sigma = float(np.median(compute_adaptive_sigmas(points, self)))
        return 2 * int(np.ceil(self.truncation_radius_sigmas * sigma)) + 1


def compute_adaptive_sigmas(points: PointSet, spec: KernelSpec) -> np.ndarray:
    """Per-point adaptive bandwidths sigma_j = beta * mean k-NN distance.

    A lone point falls back to fixed_sigma. When fewer other points exist
    than neighbor_count, the mean runs over all available neighbors.
    """
    if len(points) == 0:
        raise ValueError("adaptive sigmas need at least one point")
    if len(points) == 1:
        return np.array([spec.fixed_sigma], dtype=np.float64)
    k = min(spec.neighbor_count, len(points) - 1)
    tree = cKDTree(points.points)
    # first neighbor is the point itself
    dists, _ = tree.query(points.points, k=k + 1)
    return spec.beta * dists[:, 1:].mean(axis=1)


def _point_sigmas(points: PointSet, spec: KernelSpec) -> np.ndarray:
    if spec.mode == "fixed":
        return np.full(len(points), spec.fixed_sigma, dtype=np.float64)
    return compute_adaptive_sigmas(points, spec)


def det_to_reg(points: PointSet, height: int, width: int,
               spec: KernelSpec | None = None) -> DensityMap:
    """Rasterize points into a density map (one Gaussian per point).

    Kernels are evaluated at pixel centers, truncated at
    truncation_radius_sigmas * sigma (circular support) and renormalized to
    unit on-grid mass when spec.renormalize_clipped is set, so the map sum
    matches the point count.
    """
    spec = spec or KernelSpec()
    density = np.zeros((height, width), dtype=np.float64)
    if len(points) == 0:
        return DensityMap(height=height, width=width, values=density)
    inside = points.inside(height, width)
    if not inside.all():
        j = int(np.flatnonzero(~inside)[0])
        raise ValueError(
            f"point {j} {points.points[j].tolist()} outside {width}x{height} grid")

    sigmas = _point_sigmas(points, spec)
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    for (px, py), sigma in zip(points.points, sigmas):
        radius = spec.truncation_radius_sigmas * sigma
        r = int(np.ceil(radius))
        x0, x1 = max(0, int(np.floor(px)) - r), min(width, int(np.floor(px)) + r + 1)
        y0, y1 = max(0, int(np.floor(py)) - r), min(height, int(np.floor(py)) + r + 1)
        dx2 = (xs[x0:x1] - px) ** 2
        dy2 = (ys[y0:y1] - py) ** 2
        rr = dy2[:, None] + dx2[None, :]
        kernel = np.exp(-rr / (2.0 * sigma * sigma)) / (2.0 * np.pi * sigma * sigma)
        kernel[rr > radius * radius] = 0.0
        if spec.renormalize_clipped:
            mass = kernel.sum()
            if mass > 0:
                kernel = kernel / mass
        density[y0:y1, x0:x1] += kernel
    return DensityMap(height=height, width=width, values=density)


def density_count(density: DensityMap) -> float:
    """Crowd count implied by a density map (sum of all values)."""
    return float(density.values.sum())


# ---------------------------------------------------------------------------
# Grid file format, shared project-wide:
# 8-byte magic "BIKTGRD1", little-endian u32 height, u32 width, then
# height*width IEEE-754 float32 values, row-major.
# ---------------------------------------------------------------------------


def save_grid(path: str | Path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("grid must be 2-D")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(values.astype("<f4").tobytes(order="C"))


def load_grid(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != GRID_MAGIC:
            raise ValueError(f"bad grid magic {magic!r} in {path}")
        h, w = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * h * w), dtype="<f4")
    if data.size != h * w:
        raise ValueError(f"truncated grid file {path}")
    return data.reshape(h, w).astype(np.float64)
