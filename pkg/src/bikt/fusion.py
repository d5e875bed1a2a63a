"""Pseudo ground truth generation: fusing regression and detection outputs.

The detection-confidence weight map gates a pixelwise blend between the
regressor's density map and the density rasterized from detections; the
detection sets from both modalities are merged under NMS with scales
restored afterwards. Training patches are sampled from the fused maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .counting_models import Detection, detections_to_pointset
from .density_transform import DensityMap
from .scene_data import PointSet


@dataclass
class ConfidenceWeightMap:
    """Grid of blend weights in [0, 1]; zero outside detection neighborhoods."""

    height: int
    width: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.height, self.width):
            raise ValueError("weight map shape mismatch")
        if self.values.min() < 0 or self.values.max() > 1:
            raise ValueError("weights must lie in [0, 1]")


@dataclass
class DensityPatch:
    """A sampled training window with its cropped density label."""

    x0: int
    y0: int
    width: int
    height: int
    density: np.ndarray


@dataclass
class DetectionPatch:
    """A sampled training window with patch-local detections."""

    x0: int
    y0: int
    width: int
    height: int
    detections: list[Detection]


@dataclass
class PseudoLabels:
    """Fused pseudo ground truth for one image, one cycle."""

    fused_density: DensityMap
    fused_detections: list[Detection]
    reg_patches: list[DensityPatch]
    det_patches: list[DetectionPatch]


def build_weight_map(detections: Sequence[Detection], height: int, width: int,
                     k: int) -> ConfidenceWeightMap:
    """Detection-confidence weight map.

    Within the k x k square centered on each detection the weight equals
    that detection's score; overlapping squares take the pixelwise maximum;
    everywhere else the weight is zero.
    """
    values = np.zeros((height, width), dtype=np.float64)
    half = k // 2
    for det in detections:
        cx = int(np.clip(np.rint(det.x), 0, width - 1))
        cy = int(np.clip(np.rint(det.y), 0, height - 1))
        x0, x1 = max(0, cx - half), min(width, cx + half + 1)
        y0, y1 = max(0, cy - half), min(height, cy + half + 1)
        block = values[y0:y1, x0:x1]
        np.maximum(block, det.score, out=block)
    return ConfidenceWeightMap(height=height, width=width, values=values)


def fuse_density(reg: DensityMap, det_density: DensityMap,
                 weights: ConfidenceWeightMap) -> DensityMap:
    """Pixelwise blend (1 - W) * reg + W * det_density."""
    if reg.values.shape != det_density.values.shape or \
            reg.values.shape != weights.values.shape:
        raise ValueError("fuse_density inputs must share one shape")
    w = weights.values
    fused = (1.0 - w) * reg.values + w * det_density.values
    return DensityMap.from_array(fused)


def nms(detections: Sequence[Detection], radius: float) -> list[Detection]:
    """Greedy non-maximum suppression on point centers.

    Detections are visited by descending score (ties: smaller y, then
    smaller x); a kept detection drops every remaining one within the
    Euclidean radius of its center. Output preserves kept order.
    """
    dets = list(detections)
    if not dets:
        return []
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].score, dets[i].y, dets[i].x))
    xy = np.array([[dets[i].x, dets[i].y] for i in order])
    alive = np.ones(len(dets), dtype=bool)
    kept = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(dets[order[i]])
        d2 = ((xy - xy[i]) ** 2).sum(axis=1)
        alive &= d2 > radius * radius
    return kept


def fuse_detections(dets_from_d: Sequence[Detection], points_from_phi: PointSet,
                    radius: float) -> list[Detection]:
    """Union the detector's detections with Reg-to-Det points, then NMS.

    Transformer points carry no size; they enter with placeholder scale 0
    to be repaired afterwards by restore_scales.
    """
    pool = list(dets_from_d)
    if len(points_from_phi):
        scores = points_from_phi.scores
        if scores is None:
            scores = np.ones(len(points_from_phi))
        for (x, y), score in zip(points_from_phi.points, scores):
            pool.append(Detection(x=float(x), y=float(y), scale=0.0,
                                  score=float(score)))
    return nms(pool, radius)


def restore_scales(fused: Sequence[Detection], original: Sequence[Detection],
                   height: int, beta_s: float = 1.0,
                   default_scale: float = 4.0) -> list[Detection]:
    """Fill placeholder (zero) scales of fused detections.

    Lower half of the image (y >= height / 2): copy the scale of the
    nearest original detection; upper half (or when no original exists):
    beta_s times the mean distance to the 3 nearest fused neighbors. A
    lone point takes the median original scale, else default_scale.
    """
    fused = list(fused)
    if not fused:
        return []
    original = [d for d in original if d.scale > 0]
    orig_xy = np.array([[d.x, d.y] for d in original]) if original else None
    fused_xy = np.array([[d.x, d.y] for d in fused])
    median_orig = float(np.median([d.scale for d in original])) if original else None

    def neighbor_scale(i: int) -> float:
        if len(fused) == 1:
            return median_orig if median_orig is not None else default_scale
        d2 = ((fused_xy - fused_xy[i]) ** 2).sum(axis=1)
        d2[i] = np.inf
        k = min(3, len(fused) - 1)
        nearest = np.sort(np.sqrt(d2))[:k]
        return beta_s * float(nearest.mean())

    out = []
    for i, det in enumerate(fused):
        if det.scale > 0:
            out.append(det)
            continue
        if det.y >= height / 2.0 and orig_xy is not None:
            d2 = ((orig_xy - fused_xy[i]) ** 2).sum(axis=1)
            scale = original[int(np.argmin(d2))].scale
        else:
            scale = neighbor_scale(i)
        out.append(Detection(x=det.x, y=det.y, scale=float(scale), score=det.score))
    return out


def _tile_windows(height: int, width: int, side: int
                  ) -> list[tuple[int, int, int, int]]:
    """Non-overlapping side x side windows, row-major; whole image if it is
    smaller than side in either dimension."""
    if height < side or width < side:
        return [(0, 0, width, height)]
    windows = []
    for wy in range(height // side):
        for wx in range(width // side):
            windows.append((wx * side, wy * side, side, side))
    return windows


def sample_regression_patches(fused_density: DensityMap, count: int = 2,
                              side: int = 224, seed: int = 0
                              ) -> list[DensityPatch]:
    """Sample medium-density windows from the fused density map.

    Windows are ranked by density sum ascending (ties row-major); the
    candidate pool holds windows whose midpoint rank percentile
    (rank - 0.5) / n lies in [0.5, 0.7]. `count` windows are drawn
    uniformly without replacement (seeded); fewer candidates than count
    returns them all.
    """
    windows = _tile_windows(fused_density.height, fused_density.width, side)
    sums = np.array([fused_density.values[y0:y0 + h, x0:x0 + w].sum()
                     for (x0, y0, w, h) in windows])
    order = np.argsort(sums, kind="stable")  # ties keep row-major order
    n = len(windows)
    ranks = np.empty(n, dtype=int)
    ranks[order] = np.arange(1, n + 1)
    percentile = (ranks - 0.5) / n
    pool = [i for i in range(n) if 0.5 <= percentile[i] <= 0.7]
    rng = np.random.default_rng(seed)
    chosen = (rng.choice(len(pool), size=count, replace=False)
              if len(pool) > count else np.arange(len(pool)))
    patches = []
    for j in sorted(int(c) for c in chosen):
        x0, y0, w, h = windows[pool[j]]
        patches.append(DensityPatch(
            x0=x0, y0=y0, width=w, height=h,
            density=fused_density.values[y0:y0 + h, x0:x0 + w].copy()))
    return patches


def sample_random_patches(fused_density: DensityMap, count: int = 2,
                          side: int = 224, seed: int = 0) -> list[DensityPatch]:
    """Baseline sampler: windows drawn uniformly, ignoring density rank."""
    windows = _tile_windows(fused_density.height, fused_density.width, side)
    rng = np.random.default_rng(seed)
    chosen = (rng.choice(len(windows), size=count, replace=False)
              if len(windows) > count else np.arange(len(windows)))
    patches = []
    for j in sorted(int(c) for c in chosen):
        x0, y0, w, h = windows[j]
        patches.append(DensityPatch(
            x0=x0, y0=y0, width=w, height=h,
            density=fused_density.values[y0:y0 + h, x0:x0 + w].copy()))
    return patches


def sample_detection_patches(fused: Sequence[Detection], height: int, width: int,
                             count: int = 2, side: int = 224
                             ) -> list[DetectionPatch]:
    """Pick the windows with the highest mean detection confidence.

    Windows without any detection center are skipped. Detections are
    returned in patch-local coordinates.
    """
    windows = _tile_windows(height, width, side)
    scored = []
    for idx, (x0, y0, w, h) in enumerate(windows):
        inside = [d for d in fused
                  if x0 <= d.x < x0 + w and y0 <= d.y < y0 + h]
        if not inside:
            continue
        mean_score = float(np.mean([d.score for d in inside]))
        scored.append((-mean_score, idx, inside))
    scored.sort(key=lambda item: (item[0], item[1]))
    patches = []
    for _, idx, inside in scored[:count]:
        x0, y0, w, h = windows[idx]
        local = [Detection(x=d.x - x0, y=d.y - y0, scale=d.scale, score=d.score)
                 for d in inside]
        patches.append(DetectionPatch(x0=x0, y0=y0, width=w, height=h,
                                      detections=local))
    return patches
