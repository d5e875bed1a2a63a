"""Counting and localization metrics.

Counting follows the crowd-counting convention: MAE is the mean absolute
count error and MSE the root of the mean squared count error. Localization
is scored as mAP over matching distances c = 1..100 with per-truth
highest-score deduplication.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .density_transform import DensityMap
from .scene_data import PointSet


@dataclass
class CountMetrics:
    mae: float
    mse: float
    n_images: int


@dataclass
class APCurve:
    """Per-threshold AP values and their mean."""

    cs: list[int]
    aps: list[float]
    map: float
    no_truth: bool = False


@dataclass
class PatchErrorRow:
    """One tile of the per-patch count error profile."""

    image_id: int
    patch_x: int
    patch_y: int
    true_count: float
    pred_count: float
    signed_error: float
    model: str


def count_metrics(pred_counts: Sequence[float], true_counts: Sequence[float]
                  ) -> CountMetrics:
    """MAE and root-mean-squared count error over paired images."""
    pred = np.asarray(pred_counts, dtype=np.float64)
    true = np.asarray(true_counts, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError("pred and true count lists must have equal length")
    if pred.size == 0:
        raise ValueError("count_metrics needs at least one image")
    diff = pred - true
    return CountMetrics(
        mae=float(np.abs(diff).mean()),
        mse=float(np.sqrt((diff ** 2).mean())),
        n_images=int(pred.size),
    )


def match_points(pred: PointSet, truth: PointSet, c: float) -> np.ndarray:
    """Label each prediction TP (True) or FP (False) at match distance c.

    A prediction is a TP candidate iff its nearest truth point lies within
    c. Among the candidates sharing one nearest truth point, only the
    highest-scoring one is a TP (ties: score desc, then y, then x).
    """
    if pred.scores is None and len(pred):
        raise ValueError("match_points requires scored predictions")
    labels = np.zeros(len(pred), dtype=bool)
    if len(pred) == 0 or len(truth) == 0:
        return labels
    diff = pred.points[:, None, :] - truth.points[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    nearest = dist.argmin(axis=1)
    nearest_dist = dist[np.arange(len(pred)), nearest]
    candidates = nearest_dist <= c
    for t in set(nearest[candidates].tolist()):
        mask = candidates & (nearest == t)
        idx = np.flatnonzero(mask)
        best = min(idx, key=lambda i: (-pred.scores[i], pred.points[i, 1],
                                       pred.points[i, 0]))
        labels[best] = True
    return labels


def _ranked_ap(labels: np.ndarray, n_truth: int) -> float:
    """All-point interpolated AP from ranked TP/FP labels."""
    if n_truth == 0 or labels.size == 0:
        return 0.0
    tp = np.cumsum(labels)
    fp = np.cumsum(~labels)
    recall = tp / n_truth
    precision = tp / (tp + fp)
    # monotone non-increasing interpolated precision from the right
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * interp).sum())


def localization_map(predictions: Sequence[PointSet], truths: Sequence[PointSet],
                     c_min: int = 1, c_max: int = 100) -> APCurve:
    """Localization mAP: AP per integer matching distance c, averaged.

    Predictions are pooled across images and ranked globally by descending
    score (ties: image index, then y, then x). With no truth points
    anywhere the curve is all zeros and flagged.
    """
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths must align per image")
    n_truth = sum(len(t) for t in truths)
    cs = list(range(c_min, c_max + 1))
    if n_truth == 0:
        return APCurve(cs=cs, aps=[0.0] * len(cs), map=0.0, no_truth=True)

    entries = []  # (sort key, image index, prediction index)
    for img, pred in enumerate(predictions):
        if len(pred) == 0:
            continue
        if pred.scores is None:
            raise ValueError("localization_map requires scored predictions")
        for j in range(len(pred)):
            entries.append(((-pred.scores[j], img, pred.points[j, 1],
                             pred.points[j, 0]), img, j))
    entries.sort(key=lambda e: e[0])

    aps = []
    for c in cs:
        per_image = [match_points(pred, truth, c) if len(pred) else
                     np.zeros(0, dtype=bool)
                     for pred, truth in zip(predictions, truths)]
        ranked = np.array([per_image[img][j] for _, img, j in entries], dtype=bool)
        aps.append(_ranked_ap(ranked, n_truth))
    return APCurve(cs=cs, aps=aps, map=float(np.mean(aps)))


def patch_error_profile(preds: Sequence[DensityMap], truths: Sequence[PointSet],
                        patch_side: int, model: str = "model"
                        ) -> list[PatchErrorRow]:
    """Per-patch signed count errors over a non-overlapping tiling.

    The predicted patch count is the density sum inside the tile; the true
    count is the number of truth points inside it. One row per tile.
    """
    if len(preds) != len(truths):
        raise ValueError("preds and truths must align per image")
    rows = []
    for image_id, (pred, truth) in enumerate(zip(preds, truths)):
        for wy in range(pred.height // patch_side):
            for wx in range(pred.width // patch_side):
                x0, y0 = wx * patch_side, wy * patch_side
                pred_count = float(pred.values[y0:y0 + patch_side,
                                               x0:x0 + patch_side].sum())
                true_count = _points_in_window(truth, x0, y0, patch_side)
                rows.append(PatchErrorRow(
                    image_id=image_id, patch_x=x0, patch_y=y0,
                    true_count=true_count, pred_count=pred_count,
                    signed_error=pred_count - true_count, model=model))
    return rows


def points_profile(point_preds: Sequence[PointSet], truths: Sequence[PointSet],
                   heights: Sequence[int], widths: Sequence[int],
                   patch_side: int, model: str = "model") -> list[PatchErrorRow]:
    """Patch error profile for point predictions (e.g. detections)."""
    rows = []
    for image_id, (pred, truth, height, width) in enumerate(
            zip(point_preds, truths, heights, widths)):
        for wy in range(height // patch_side):
            for wx in range(width // patch_side):
                x0, y0 = wx * patch_side, wy * patch_side
                pred_count = _points_in_window(pred, x0, y0, patch_side)
                true_count = _points_in_window(truth, x0, y0, patch_side)
                rows.append(PatchErrorRow(
                    image_id=image_id, patch_x=x0, patch_y=y0,
                    true_count=true_count, pred_count=pred_count,
                    signed_error=pred_count - true_count, model=model))
    return rows


def _points_in_window(points: PointSet, x0: int, y0: int, side: int) -> float:
    if len(points) == 0:
        return 0.0
    x, y = points.points[:, 0], points.points[:, 1]
    return float(((x >= x0) & (x < x0 + side) & (y >= y0) & (y < y0 + side)).sum())
