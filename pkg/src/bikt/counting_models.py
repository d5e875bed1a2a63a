"""Reference regression and detection networks for synthetic scenes.

Both satisfy the pluggable contracts: the regressor maps an image to a
same-size non-negative density map; the detector maps an image to a center
response grid in [0, 1] plus a scale map. The networks are deliberately
small; any conforming model can replace them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .density_transform import DensityMap
from .reg2det_transform import (FocalSpec, ScaleMap, TrainConfig, _dms_ssim,
                                _focal_mse, binarize_and_merge)
from .scene_data import ImageGrid, PointSet

# Internal target scaling for density regression (density values are tiny).
DENSITY_GAIN = 64.0


@dataclass
class Detection:
    """One detected person: center, head scale, confidence."""

    x: float
    y: float
    scale: float
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.scale < 0:
            raise ValueError(f"scale {self.scale} must be >= 0")


def detections_to_pointset(detections) -> PointSet:
    dets = list(detections)
    if not dets:
        return PointSet.empty()
    return PointSet(
        points=np.array([[d.x, d.y] for d in dets], dtype=np.float64),
        scales=np.array([d.scale for d in dets]) if all(d.scale > 0 for d in dets) else None,
        scores=np.array([d.score for d in dets], dtype=np.float64),
    )


def _image_tensor(image: ImageGrid | np.ndarray) -> torch.Tensor:
    values = image.values if isinstance(image, ImageGrid) else np.asarray(image)
    if values.ndim == 2:
        values = values[None, :, :]
    else:
        values = np.moveaxis(values, -1, 0)
    return torch.as_tensor(values, dtype=torch.float32).unsqueeze(0)


class RegressionModel(nn.Module):
    """Small fully convolutional density regressor.

    Two downsampling stages with a dilated middle block; bilinear
    upsampling back to input size; final ReLU keeps the output
    non-negative. The last two parameterized layers form the fine-tuning
    freeze mask boundary.
    """

    def __init__(self, in_channels: int = 1, base_channels: int = 12):
        super().__init__()
        self.in_channels = in_channels
        self.base_channels = base_channels
        c = base_channels
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, c, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(c, 2 * c, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * c, 2 * c, 3, padding=2, dilation=2), nn.ReLU(inplace=True),
        )
        self.refine = nn.Conv2d(2 * c, c, 3, padding=1)
        self.head = nn.Conv2d(c, 1, 1)

    @property
    def init_args(self) -> dict:
        return {"in_channels": self.in_channels, "base_channels": self.base_channels}

    def last_two_parameter_layers(self) -> list[nn.Module]:
        return [self.refine, self.head]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        ph = (4 - h % 4) % 4
        pw = (4 - w % 4) % 4
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))
        f = self.features(x)
        f = F.interpolate(f, scale_factor=4, mode="bilinear", align_corners=False)
        out = self.head(F.relu(self.refine(f)))
        return F.relu(out[..., :h, :w])


class DetectionModel(nn.Module):
    """Anchor-free center/scale detector.

    A shared trunk feeds a raw center-response head (trained toward the
    peak-1 center heatmap) and a softplus scale head. predict() clamps the
    response into [0, 1].
    """

    def __init__(self, in_channels: int = 1, base_channels: int = 12):
        super().__init__()
        self.in_channels = in_channels
        self.base_channels = base_channels
        c = base_channels
        self.trunk = nn.Sequential(
            nn.Conv2d(in_channels, c, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(c, 2 * c, 3, padding=2, dilation=2), nn.ReLU(inplace=True),
        )
        self.center_head = nn.Conv2d(2 * c, 1, 3, padding=1)
        self.scale_head = nn.Conv2d(2 * c, 1, 3, padding=1)

    @property
    def init_args(self) -> dict:
        return {"in_channels": self.in_channels, "base_channels": self.base_channels}

    def last_two_parameter_layers(self) -> list[nn.Module]:
        return [self.center_head, self.scale_head]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.trunk(x)
        return self.center_head(f), F.softplus(self.scale_head(f))


def regress_density(model: RegressionModel, image: ImageGrid) -> DensityMap:
    """Predict a non-negative density map of the image's spatial size."""
    model.eval()
    with torch.no_grad():
        out = model(_image_tensor(image))
    values = out.squeeze(0).squeeze(0).numpy().astype(np.float64) / DENSITY_GAIN
    return DensityMap.from_array(np.maximum(values, 0.0))


def predict_center_response(model: DetectionModel, image: ImageGrid
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Raw inference: (center response clamped to [0,1], scale map)."""
    model.eval()
    with torch.no_grad():
        center, scale = model(_image_tensor(image))
    response = center.squeeze().numpy().astype(np.float64)
    scales = scale.squeeze().numpy().astype(np.float64)
    return np.clip(response, 0.0, 1.0), scales


def detect(model: DetectionModel, image: ImageGrid, decode_threshold: float = 0.2,
           decode_window: int = 10) -> list[Detection]:
    """Decode detections from the center response via binarize-and-merge.

    Each kept point takes its score from the response and its scale from
    the scale map at that pixel (median positive scale as fallback).
    """
    response, scales = predict_center_response(model, image)
    points = binarize_and_merge(response, threshold=decode_threshold,
                                window=decode_window)
    positive = scales[scales > 0]
    fallback = float(np.median(positive)) if positive.size else 1.0
    detections = []
    for (x, y), score in zip(points.points, points.scores):
        s = float(scales[int(y), int(x)])
        detections.append(Detection(x=float(x), y=float(y),
                                    scale=s if s > 0 else fallback,
                                    score=float(score)))
    return detections


def center_heatmap(points: PointSet, height: int, width: int,
                   sigma: float = 2.0) -> np.ndarray:
    """Peak-1 Gaussian splat per point, max-combined, clipped to [0, 1].

    The peak sits exactly at each point's nearest pixel so the focal loss
    positive mask (target == 1) is well defined.
    """
    heat = np.zeros((height, width), dtype=np.float64)
    if len(points) == 0:
        return heat
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    for px, py in points.points:
        cx = float(np.clip(np.rint(px), 0, width - 1))
        cy = float(np.clip(np.rint(py), 0, height - 1))
        r = int(np.ceil(3.0 * sigma))
        x0, x1 = max(0, int(cx) - r), min(width, int(cx) + r + 1)
        y0, y1 = max(0, int(cy) - r), min(height, int(cy) + r + 1)
        gx = np.exp(-((xs[x0:x1] - cx) ** 2) / (2 * sigma * sigma))
        gy = np.exp(-((ys[y0:y1] - cy) ** 2) / (2 * sigma * sigma))
        bump = np.outer(gy, gx)
        heat[y0:y1, x0:x1] = np.maximum(heat[y0:y1, x0:x1], bump)
    return np.clip(heat, 0.0, 1.0)


def _parameters_fingerprint(model: nn.Module) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def train_regressor(scenes, targets, config: TrainConfig | None = None,
                    seed: int = 0, model: RegressionModel | None = None
                    ) -> RegressionModel:
    """Train the reference regressor on (image, density map) pairs.

    Loss: pixelwise MSE on gain-scaled density plus a small DMS-SSIM term.
    Deterministic given seed; per-epoch mean losses stored as train_history.
    """
    config = config or TrainConfig()
    scenes = list(scenes)
    targets = list(targets)
    if not scenes or len(scenes) != len(targets):
        raise ValueError("need equal-length, non-empty scenes and targets")
    torch.manual_seed(seed)
    if model is None:
        channels = scenes[0].channels if isinstance(scenes[0], ImageGrid) else 1
        model = RegressionModel(in_channels=channels)
    rng = np.random.default_rng(seed)

    images = torch.cat([_image_tensor(s) for s in scenes])
    maps = torch.stack([
        torch.as_tensor(t.values if isinstance(t, DensityMap) else t,
                        dtype=torch.float32) for t in targets]) * DENSITY_GAIN

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history = []
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(scenes))
        epoch_losses = []
        for start in range(0, len(scenes), config.batch_size):
            idx = order[start:start + config.batch_size]
            pred = model(images[idx]).squeeze(1)
            batch_t = maps[idx]
            loss = ((pred - batch_t) ** 2).mean()
            loss = loss + 0.01 * _dms_ssim(pred.unsqueeze(1),
                                           batch_t.unsqueeze(1)).mean()
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite regressor loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.detach().item())
        history.append(float(np.mean(epoch_losses)))
    model.eval()
    model.train_history = history
    return model


def train_detector(scenes, truths, config: TrainConfig | None = None,
                   seed: int = 0, model: DetectionModel | None = None,
                   heat_sigma: float = 2.0) -> DetectionModel:
    """Train the reference detector on (image, PointSet) pairs.

    Center head: focal MSE toward the peak-1 heatmap. Scale head: MSE on
    log-scale at peak pixels (skipped when a truth has no scales).
    """
    config = config or TrainConfig()
    scenes = list(scenes)
    truths = list(truths)
    if not scenes or len(scenes) != len(truths):
        raise ValueError("need equal-length, non-empty scenes and truths")
    torch.manual_seed(seed)
    if model is None:
        channels = scenes[0].channels if isinstance(scenes[0], ImageGrid) else 1
        model = DetectionModel(in_channels=channels)
    rng = np.random.default_rng(seed)

    images = torch.cat([_image_tensor(s) for s in scenes])
    grids = [(s.height, s.width) if isinstance(s, ImageGrid) else s.shape[:2]
             for s in scenes]
    heats, scale_targets = [], []
    for (h, w), truth in zip(grids, truths):
        heats.append(torch.as_tensor(center_heatmap(truth, h, w, sigma=heat_sigma),
                                     dtype=torch.float32))
        sm = ScaleMap.from_points(truth, h, w).values
        scale_targets.append(torch.as_tensor(sm, dtype=torch.float32))
    heats = torch.stack(heats)
    scale_targets = torch.stack(scale_targets)

    spec = FocalSpec()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history = []
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(scenes))
        epoch_losses = []
        for start in range(0, len(scenes), config.batch_size):
            idx = order[start:start + config.batch_size]
            center, scale = model(images[idx])
            center = center.squeeze(1)
            scale = scale.squeeze(1)
            loss = _focal_mse(center, heats[idx], spec).mean()
            st = scale_targets[idx]
            pos = st > 0
            if pos.any():
                scale_loss = ((torch.log(scale[pos] + 1e-6) -
                               torch.log(st[pos])) ** 2).mean()
                loss = loss + 0.1 * scale_loss
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite detector loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.detach().item())
        history.append(float(np.mean(epoch_losses)))
    model.eval()
    model.train_history = history
    return model
