"""Reg-to-Det transformer: density maps to individual localization maps.

A small U-shaped encoder-decoder is trained to invert the Gaussian
rasterization: it maps a one-channel density grid to a same-size response
grid whose values approximate the 0/1 localization map. The response is
decoded by thresholding at 0.2 and merging redundant nonzero pixels within
a local window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .density_transform import DensityMap
from .scene_data import PointSet

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_DILATIONS = (1, 2, 3, 4, 5)
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LocalizationMap:
    """Dense 0/1 grid marking individual centers."""

    height: int
    width: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.height, self.width):
            raise ValueError("localization map shape mismatch")
        uniq = np.unique(self.values)
        if not np.all(np.isin(uniq, (0.0, 1.0))):
            raise ValueError("localization map values must be 0 or 1")

    @classmethod
    def from_points(cls, points: PointSet, height: int, width: int) -> "LocalizationMap":
        """Mark the nearest pixel of each point; colliding points collapse."""
        values = np.zeros((height, width), dtype=np.float64)
        if len(points):
            cols = np.clip(np.rint(points.points[:, 0]).astype(int), 0, width - 1)
            rows = np.clip(np.rint(points.points[:, 1]).astype(int), 0, height - 1)
            values[rows, cols] = 1.0
        return cls(height=height, width=width, values=values)


@dataclass
class ScaleMap:
    """Dense grid of head sizes, nonzero only where a scale is defined."""

    height: int
    width: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.height, self.width):
            raise ValueError("scale map shape mismatch")
        if self.values.min() < 0:
            raise ValueError("scale map values must be >= 0")

    @classmethod
    def from_points(cls, points: PointSet, height: int, width: int) -> "ScaleMap":
        values = np.zeros((height, width), dtype=np.float64)
        if len(points) and points.scales is not None:
            cols = np.clip(np.rint(points.points[:, 0]).astype(int), 0, width - 1)
            rows = np.clip(np.rint(points.points[:, 1]).astype(int), 0, height - 1)
            values[rows, cols] = points.scales
        return cls(height=height, width=width, values=values)


@dataclass
class FocalSpec:
    """Focal-MSE weighting: gamma modulation plus positive/negative alphas."""

    gamma: float = 2.0
    alpha_pos: float = 1.0
    alpha_neg: float = 0.1

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.alpha_pos <= 0 or self.alpha_neg <= 0:
            raise ValueError("alphas must be > 0")


@dataclass
class TrainConfig:
    """Optimizer settings shared by the model training routines."""

    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    loss: str = "total"  # "total" (focal MSE + DMS-SSIM) or "mse"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.loss not in ("total", "mse"):
            raise ValueError(f"unknown loss kind: {self.loss!r}")


def _grid_tensor(x) -> torch.Tensor:
    """Coerce DensityMap / LocalizationMap / ndarray / tensor to a 2-D tensor."""
    if isinstance(x, (DensityMap, LocalizationMap, ScaleMap)):
        x = x.values
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def _paired(pred, target) -> tuple[torch.Tensor, torch.Tensor]:
    p = _grid_tensor(pred)
    t = _grid_tensor(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    dtype = torch.promote_types(p.dtype, t.dtype)
    if not dtype.is_floating_point:
        dtype = torch.float64
    return p.to(dtype), t.to(dtype)


def mse_loss(pred, target) -> torch.Tensor:
    """Plain per-pixel MSE averaged over all N pixels."""
    p, t = _paired(pred, target)
    return ((t - p) ** 2).mean()


def focal_mse_loss(pred, target, spec: FocalSpec | None = None) -> torch.Tensor:
    """Focal-weighted MSE for sparse 0/1 targets.

    Per pixel: alpha_i * (1 - p_i)^gamma * (target_i - pred_i)^2 with
    p_i = sigmoid(pred_i) at positive pixels (target == 1) and
    1 - sigmoid(pred_i) elsewhere; alpha_i = alpha_pos / alpha_neg
    on positives / negatives. Averaged over all pixels.
    """
    spec = spec or FocalSpec()
    p, t = _paired(pred, target)
    return _focal_mse(p, t, spec).mean()


def _focal_mse(p: torch.Tensor, t: torch.Tensor, spec: FocalSpec) -> torch.Tensor:
    """Elementwise focal-MSE terms; works on any (batched) shape."""
    pos = t == 1
    s = torch.sigmoid(p)
    prob = torch.where(pos, s, 1.0 - s)
    alpha = torch.where(pos, torch.as_tensor(spec.alpha_pos, dtype=p.dtype),
                        torch.as_tensor(spec.alpha_neg, dtype=p.dtype))
    return alpha * (1.0 - prob) ** spec.gamma * (t - p) ** 2


def _gaussian_1d(dtype: torch.dtype) -> torch.Tensor:
    half = SSIM_WINDOW // 2
    coords = torch.arange(-half, half + 1, dtype=dtype)
    g = torch.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _sep_conv(x: torch.Tensor, g: torch.Tensor, dilation: int) -> torch.Tensor:
    """Same-size separable windowed sum (zero padding)."""
    pad = (SSIM_WINDOW // 2) * dilation
    x = F.conv2d(x, g.reshape(1, 1, -1, 1), padding=(pad, 0),
                 dilation=(dilation, 1))
    return F.conv2d(x, g.reshape(1, 1, 1, -1), padding=(0, pad),
                    dilation=(1, dilation))


_WSUM_CACHE: dict = {}


def _weight_sum(shape: tuple[int, int], dtype: torch.dtype, dilation: int
                ) -> torch.Tensor:
    """In-bounds window weight totals per pixel (cached).

    Dividing windowed sums by this renormalizes away taps that fall off
    the grid, so constant inputs have exactly constant local means (and
    zero variance) at every pixel and any dilation.
    """
    key = (shape, dtype, dilation)
    if key not in _WSUM_CACHE:
        with torch.no_grad():
            ones = torch.ones(1, 1, *shape, dtype=dtype)
            _WSUM_CACHE[key] = _sep_conv(ones, _gaussian_1d(dtype), dilation)
    return _WSUM_CACHE[key]


def dms_ssim_loss(pred, target) -> torch.Tensor:
    """Dilated multiscale SSIM loss: 1 - mean over dilation levels of the
    mean local SSIM index.

    Local statistics use an 11x11 Gaussian window (sigma 1.5) at dilation
    rates 1..5; window taps falling off the grid are renormalized away.
    Constants assume unit dynamic range. Returns a value in [0, 2].
    """
    p, t = _paired(pred, target)
    if p.dim() != 2:
        raise ValueError("dms_ssim_loss expects 2-D grids")
    if not (torch.isfinite(p).all() and torch.isfinite(t).all()):
        raise ValueError("dms_ssim_loss inputs must be finite")
    return _dms_ssim(p.reshape(1, 1, *p.shape), t.reshape(1, 1, *t.shape)).mean()


def _dms_ssim(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-image DMS-SSIM losses for a (B, 1, H, W) batch; returns (B,)."""
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(
            f"grid {tuple(x.shape[-2:])} smaller than the "
            f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    window = _gaussian_window(x.dtype)
    level_means = []
    for dilation in SSIM_DILATIONS:
        mx, mx2 = _local_moments(x, window, dilation)
        my, my2 = _local_moments(y, window, dilation)
        pad = (SSIM_WINDOW // 2) * dilation
        ones = torch.ones_like(x)
        wsum = F.conv2d(ones, window, padding=pad, dilation=dilation)
        mxy = F.conv2d(x * y, window, padding=pad, dilation=dilation) / wsum
        vx = mx2 - mx * mx
        vy = my2 - my * my
        cxy = mxy - mx * my
        ssim = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / (
            (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        level_means.append(ssim.mean(dim=(1, 2, 3)))
    return 1.0 - torch.stack(level_means).mean(dim=0)


def phi_total_loss(pred, target, spec: FocalSpec | None = None) -> torch.Tensor:
    """Training objective: focal MSE on the raw response plus DMS-SSIM on
    the sigmoid-activated response."""
    p, t = _paired(pred, target)
    return focal_mse_loss(p, t, spec) + dms_ssim_loss(torch.sigmoid(p), t)


class _ConvBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class Reg2DetModel(nn.Module):
    """4-level U-shaped encoder-decoder with skip connections.

    Takes a one-channel density grid and emits a same-size raw response
    grid trained toward the 0/1 localization map. Inputs whose sides are
    not multiples of 8 are zero-padded and the output cropped back.
    input_gain rescales the small-magnitude density values before the
    first convolution.
    """

    STRIDE = 8

    def __init__(self, base_channels: int = 8, input_gain: float = 64.0):
        super().__init__()
        self.base_channels = base_channels
        self.input_gain = input_gain
        c = base_channels
        self.enc1 = _ConvBlock(1, c)
        self.enc2 = _ConvBlock(c, 2 * c)
        self.enc3 = _ConvBlock(2 * c, 4 * c)
        self.bottom = _ConvBlock(4 * c, 8 * c)
        self.pool = nn.MaxPool2d(2)
        self.up3 = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.dec3 = _ConvBlock(8 * c + 4 * c, 4 * c)
        self.dec2 = _ConvBlock(4 * c + 2 * c, 2 * c)
        self.dec1 = _ConvBlock(2 * c + c, c)
        self.head = nn.Conv2d(c, 1, 1)

    @property
    def init_args(self) -> dict:
        return {"base_channels": self.base_channels, "input_gain": self.input_gain}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        ph = (self.STRIDE - h % self.STRIDE) % self.STRIDE
        pw = (self.STRIDE - w % self.STRIDE) % self.STRIDE
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))
        x = x * self.input_gain
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        b = self.bottom(self.pool(e3))
        d3 = self.dec3(torch.cat([self.up3(b), e3], dim=1))
        d2 = self.dec2(torch.cat([self.up3(d3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up3(d2), e1], dim=1))
        out = self.head(d1)
        return out[..., :h, :w]


def train_phi(pairs, config: TrainConfig | None = None, seed: int = 0,
              model: Reg2DetModel | None = None) -> Reg2DetModel:
    """Train the Reg-to-Det transformer on (DensityMap, LocalizationMap) pairs.

    Deterministic given seed. The per-epoch mean loss curve is stored on the
    returned model as `train_history`. Density maps must follow the same
    kernel rule that will be used at transfer time.
    """
    config = config or TrainConfig()
    pairs = list(pairs)
    if not pairs:
        raise ValueError("train_phi needs a non-empty training set")
    torch.manual_seed(seed)
    if model is None:
        model = Reg2DetModel()
    rng = np.random.default_rng(seed)

    inputs = torch.stack([
        torch.as_tensor(_grid_tensor(d), dtype=torch.float32) for d, _ in pairs])
    targets = torch.stack([
        torch.as_tensor(_grid_tensor(l), dtype=torch.float32) for _, l in pairs])
    inputs = inputs.unsqueeze(1)

    spec = FocalSpec()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history = []
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        epoch_losses = []
        for start in range(0, len(pairs), config.batch_size):
            idx = order[start:start + config.batch_size]
            pred = model(inputs[idx]).squeeze(1)
            batch_t = targets[idx]
            if config.loss == "mse":
                loss = ((batch_t - pred) ** 2).mean()
            else:
                focal = _focal_mse(pred, batch_t, spec).mean(dim=(1, 2))
                ssim = _dms_ssim(torch.sigmoid(pred).unsqueeze(1),
                                 batch_t.unsqueeze(1))
                loss = (focal + ssim).mean()
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}: {loss.detach().item()} "
                    f"(lr={config.learning_rate}, loss={config.loss})")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.detach().item())
        history.append(float(np.mean(epoch_losses)))
    model.eval()
    model.train_history = history
    return model


def apply_phi(model: Reg2DetModel, density: DensityMap | np.ndarray) -> np.ndarray:
    """Run the transformer on a density map; returns the raw response grid."""
    values = density.values if isinstance(density, DensityMap) else np.asarray(density)
    if not np.all(np.isfinite(values)):
        raise ValueError("density map must be finite")
    model.eval()
    with torch.no_grad():
        x = torch.as_tensor(values, dtype=torch.float32).reshape(1, 1, *values.shape)
        out = model(x)
    return out.squeeze(0).squeeze(0).numpy().astype(np.float64)


def binarize_and_merge(response, threshold: float = 0.2, window: int = 10) -> PointSet:
    """Decode a response grid into points.

    Pixels with response > threshold are candidates. Candidates are visited
    in descending response order (ties row-major); each kept pixel
    suppresses every remaining candidate within the window x window square
    centered on it (Chebyshev distance < window / 2). Scores are the
    response values, clipped to the legal [0, 1] score range.
    """
    resp = np.asarray(_grid_tensor(response).detach().cpu().numpy(), dtype=np.float64)
    if resp.ndim != 2:
        raise ValueError("response must be a 2-D grid")
    rows, cols = np.nonzero(resp > threshold)
    if len(rows) == 0:
        return PointSet.empty()
    scores = resp[rows, cols]
    # descending score; ties resolved row-major
    order = np.lexsort((cols, rows, -scores))
    rows, cols, scores = rows[order], cols[order], scores[order]

    half = window / 2.0
    alive = np.ones(len(rows), dtype=bool)
    kept = []
    for i in range(len(rows)):
        if not alive[i]:
            continue
        kept.append(i)
        near = (np.abs(rows - rows[i]) < half) & (np.abs(cols - cols[i]) < half)
        alive &= ~near
    kept = np.asarray(kept, dtype=int)
    points = np.column_stack([cols[kept].astype(np.float64),
                              rows[kept].astype(np.float64)])
    return PointSet(points=points, scores=np.clip(scores[kept], 0.0, 1.0))
