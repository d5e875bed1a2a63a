"""Iterative self-supervised bi-knowledge transfer.

Each cycle: (1) run the current regressor and detector on every target
image; (2) build fused pseudo ground truth through the two transformers;
(3) fine-tune both models on patches sampled from the pseudo labels. The
Reg-to-Det transformer stays frozen; it was fitted in the source and is
treated as scene-agnostic.
"""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import fingerprint
from .counting_models import (DENSITY_GAIN, Detection, DetectionModel,
                              RegressionModel, center_heatmap, detect,
                              detections_to_pointset, regress_density)
from .density_transform import KernelSpec, density_count, det_to_reg
from .evaluation import count_metrics, localization_map
from .fusion import (DensityPatch, DetectionPatch, PseudoLabels, _tile_windows,
                     build_weight_map, fuse_density, fuse_detections,
                     restore_scales, sample_detection_patches,
                     sample_random_patches, sample_regression_patches)
from .reg2det_transform import (FocalSpec, Reg2DetModel, ScaleMap, _focal_mse,
                                apply_phi, binarize_and_merge)
from .scene_data import AnnotatedScene, ImageGrid, PointSet


@dataclass
class TransferConfig:
    """Settings of the transfer loop.

    The learning-rate and freeze defaults are the full-scale values; the
    small reference models want larger rates (see the synthetic presets in
    cli).
    """

    cycles: int = 4
    reg_learning_rate: float = 1e-6
    det_learning_rate: float = 1e-5
    freeze_all_but_last_two: bool = True
    epochs_per_cycle: int = 2
    reg_patch_count: int = 2
    det_patch_count: int = 2
    patch_side: int = 224
    kernel: KernelSpec = field(default_factory=KernelSpec)
    focal: FocalSpec = field(default_factory=FocalSpec)
    nms_radius: float = 5.0
    decode_threshold: float = 0.2
    decode_window: int = 10
    weight_block: int | None = None  # None: kernel footprint size
    beta_s: float = 1.0
    default_scale: float = 4.0
    batch_size: int = 8
    heat_sigma: float = 2.0
    patch_sampling: str = "percentile"  # "random" reproduces the RS ablation
    early_stop: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")
        if self.reg_learning_rate <= 0 or self.det_learning_rate <= 0:
            raise ValueError("learning rates must be > 0")
        if self.epochs_per_cycle < 0:
            raise ValueError("epochs_per_cycle must be >= 0")
        if self.patch_sampling not in ("percentile", "random"):
            raise ValueError(f"unknown patch_sampling: {self.patch_sampling!r}")


@dataclass
class CycleReport:
    """Probe metrics and pseudo-label stats for one cycle."""

    cycle: int
    reg_mae: float | None = None
    reg_mse: float | None = None
    det_mae: float | None = None
    det_mse: float | None = None
    map: float | None = None
    mean_fused_count: float = 0.0
    n_images: int = 0
    wall_clock: float = 0.0


@dataclass
class SourceBundle:
    """Source-trained models entering the transfer."""

    regressor: RegressionModel
    detector: DetectionModel
    phi: Reg2DetModel


@dataclass
class TransferState:
    """Models plus progress of the transfer loop."""

    regressor: RegressionModel
    detector: DetectionModel
    phi: Reg2DetModel
    config: TransferConfig
    cycle_index: int = 0
    reports: list[CycleReport] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.config.seed


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _crop(image: ImageGrid, x0: int, y0: int, width: int, height: int) -> np.ndarray:
    if image.channels == 1:
        return image.values[y0:y0 + height, x0:x0 + width]
    return image.values[y0:y0 + height, x0:x0 + width, :]


def make_pseudo_labels(regressor: RegressionModel, detector: DetectionModel,
                       phi: Reg2DetModel, image: ImageGrid,
                       config: TransferConfig, cycle: int = 0,
                       image_index: int = 0) -> PseudoLabels:
    """Steps (1) and (2) of a cycle for one image."""
    h, w = image.height, image.width
    reg_map = regress_density(regressor, image)
    dets = detect(detector, image, config.decode_threshold, config.decode_window)
    det_points = detections_to_pointset(dets)
    det_density = det_to_reg(det_points, h, w, config.kernel)
    k = config.weight_block or config.kernel.window_size(det_points)
    weights = build_weight_map(dets, h, w, k)
    fused_density = fuse_density(reg_map, det_density, weights)

    phi_points = binarize_and_merge(apply_phi(phi, reg_map),
                                    threshold=config.decode_threshold,
                                    window=config.decode_window)
    fused_dets = fuse_detections(dets, phi_points, config.nms_radius)
    fused_dets = restore_scales(fused_dets, dets, h, beta_s=config.beta_s,
                                default_scale=config.default_scale)

    patch_seed = _derived_seed(config.seed, cycle, image_index)
    if config.patch_sampling == "percentile":
        reg_patches = sample_regression_patches(
            fused_density, count=config.reg_patch_count,
            side=config.patch_side, seed=patch_seed)
        det_patches = sample_detection_patches(
            fused_dets, h, w, count=config.det_patch_count,
            side=config.patch_side)
    else:
        reg_patches = sample_random_patches(
            fused_density, count=config.reg_patch_count,
            side=config.patch_side, seed=patch_seed)
        det_patches = _random_detection_patches(
            fused_dets, h, w, count=config.det_patch_count,
            side=config.patch_side, seed=_derived_seed(patch_seed, 1))
    return PseudoLabels(fused_density=fused_density, fused_detections=fused_dets,
                        reg_patches=reg_patches, det_patches=det_patches)


def _random_detection_patches(fused, height, width, count, side, seed):
    windows = _tile_windows(height, width, side)
    rng = np.random.default_rng(seed)
    chosen = (rng.choice(len(windows), size=count, replace=False)
              if len(windows) > count else np.arange(len(windows)))
    patches = []
    for j in sorted(int(c) for c in chosen):
        x0, y0, w, h = windows[j]
        local = [Detection(x=d.x - x0, y=d.y - y0, scale=d.scale, score=d.score)
                 for d in fused if x0 <= d.x < x0 + w and y0 <= d.y < y0 + h]
        patches.append(DetectionPatch(x0=x0, y0=y0, width=w, height=h,
                                      detections=local))
    return patches


def _set_freeze(model, freeze_all_but_last_two: bool) -> None:
    if not freeze_all_but_last_two:
        for p in model.parameters():
            p.requires_grad_(True)
        return
    for p in model.parameters():
        p.requires_grad_(False)
    for layer in model.last_two_parameter_layers():
        for p in layer.parameters():
            p.requires_grad_(True)


def _shape_batches(samples, batch_size, rng):
    """Shuffle then yield index batches grouped by input shape."""
    order = rng.permutation(len(samples))
    by_shape: dict = {}
    for i in order:
        by_shape.setdefault(samples[int(i)][0].shape, []).append(int(i))
    for shape in sorted(by_shape, key=str):
        group = by_shape[shape]
        for start in range(0, len(group), batch_size):
            yield group[start:start + batch_size]


def _to_input(arr: np.ndarray) -> torch.Tensor:
    t = torch.as_tensor(arr, dtype=torch.float32)
    if t.dim() == 2:
        return t.unsqueeze(0)
    return t.movedim(-1, 0)


def fine_tune_regressor(model: RegressionModel,
                        samples: Sequence[tuple[np.ndarray, np.ndarray]],
                        config: TransferConfig, cycle: int) -> None:
    """Fine-tune in place on (image crop, pseudo density) pairs."""
    if config.epochs_per_cycle == 0 or not samples:
        return
    torch.manual_seed(_derived_seed(config.seed, cycle, 11))
    rng = np.random.default_rng(_derived_seed(config.seed, cycle, 12))
    _set_freeze(model, config.freeze_all_but_last_two)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.reg_learning_rate)
    model.train()
    try:
        for _ in range(config.epochs_per_cycle):
            for batch_idx in _shape_batches(samples, config.batch_size, rng):
                inputs = torch.stack([_to_input(samples[i][0]) for i in batch_idx])
                targets = torch.stack([
                    torch.as_tensor(samples[i][1], dtype=torch.float32)
                    for i in batch_idx]) * DENSITY_GAIN
                pred = model(inputs).squeeze(1)
                loss = ((pred - targets) ** 2).mean()
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite regressor fine-tune loss in cycle {cycle}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
        model.eval()


def fine_tune_detector(model: DetectionModel,
                       samples: Sequence[tuple[np.ndarray, list[Detection]]],
                       config: TransferConfig, cycle: int) -> None:
    """Fine-tune in place on (image crop, pseudo detections) pairs.

    All detector layers update (the freeze policy only covers the
    regressor).
    """
    if config.epochs_per_cycle == 0 or not samples:
        return
    torch.manual_seed(_derived_seed(config.seed, cycle, 21))
    rng = np.random.default_rng(_derived_seed(config.seed, cycle, 22))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.det_learning_rate)
    model.train()

    prepared = []
    for crop, dets in samples:
        h, w = crop.shape[:2]
        points = detections_to_pointset(dets)
        heat = center_heatmap(points, h, w, sigma=config.heat_sigma)
        smap = ScaleMap.from_points(points, h, w).values if len(points) else \
            np.zeros((h, w))
        prepared.append((crop, heat, smap))

    try:
        for _ in range(config.epochs_per_cycle):
            for batch_idx in _shape_batches(prepared, config.batch_size, rng):
                inputs = torch.stack([_to_input(prepared[i][0]) for i in batch_idx])
                heats = torch.stack([
                    torch.as_tensor(prepared[i][1], dtype=torch.float32)
                    for i in batch_idx])
                smaps = torch.stack([
                    torch.as_tensor(prepared[i][2], dtype=torch.float32)
                    for i in batch_idx])
                center, scale = model(inputs)
                center = center.squeeze(1)
                scale = scale.squeeze(1)
                loss = _focal_mse(center, heats, config.focal).mean()
                pos = smaps > 0
                if pos.any():
                    loss = loss + 0.1 * ((torch.log(scale[pos] + 1e-6) -
                                          torch.log(smaps[pos])) ** 2).mean()
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite detector fine-tune loss in cycle {cycle}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
    finally:
        model.eval()


def evaluate_models(regressor: RegressionModel, detector: DetectionModel,
                    probe: Sequence[AnnotatedScene], config: TransferConfig
                    ) -> dict:
    """Counting MAE/MSE of both models plus detector localization mAP."""
    true_counts = [float(len(s.truth)) for s in probe]
    reg_counts, det_counts, det_points = [], [], []
    for scene in probe:
        reg_counts.append(density_count(regress_density(regressor, scene.image)))
        dets = detect(detector, scene.image, config.decode_threshold,
                      config.decode_window)
        det_counts.append(float(len(dets)))
        det_points.append(detections_to_pointset(dets))
    reg = count_metrics(reg_counts, true_counts)
    det = count_metrics(det_counts, true_counts)
    curve = localization_map(det_points, [s.truth for s in probe])
    return {"reg_mae": reg.mae, "reg_mse": reg.mse, "det_mae": det.mae,
            "det_mse": det.mse, "map": curve.map}


def run_cycle(state: TransferState, target_images: Sequence[ImageGrid],
              config: TransferConfig | None = None,
              probe: Sequence[AnnotatedScene] | None = None) -> TransferState:
    """One full inference -> pseudo-label -> fine-tune cycle.

    Returns a new state with cycle_index + 1; the input state is left
    untouched (so a failed fine-tune preserves the last good cycle).
    """
    config = config or state.config
    target_images = list(target_images)
    if not target_images:
        raise ValueError("run_cycle needs a non-empty target set")
    started = time.perf_counter()
    cycle = state.cycle_index

    reg_samples, det_samples, fused_counts = [], [], []
    for i, image in enumerate(target_images):
        labels = make_pseudo_labels(state.regressor, state.detector, state.phi,
                                    image, config, cycle=cycle, image_index=i)
        fused_counts.append(density_count(labels.fused_density))
        for patch in labels.reg_patches:
            crop = _crop(image, patch.x0, patch.y0, patch.width, patch.height)
            reg_samples.append((crop, patch.density))
        for patch in labels.det_patches:
            crop = _crop(image, patch.x0, patch.y0, patch.width, patch.height)
            det_samples.append((crop, patch.detections))

    regressor = copy.deepcopy(state.regressor)
    detector = copy.deepcopy(state.detector)
    fine_tune_regressor(regressor, reg_samples, config, cycle)
    fine_tune_detector(detector, det_samples, config, cycle)

    report = CycleReport(cycle=cycle + 1,
                         mean_fused_count=float(np.mean(fused_counts)),
                         n_images=len(target_images))
    if probe:
        report_metrics = evaluate_models(regressor, detector, probe, config)
        for key, value in report_metrics.items():
            setattr(report, key, value)
    report.wall_clock = time.perf_counter() - started
    return TransferState(regressor=regressor, detector=detector, phi=state.phi,
                         config=config, cycle_index=cycle + 1,
                         reports=state.reports + [report])


def _baseline_report(state: TransferState,
                     probe: Sequence[AnnotatedScene] | None) -> CycleReport:
    report = CycleReport(cycle=0)
    if probe:
        for key, value in evaluate_models(state.regressor, state.detector,
                                          probe, state.config).items():
            setattr(report, key, value)
    return report


METRIC_COLUMNS = ("cycle", "reg_mae", "reg_mse", "det_mae", "det_mse", "map")


def _append_metrics_row(path: Path, report: CycleReport) -> None:
    new_file = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(METRIC_COLUMNS)
        writer.writerow([getattr(report, col) for col in METRIC_COLUMNS])


def save_state(state: TransferState, path: str | Path) -> None:
    payload = {
        "format": "bikt-transfer-1",
        "config": state.config,
        "cycle_index": state.cycle_index,
        "reports": state.reports,
        "kernel_fingerprint": fingerprint(state.config.kernel),
        "models": {
            name: {"class": type(m).__name__, "init_args": m.init_args,
                   "state": m.state_dict()}
            for name, m in (("regressor", state.regressor),
                            ("detector", state.detector),
                            ("phi", state.phi))
        },
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_state(path: str | Path) -> TransferState:
    from .checkpoint import _model_registry
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "bikt-transfer-1":
        raise ValueError(f"unsupported transfer state format in {path}")
    models = {}
    registry = _model_registry()
    for name, entry in payload["models"].items():
        model = registry[entry["class"]](**entry["init_args"])
        model.load_state_dict(entry["state"])
        model.eval()
        models[name] = model
    return TransferState(regressor=models["regressor"], detector=models["detector"],
                         phi=models["phi"], config=payload["config"],
                         cycle_index=payload["cycle_index"],
                         reports=payload["reports"])


def run_transfer(source: SourceBundle | TransferState,
                 target_images: Sequence[ImageGrid],
                 config: TransferConfig,
                 probe: Sequence[AnnotatedScene] | None = None,
                 out_dir: str | Path | None = None) -> TransferState:
    """Run up to config.cycles transfer cycles from source-trained models.

    Resumes when given a TransferState instead of a SourceBundle. Early
    stop triggers when the probe regression MAE worsens on two consecutive
    cycles. A checkpoint and a metrics CSV row are written per cycle when
    out_dir is set.
    """
    if isinstance(source, TransferState):
        state = source
        if state.config is not config:
            state = TransferState(regressor=state.regressor, detector=state.detector,
                                  phi=state.phi, config=config,
                                  cycle_index=state.cycle_index,
                                  reports=list(state.reports))
    else:
        state = TransferState(regressor=copy.deepcopy(source.regressor),
                              detector=copy.deepcopy(source.detector),
                              phi=copy.deepcopy(source.phi), config=config)
        state.reports.append(_baseline_report(state, probe))

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_csv = out_dir / "metrics.csv"
        if state.cycle_index == 0:
            metrics_csv.unlink(missing_ok=True)
            _append_metrics_row(metrics_csv, state.reports[-1])

    while state.cycle_index < config.cycles:
        state = run_cycle(state, target_images, config, probe)
        if out_dir is not None:
            _append_metrics_row(metrics_csv, state.reports[-1])
            save_state(state, out_dir / f"cycle_{state.cycle_index:02d}.pt")
        if config.early_stop and probe and len(state.reports) >= 3:
            maes = [r.reg_mae for r in state.reports[-3:]]
            if None not in maes and maes[2] > maes[1] > maes[0]:
                break
    return state


def predict_final(state: TransferState, image: ImageGrid
                  ) -> tuple[float, list[Detection]]:
    """Merged test-time prediction with the transferred models.

    The count comes from the weight-map fusion of the regressor's density
    with the rasterized detections; the detections come from fusing the
    detector's output with the transformed regression result.
    """
    config = state.config
    labels = make_pseudo_labels(state.regressor, state.detector, state.phi,
                                image, config, cycle=state.cycle_index,
                                image_index=0)
    return density_count(labels.fused_density), labels.fused_detections
