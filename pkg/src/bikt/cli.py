"""Command-line front end: one subcommand per pipeline stage.

Stages: prepare-synth -> train-source / train-phi -> transfer -> evaluate
/ analyze. Configuration comes from an optional JSON file plus flag
overrides; every run directory is guarded by a lock file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import fingerprint, load_checkpoint, save_checkpoint
from .counting_models import detections_to_pointset, train_detector, train_regressor
from .density_transform import KernelSpec, det_to_reg
from .evaluation import (count_metrics, localization_map, patch_error_profile,
                         points_profile)
from .reg2det_transform import (FocalSpec, LocalizationMap, TrainConfig,
                                train_phi)
from .scene_data import (AnnotatedScene, SceneGenSpec, generate_domain,
                         load_annotations, save_annotations)
from .transfer_loop import (SourceBundle, TransferConfig, load_state,
                            predict_final, run_transfer)

COMMANDS = ("prepare-synth", "train-source", "train-phi", "transfer",
            "evaluate", "analyze")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


@dataclass
class SceneSection:
    """Synthetic two-domain generation settings."""

    height: int = 96
    width: int = 96
    n_source: int = 60
    n_target: int = 24
    n_probe: int = 16
    sparse_intensity: float = 12.0
    dense_intensity: float = 60.0
    cluster_count: int = 3
    cluster_std: float = 3.0
    blob_sigma_lo: float = 1.2
    blob_sigma_hi: float = 2.2
    noise_std: float = 0.02
    dense_fraction: float = 0.5


@dataclass
class TrainSection:
    """Source-stage training settings."""

    epochs: int = 20
    batch_size: int = 8
    reg_lr: float = 1e-3
    det_lr: float = 1e-3
    phi_lr: float = 1e-3
    phi_epochs: int = 20
    phi_loss: str = "total"
    source_fraction: float = 1.0


@dataclass
class TransferSection:
    """Transfer-loop settings (kernel/focal live in their own sections)."""

    cycles: int = 4
    reg_learning_rate: float = 1e-6
    det_learning_rate: float = 1e-5
    freeze_all_but_last_two: bool = True
    epochs_per_cycle: int = 2
    reg_patch_count: int = 2
    det_patch_count: int = 2
    patch_side: int = 224
    nms_radius: float = 5.0
    decode_threshold: float = 0.2
    decode_window: int = 10
    weight_block: int | None = None
    beta_s: float = 1.0
    default_scale: float = 4.0
    batch_size: int = 8
    heat_sigma: float = 2.0
    patch_sampling: str = "percentile"
    early_stop: bool = True


@dataclass
class RunConfig:
    """Fully validated settings for one CLI invocation."""

    seed: int = 0
    out: str = ""
    device: str = "cpu"
    strict: bool = False
    scene: SceneSection = field(default_factory=SceneSection)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    focal: FocalSpec = field(default_factory=FocalSpec)
    train: TrainSection = field(default_factory=TrainSection)
    transfer: TransferSection = field(default_factory=TransferSection)

    def out_dir(self) -> Path:
        root = self.out or os.environ.get("BIKT_OUT", "bikt_runs")
        return Path(root)

    def transfer_config(self) -> TransferConfig:
        section = asdict(self.transfer)
        return TransferConfig(kernel=self.kernel, focal=self.focal,
                              seed=self.seed, **section)


_SCALARS = (int, float, bool, str)


def _coerce(section: str, key: str, default, value):
    name = f"{section}.{key}" if section else key
    if default is None or (key == "weight_block" and value is None):
        if value is not None and not isinstance(value, int):
            raise ConfigError(f"type mismatch for {name}: expected int or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"type mismatch for {name}: expected bool")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"type mismatch for {name}: expected int")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"type mismatch for {name}: expected number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"type mismatch for {name}: expected string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"type mismatch for {name}: expected list of "
                              f"length {len(default)}")
        return tuple(float(v) for v in value)
    raise ConfigError(f"unsupported config key {name}")


def _build_section(cls, data: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    defaults = asdict(cls())
    values = dict(defaults)
    for key, raw in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {section + '.' if section else ''}{key}")
        values[key] = _coerce(section, key, defaults[key], raw)
    try:
        return cls(**values)
    except ValueError as exc:
        raise ConfigError(str(exc))


_SECTIONS = {
    "scene": SceneSection,
    "kernel": KernelSpec,
    "focal": FocalSpec,
    "train": TrainSection,
    "transfer": TransferSection,
}


def parse_config(path: str | Path | None = None,
                 overrides: dict | None = None) -> RunConfig:
    """Build a validated RunConfig from a JSON file plus flag overrides.

    Override keys use dotted paths into sections ("transfer.cycles") or the
    top-level names ("seed", "out", "device", "strict"). Flags win over
    file values; unknown keys and out-of-range values raise ConfigError
    naming the key.
    """
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"malformed config JSON: {exc}")
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            section, sub = key.split(".", 1)
            data.setdefault(section, {})
            if not isinstance(data[section], dict):
                raise ConfigError(f"type mismatch for {section}: expected object")
            data[section][sub] = value
        else:
            data[key] = value

    top_defaults = {"seed": 0, "out": "", "device": "cpu", "strict": False}
    top = dict(top_defaults)
    sections = {name: {} for name in _SECTIONS}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"type mismatch for {key}: expected object")
            sections[key] = value
        elif key in top_defaults:
            top[key] = _coerce("", key, top_defaults[key], value)
        else:
            raise ConfigError(f"unknown key {key}")

    config = RunConfig(
        **top,
        **{name: _build_section(cls, sections[name], name)
           for name, cls in _SECTIONS.items()},
    )
    _validate(config)
    return config


def _validate(config: RunConfig) -> None:
    s = config.scene
    checks = [
        (s.height > 0, "scene.height must be > 0"),
        (s.width > 0, "scene.width must be > 0"),
        (s.n_source > 0, "scene.n_source must be > 0"),
        (s.sparse_intensity >= 0, "scene.sparse_intensity must be >= 0"),
        (s.dense_intensity >= 0, "scene.dense_intensity must be >= 0"),
        (0 < s.blob_sigma_lo <= s.blob_sigma_hi,
         "scene.blob_sigma_lo must satisfy 0 < lo <= hi"),
        (0 <= s.dense_fraction <= 1, "scene.dense_fraction must be in [0, 1]"),
        (config.train.epochs >= 0, "train.epochs must be >= 0"),
        (config.train.reg_lr > 0, "train.reg_lr must be > 0"),
        (config.train.det_lr > 0, "train.det_lr must be > 0"),
        (config.train.phi_lr > 0, "train.phi_lr must be > 0"),
        (0 < config.train.source_fraction <= 1,
         "train.source_fraction must be in (0, 1]"),
        (config.train.phi_loss in ("total", "mse"),
         "train.phi_loss must be 'total' or 'mse'"),
        (0 < config.transfer.decode_threshold < 1,
         "transfer.decode_threshold must be in (0, 1)"),
        (config.transfer.decode_window >= 1,
         "transfer.decode_window must be >= 1"),
        (config.transfer.patch_side >= 8, "transfer.patch_side must be >= 8"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    config.transfer_config()  # runs TransferConfig range validation


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


class StageError(RuntimeError):
    """A prerequisite pipeline stage has not produced its artifact."""

    def __init__(self, message: str, stage: str):
        super().__init__(message)
        self.stage = stage


def _paths(out: Path) -> dict:
    return {
        "source": out / "source.json",
        "target": out / "target.json",
        "probe": out / "probe.json",
        "regressor": out / "checkpoints" / "regressor0.pt",
        "detector": out / "checkpoints" / "detector0.pt",
        "phi": out / "checkpoints" / "phi0.pt",
        "transfer_dir": out / "transfer",
        "final_state": out / "transfer" / "final.pt",
        "metrics": out / "metrics.json",
        "profile": out / "patch_errors.csv",
    }


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"missing artifact {path}; run '{stage}' first", stage)
    return path


def _scene_specs(config: RunConfig):
    s = config.scene
    base = dict(height=s.height, width=s.width,
                blob_sigma_range=(s.blob_sigma_lo, s.blob_sigma_hi),
                noise_std=s.noise_std)
    sparse = SceneGenSpec(process="uniform-poisson",
                          intensity=s.sparse_intensity, seed=config.seed, **base)
    dense = SceneGenSpec(process="thomas-cluster", intensity=s.dense_intensity,
                         cluster_count=s.cluster_count, cluster_std=s.cluster_std,
                         seed=config.seed, **base)
    return sparse, dense


def _mixed_domain(sparse: SceneGenSpec, dense: SceneGenSpec, count: int,
                  dense_fraction: float, tag_prefix: str, seed_offset: int):
    n_dense = int(round(count * dense_fraction))
    n_sparse = count - n_dense
    scenes = generate_domain(sparse, n_sparse, domain_tag=f"{tag_prefix}-sparse",
                             seed_offset=seed_offset)
    scenes += generate_domain(dense, n_dense, domain_tag=f"{tag_prefix}-dense",
                              seed_offset=seed_offset + n_sparse)
    return scenes


def cmd_prepare_synth(config: RunConfig) -> None:
    out = config.out_dir()
    paths = _paths(out)
    sparse, dense = _scene_specs(config)
    s = config.scene
    source = generate_domain(sparse, s.n_source, domain_tag="source",
                             seed_offset=10_000)
    target = _mixed_domain(sparse, dense, s.n_target, s.dense_fraction,
                           "target", seed_offset=20_000)
    probe = _mixed_domain(sparse, dense, s.n_probe, s.dense_fraction,
                          "probe", seed_offset=30_000)
    save_annotations(source, paths["source"])
    save_annotations(target, paths["target"])
    save_annotations(probe, paths["probe"])
    print(f"wrote {len(source)} source / {len(target)} target / "
          f"{len(probe)} probe scenes under {out}")


def _ground_truth_pairs(scenes, kernel: KernelSpec):
    pairs = []
    for scene in scenes:
        h, w = scene.image.height, scene.image.width
        density = det_to_reg(scene.truth, h, w, kernel)
        loc = LocalizationMap.from_points(scene.truth, h, w)
        pairs.append((density, loc))
    return pairs


def cmd_train_source(config: RunConfig) -> None:
    out = config.out_dir()
    paths = _paths(out)
    scenes = load_annotations(_require(paths["source"], "prepare-synth"),
                              strict=config.strict)
    kernel = config.kernel
    densities = [det_to_reg(sc.truth, sc.image.height, sc.image.width, kernel)
                 for sc in scenes]
    images = [sc.image for sc in scenes]
    reg_cfg = TrainConfig(epochs=config.train.epochs,
                          batch_size=config.train.batch_size,
                          learning_rate=config.train.reg_lr)
    regressor = train_regressor(images, densities, reg_cfg, seed=config.seed)
    det_cfg = TrainConfig(epochs=config.train.epochs,
                          batch_size=config.train.batch_size,
                          learning_rate=config.train.det_lr)
    detector = train_detector(images, [sc.truth for sc in scenes], det_cfg,
                              seed=config.seed + 1,
                              heat_sigma=config.transfer.heat_sigma)
    meta = {"kernel_fingerprint": fingerprint(kernel), "seed": config.seed}
    save_checkpoint(paths["regressor"], regressor, meta)
    save_checkpoint(paths["detector"], detector, meta)
    print(f"trained source models; final losses "
          f"reg={regressor.train_history[-1]:.5f} "
          f"det={detector.train_history[-1]:.5f}")


def cmd_train_phi(config: RunConfig) -> None:
    out = config.out_dir()
    paths = _paths(out)
    scenes = load_annotations(_require(paths["source"], "prepare-synth"),
                              strict=config.strict)
    if config.train.source_fraction < 1.0:
        rng = np.random.default_rng(config.seed)
        keep = max(1, int(round(len(scenes) * config.train.source_fraction)))
        idx = sorted(rng.choice(len(scenes), size=keep, replace=False).tolist())
        scenes = [scenes[i] for i in idx]
    pairs = _ground_truth_pairs(scenes, config.kernel)
    cfg = TrainConfig(epochs=config.train.phi_epochs,
                      batch_size=config.train.batch_size,
                      learning_rate=config.train.phi_lr,
                      loss=config.train.phi_loss)
    phi = train_phi(pairs, cfg, seed=config.seed + 2)
    save_checkpoint(paths["phi"], phi, {
        "kernel_fingerprint": fingerprint(config.kernel),
        "focal": asdict(config.focal),
        "loss": config.train.phi_loss,
        "n_scenes": len(scenes),
    })
    print(f"trained reg-to-det transformer on {len(scenes)} scenes; "
          f"final loss {phi.train_history[-1]:.5f}")


def _load_source_bundle(paths) -> SourceBundle:
    regressor, _ = load_checkpoint(_require(paths["regressor"], "train-source"))
    detector, _ = load_checkpoint(_require(paths["detector"], "train-source"))
    phi, _ = load_checkpoint(_require(paths["phi"], "train-phi"))
    return SourceBundle(regressor=regressor, detector=detector, phi=phi)


def cmd_transfer(config: RunConfig) -> None:
    out = config.out_dir()
    paths = _paths(out)
    bundle = _load_source_bundle(paths)
    target = load_annotations(_require(paths["target"], "prepare-synth"),
                              strict=config.strict)
    probe = load_annotations(paths["probe"], strict=config.strict) \
        if paths["probe"].exists() else None
    tc = config.transfer_config()
    state = run_transfer(bundle, [sc.image for sc in target], tc, probe=probe,
                         out_dir=paths["transfer_dir"])
    from .transfer_loop import save_state
    save_state(state, paths["final_state"])
    last = state.reports[-1]
    if last.reg_mae is not None:
        print(f"transfer finished at cycle {state.cycle_index}: "
              f"reg_mae={last.reg_mae:.3f} det_mae={last.det_mae:.3f} "
              f"map={last.map:.3f}")
    else:
        print(f"transfer finished at cycle {state.cycle_index}")


def cmd_evaluate(config: RunConfig) -> None:
    out = config.out_dir()
    paths = _paths(out)
    state = load_state(_require(paths["final_state"], "transfer"))
    probe = load_annotations(_require(paths["probe"], "prepare-synth"),
                             strict=config.strict)
    counts, true_counts, det_points = [], [], []
    for scene in probe:
        count, detections = predict_final(state, scene.image)
        counts.append(count)
        true_counts.append(float(len(scene.truth)))
        det_points.append(detections_to_pointset(detections))
    metrics = count_metrics(counts, true_counts)
    curve = localization_map(det_points, [sc.truth for sc in probe])
    payload = {"mae": metrics.mae, "mse": metrics.mse, "map": curve.map,
               "ap_by_c": curve.aps}
    with open(paths["metrics"], "w") as fh:
        json.dump(payload, fh, sort_keys=True)
    print(f"evaluated {len(probe)} probe scenes: mae={metrics.mae:.3f} "
          f"mse={metrics.mse:.3f} map={curve.map:.3f}")


def cmd_analyze(config: RunConfig) -> None:
    """Per-patch count error profile of the source models on the probe set."""
    import csv

    from .counting_models import detect, regress_density
    out = config.out_dir()
    paths = _paths(out)
    bundle = _load_source_bundle(paths)
    probe = load_annotations(_require(paths["probe"], "prepare-synth"),
                             strict=config.strict)
    min_dim = min(min(sc.image.height, sc.image.width) for sc in probe)
    side = min(config.transfer.patch_side, min_dim)

    truths = [sc.truth for sc in probe]
    reg_maps = [regress_density(bundle.regressor, sc.image) for sc in probe]
    rows = patch_error_profile(reg_maps, truths, side, model="regressor")
    det_points = [detections_to_pointset(
        detect(bundle.detector, sc.image, config.transfer.decode_threshold,
               config.transfer.decode_window)) for sc in probe]
    rows += points_profile(det_points, truths,
                           [sc.image.height for sc in probe],
                           [sc.image.width for sc in probe], side,
                           model="detector")
    with open(paths["profile"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "patch_x", "patch_y", "true_count",
                         "pred_count", "model"])
        for row in rows:
            writer.writerow([row.image_id, row.patch_x, row.patch_y,
                             row.true_count, row.pred_count, row.model])
    print(f"wrote {len(rows)} patch-error rows to {paths['profile']}")


_COMMAND_FUNCS = {
    "prepare-synth": cmd_prepare_synth,
    "train-source": cmd_train_source,
    "train-phi": cmd_train_phi,
    "transfer": cmd_transfer,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
}


class _RunLock:
    """Guards a run directory against concurrent commands."""

    def __init__(self, out: Path):
        self.path = out / ".bikt.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            raise RuntimeError(
                f"run directory is locked by {self.path.read_text().strip()!r}; "
                f"remove {self.path} if stale")
        self.path.write_text(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def execute_command(name: str, config: RunConfig) -> int:
    """Run one pipeline stage; returns a process exit status."""
    if name not in _COMMAND_FUNCS:
        print(json.dumps({"error": f"unknown command {name!r}"}), file=sys.stderr)
        return 2
    try:
        with _RunLock(config.out_dir()):
            _COMMAND_FUNCS[name](config)
        return 0
    except StageError as exc:
        print(json.dumps({"error": str(exc), "missing_stage": exc.stage}),
              file=sys.stderr)
        return 3
    except (ConfigError, FileNotFoundError, RuntimeError, ValueError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bikt",
        description="Regression-detection bi-knowledge transfer pipeline")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=str, default=None,
                        help="JSON config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=str, default=None,
                        help="run directory (default: $BIKT_OUT or ./bikt_runs)")
    parser.add_argument("--cycles", type=int, default=None,
                        help="transfer cycles override")
    parser.add_argument("--source-fraction", type=float, default=None,
                        help="fraction of source scenes used by train-phi")
    parser.add_argument("--device", type=str, default=None)
    parser.add_argument("--strict", action="store_true", default=None,
                        help="abort on any bad annotation record")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "out": args.out,
        "device": args.device,
        "strict": args.strict,
        "transfer.cycles": args.cycles,
        "train.source_fraction": args.source_fraction,
    }
    try:
        config = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 2
    return execute_command(args.command, config)


if __name__ == "__main__":
    sys.exit(main())
