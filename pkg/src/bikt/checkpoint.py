"""Versioned checkpoint container shared by all trainable models."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import torch

CHECKPOINT_FORMAT = "bikt-ckpt-1"


def fingerprint(spec) -> str:
    """Stable JSON fingerprint of a dataclass (e.g. the kernel rule)."""
    return json.dumps(dataclasses.asdict(spec), sort_keys=True)


def _model_registry():
    from .counting_models import DetectionModel, RegressionModel
    from .reg2det_transform import Reg2DetModel
    return {
        "Reg2DetModel": Reg2DetModel,
        "RegressionModel": RegressionModel,
        "DetectionModel": DetectionModel,
    }


def save_checkpoint(path: str | Path, model, extra: dict | None = None) -> None:
    """Persist a model with its constructor arguments and metadata."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "class": type(model).__name__,
        "init_args": model.init_args,
        "state": model.state_dict(),
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path):
    """Reconstruct (model, extra) from a checkpoint file."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format in {path}")
    cls = _model_registry()[payload["class"]]
    model = cls(**payload["init_args"])
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload["extra"]
