"""Checkpoint directories.

Layout::

    <dir>/manifest.txt        one line per parameter: "<name> <shape>" in model order
    <dir>/params/<name>.tnsr  TNSR v1 snapshots
    <dir>/model.json          estimator hyperparameters + standardizer statistics
    <dir>/config.json         experiment config (optional)
    <dir>/splits.csv          split manifest (optional)

Every file is a pure function of the weights and settings, so retraining with
the same configuration rewrites identical bytes.
"""
from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np

from .backbones import SegmentationNet
from .data import ChannelStandardizer, SplitManifest
from .estimator import FloodSegmenter
from .rng import Stream
from .tensor import load_tensor, save_tensor

FORMAT = "sarfuse-checkpoint v1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(est: FloodSegmenter, directory: str | Path, config_json: str | None = None,
                    splits: SplitManifest | None = None) -> Path:
    directory = Path(directory)
    if directory.exists():
        shutil.rmtree(directory)
    (directory / "params").mkdir(parents=True)
    lines = []
    for name, p in est.net_.named_parameters():
        save_tensor(directory / "params" / f"{name}.tnsr", p.data)
        lines.append(f"{name} {'x'.join(map(str, p.shape))}")
    (directory / "manifest.txt").write_text(FORMAT + "\n" + "\n".join(lines) + "\n")
    model = {
        "params": {k: list(v) if isinstance(v, tuple) else v for k, v in est.get_params().items()},
        "best_epoch": int(getattr(est, "best_epoch_", 0)),
        "standardizer": {
            "mean": [float(x) for x in est.standardizer_.mean_],
            "scale": [float(x) for x in est.standardizer_.scale_],
        },
    }
    (directory / "model.json").write_text(json.dumps(model, sort_keys=True, indent=1) + "\n")
    if config_json is not None:
        (directory / "config.json").write_text(config_json.rstrip("\n") + "\n")
    if splits is not None:
        splits.save(directory / "splits.csv")
    return directory


def load_checkpoint(directory: str | Path) -> FloodSegmenter:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists() or not (directory / "model.json").exists():
        raise CheckpointError(f"{directory} is not a checkpoint directory")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0] != FORMAT:
        raise CheckpointError(f"{manifest}: unrecognised checkpoint format")
    model = json.loads((directory / "model.json").read_text())
    params = dict(model["params"])
    params["augment"] = tuple(params["augment"])
    est = FloodSegmenter(**params)
    est.net_ = SegmentationNet(est.backbone_config(), Stream(0), est.precision)
    state = {}
    for line in lines[1:]:
        name, shape = line.split(" ")
        arr = load_tensor(directory / "params" / f"{name}.tnsr")
        if "x".join(map(str, arr.shape)) != shape:
            raise CheckpointError(f"{name}: stored shape {arr.shape} disagrees with manifest {shape}")
        state[name] = arr
    try:
        est.net_.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint parameters do not fit the declared model: {exc}") from exc
    std = ChannelStandardizer()
    std.mean_ = np.array(model["standardizer"]["mean"])
    std.scale_ = np.array(model["standardizer"]["scale"])
    std.n_features_in_ = len(std.mean_)
    est.standardizer_ = std
    est.n_features_in_ = std.n_features_in_
    est.classes_ = np.array([0, 1])
    est.best_epoch_ = model.get("best_epoch", 0)
    return est
