"""Command-line entry point: ``sarfuse {synth,train,eval,predict,compare}``.

Relative dataset paths resolve against ``$SARFUSE_DATA_ROOT`` and relative
output paths against ``$SARFUSE_OUTPUT_ROOT`` (both default to the working
directory).  Outputs are built under ``<name>.partial`` and renamed into place
only on success; a failed command leaves the ``.partial`` copy behind and
exits with status 1.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backbones import BACKBONES, FUSION_MODES, MODE_LABELS, binarize
from .checkpoint import load_checkpoint
from .data import SplitManifest, load_scene, ratio_features, write_raster
from .estimator import FloodSegmenter
from .metrics import ConfusionCounts, MetricRow, accumulate, report
from .synth import CLASS_NAMES, CoverClass, SynthConfig, generate_benchmark
from .training import ExperimentConfig, prepare_dataset, run_ablation, stack_split, train

DATA_ENV = "SARFUSE_DATA_ROOT"
OUTPUT_ENV = "SARFUSE_OUTPUT_ROOT"
PARTIAL = ".partial"


class CliError(RuntimeError):
    pass


def data_path(p: str | Path) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(os.environ.get(DATA_ENV, ".")) / p


def output_path(p: str | Path) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(os.environ.get(OUTPUT_ENV, ".")) / p


@contextlib.contextmanager
def staged(final: Path):
    """Yield a ``.partial`` sibling of ``final``; move it into place on success."""
    final = Path(final)
    tmp = final.with_name(final.name + PARTIAL)
    if tmp.exists():
        shutil.rmtree(tmp) if tmp.is_dir() else tmp.unlink()
    tmp.parent.mkdir(parents=True, exist_ok=True)
    yield tmp
    if final.exists():
        shutil.rmtree(final) if final.is_dir() else final.unlink()
    tmp.rename(final)


# -- synth --------------------------------------------------------------------
def cmd_synth(args) -> None:
    classes = {c.name: c for c in SynthConfig().classes}
    for name, vv, vh in args.class_means or []:
        if name not in classes:
            raise CliError(f"unknown cover class {name!r}; expected one of {CLASS_NAMES}")
        classes[name] = CoverClass(name, float(vv), float(vh), classes[name].flooded)
    cfg = SynthConfig(height=args.height, width=args.width, smoothness=args.smoothness,
                      blur_passes=args.blur_passes, flood_fraction=args.flood_fraction,
                      vegetation_fraction=args.vegetation_fraction, looks=args.looks, seed=args.seed,
                      pixel_size=args.pixel_size, classes=tuple(classes[n] for n in CLASS_NAMES),
                      depth=args.depth)
    out = data_path(args.out)
    with staged(out) as tmp:
        generate_benchmark(cfg, args.n_scenes, tmp)
    print(f"wrote {args.n_scenes} scenes and {out / 'manifest.csv'}")


# -- train --------------------------------------------------------------------
def load_config(path: str | None, seed: int | None = None, manifest: str | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if manifest is not None:
        cfg = replace(cfg, manifest=manifest)
    return replace(cfg, manifest=str(data_path(cfg.manifest)))


def cmd_train(args) -> None:
    if args.dump_config:
        sys.stdout.write(ExperimentConfig().to_json())
        return
    cfg = load_config(args.config, args.seed, args.manifest)
    out = output_path(args.out)
    with staged(out) as tmp:
        result = train(cfg, tmp)
        csv_text, table = report([MetricRow(MODE_LABELS[cfg.fusion], result.log.test_counts)])
        (tmp / "metrics.csv").write_text(csv_text)
        (tmp / "metrics.txt").write_text(table)
    sys.stdout.write(table)


# -- eval ---------------------------------------------------------------------
def evaluate_split(predict: Callable[[np.ndarray], np.ndarray], X: np.ndarray, y: np.ndarray,
                   batch: int = 16) -> ConfusionCounts:
    """Micro-aggregated counts of ``predict`` over a stacked split.

    ``predict`` maps (n, 4, h, w) stacks to (n, h, w) binary masks, which lets
    tests substitute an oracle for a trained model.
    """
    if X.shape[0] == 0:
        raise CliError("cannot evaluate an empty split")
    counts = None
    for start in range(0, X.shape[0], batch):
        counts = accumulate(counts, predict(X[start:start + batch]), y[start:start + batch])
    return counts


def eval_checkpoint(checkpoint: Path, manifest: Path, split: str,
                    splits_csv: Path | None = None) -> tuple[ConfusionCounts, FloodSegmenter]:
    est = load_checkpoint(checkpoint)
    cfg_file = checkpoint / "config.json"
    cfg = ExperimentConfig.load(cfg_file) if cfg_file.exists() else ExperimentConfig()
    cfg = replace(cfg, manifest=str(manifest))
    splits_csv = splits_csv or checkpoint / "splits.csv"
    if not splits_csv.exists():
        raise CliError(f"no split manifest at {splits_csv}")
    splits = SplitManifest.load(splits_csv, cfg.patch_size)
    if split not in splits.splits or not splits.splits[split]:
        raise CliError(f"split {split!r} is empty or absent in {splits_csv}")
    try:
        data = prepare_dataset(cfg, splits)
    except ValueError as exc:
        raise CliError(f"checkpoint and dataset manifest are incompatible: {exc}") from exc
    X, y = data.arrays[split]
    return evaluate_split(est.predict, X, y), est


def cmd_eval(args) -> None:
    checkpoint = output_path(args.checkpoint)
    counts, est = eval_checkpoint(checkpoint, data_path(args.manifest), args.split,
                                  Path(args.splits) if args.splits else None)
    csv_text, table = report([MetricRow(MODE_LABELS[est.fusion], counts)])
    out = output_path(args.out)
    with staged(out) as tmp:
        tmp.mkdir()
        (tmp / "metrics.csv").write_text(csv_text)
        (tmp / "metrics.txt").write_text(table)
    sys.stdout.write(table)


# -- predict ------------------------------------------------------------------
def _tiles(extent: int, size: int) -> list[tuple[int, int]]:
    return [(a, min(a + size, extent)) for a in range(0, extent, size)]


def predict_scene(est: FloodSegmenter, vv: np.ndarray, vh: np.ndarray, patch: int) -> np.ndarray:
    """Probability map from non-overlapping ``patch`` tiles, stitched in place.

    Edge tiles may be smaller than ``patch`` but must still divide by
    ``2**depth``; the scene is never padded or resized.
    """
    h, w = vv.shape
    unit = 2 ** est.depth
    rows, cols = _tiles(h, patch), _tiles(w, patch)
    for a, e in rows + cols:
        if (e - a) % unit:
            raise CliError(
                f"scene {h}x{w} leaves a {e - a}-pixel tile not divisible by 2^{est.depth}; "
                "refusing to pad or resize")
    feats = ratio_features(vv, vh)
    prob = np.empty((h, w), dtype=np.float32)
    for r0, r1 in rows:
        for c0, c1 in cols:
            prob[r0:r1, c0:c1] = est.predict_proba(feats[None, :, r0:r1, c0:c1])[0]
    return prob


def _png(path: Path, arr: np.ndarray) -> None:
    from PIL import Image
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, optimize=False)


def cmd_predict(args) -> None:
    est = load_checkpoint(output_path(args.checkpoint))
    cfg_file = output_path(args.checkpoint) / "config.json"
    patch = ExperimentConfig.load(cfg_file).patch_size if cfg_file.exists() else 64
    scene = load_scene(data_path(args.scene))
    prob = predict_scene(est, scene.vv, scene.vh, patch)
    mask = binarize(prob, args.tau)
    out = output_path(args.out)
    sid = scene.id
    with staged(out) as tmp:
        tmp.mkdir()
        write_raster(tmp / f"{sid}.pred.mask.u8r", mask)
        write_raster(tmp / f"{sid}.pred.prob.f32r", prob)
        header = {"id": sid, "height": scene.shape[0], "width": scene.shape[1], "pixel_size": scene.pixel_size,
                  "tau": args.tau, "files": {"mask": f"{sid}.pred.mask.u8r", "prob": f"{sid}.pred.prob.f32r"}}
        (tmp / f"{sid}.pred.json").write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")
        _png(tmp / f"{sid}.pred.mask.png", mask * 255)
        _png(tmp / f"{sid}.pred.prob.png", np.round(prob * 255))
    print(f"flooded fraction {mask.mean():.4f}; wrote {out}")


# -- compare ------------------------------------------------------------------
def compare(cfg: ExperimentConfig, seeds: Sequence[int], out: Path, backbones: Sequence[str] = BACKBONES,
            n_jobs: int = 1) -> dict:
    """Run the five-mode ablation for each backbone; write one report per backbone."""
    results = {}
    with staged(out) as tmp:
        tmp.mkdir()
        texts = []
        for kind in backbones:
            res = run_ablation(replace(cfg, backbone=kind), FUSION_MODES, seeds, tmp / "runs", n_jobs)
            csv_text, table = res.report()
            (tmp / f"report_{kind}.csv").write_text(csv_text)
            (tmp / f"report_{kind}.txt").write_text(table)
            texts.append(f"[{kind}] seeds {', '.join(map(str, seeds))}\n{table}")
            results[kind] = res
        (tmp / "report.txt").write_text("\n".join(texts))
        (tmp / "config.json").write_text(cfg.to_json())
    return results


def cmd_compare(args) -> None:
    cfg = load_config(args.config, None, args.manifest)
    out = output_path(args.out)
    compare(cfg, args.seeds, out, args.backbones, args.n_jobs)
    sys.stdout.write((out / "report.txt").read_text())


# -- parser -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sarfuse", description="Dual-polarization SAR flood segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)
    d = SynthConfig()

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--out", default="data")
    p.add_argument("--n-scenes", type=int, default=10)
    p.add_argument("--height", type=int, default=d.height)
    p.add_argument("--width", type=int, default=d.width)
    p.add_argument("--smoothness", type=int, default=d.smoothness)
    p.add_argument("--blur-passes", type=int, default=d.blur_passes)
    p.add_argument("--flood-fraction", type=float, default=d.flood_fraction)
    p.add_argument("--vegetation-fraction", type=float, default=d.vegetation_fraction)
    p.add_argument("--looks", type=int, default=d.looks)
    p.add_argument("--pixel-size", type=float, default=d.pixel_size)
    p.add_argument("--depth", type=int, default=d.depth)
    p.add_argument("--class-means", nargs=3, action="append", metavar=("CLASS", "VV", "VH"),
                   help="override one cover class's mean linear backscatter (repeatable)")
    p.add_argument("--seed", type=int, default=d.seed)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("--config", help="canonical JSON experiment config (defaults if omitted)")
    p.add_argument("--manifest", help="dataset manifest, overrides the config")
    p.add_argument("--out", default="run")
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-config", action="store_true", help="print the default config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--splits", help="split manifest CSV (default: the checkpoint's splits.csv)")
    p.add_argument("--out", default="eval")
    p.add_argument("--seed", type=int, help="accepted for uniformity; evaluation draws no random numbers")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict a flood mask for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene sidecar (.json)")
    p.add_argument("--out", default="prediction")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--seed", type=int, help="accepted for uniformity; prediction draws no random numbers")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare", help="five-mode ablation for both backbones")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--backbones", nargs="+", choices=BACKBONES, default=list(BACKBONES))
    p.add_argument("--n-jobs", type=int, default=1)
    p.add_argument("--out", default="compare")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CliError, ValueError, OSError, KeyError, FloatingPointError) as exc:
        print(f"sarfuse {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
