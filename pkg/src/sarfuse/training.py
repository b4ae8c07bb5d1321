"""Experiment configs, single training runs and the five-way fusion ablation."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbones import FUSION_MODES, MODE_LABELS
from .checkpoint import save_checkpoint
from .data import Patch, SplitManifest, extract_patches, load_manifest_scenes, split_patches
from .estimator import DEFAULT_AUGMENT, EpochRecord, FloodSegmenter
from .metrics import ConfusionCounts, MetricRow, f1, iou, oa, report
from .rng import Stream


@dataclass(frozen=True)
class ExperimentConfig:
    manifest: str = "data/manifest.csv"
    backbone: str = "unet"
    fusion: str = "cpf"
    depth: int = 3
    base_width: int = 16
    stem_width: int = 16
    stem_depth: int = 2
    cpf_reduction: int = 4
    spatial_kernel: int = 7
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 30
    patch_size: int = 64
    augment: tuple[str, ...] = DEFAULT_AUGMENT
    split_fractions: tuple[float, ...] = (0.7, 0.1, 0.2)
    seed: int = 0
    precision: str = "standard"

    def __post_init__(self):
        object.__setattr__(self, "augment", tuple(self.augment))
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.patch_size % 2 ** self.depth:
            raise ValueError(f"patch size {self.patch_size} not divisible by 2^{self.depth}")
        if len(self.split_fractions) != 3:
            raise ValueError("split_fractions must give (train, val, test)")

    def to_json(self) -> str:
        """Canonical text form: sorted keys, fixed indentation."""
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def estimator(self, seed: int | None = None) -> FloodSegmenter:
        return FloodSegmenter(
            backbone=self.backbone, fusion=self.fusion, depth=self.depth, base_width=self.base_width,
            stem_width=self.stem_width, stem_depth=self.stem_depth, cpf_reduction=self.cpf_reduction,
            spatial_kernel=self.spatial_kernel, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
            adam_eps=self.adam_eps, batch_size=self.batch_size, epochs=self.epochs,
            augment=self.augment, seed=self.seed if seed is None else seed, precision=self.precision,
        )


@dataclass
class TrainLog:
    epochs: list[EpochRecord]
    test_counts: ConfusionCounts
    best_epoch: int
    train_counts: ConfusionCounts | None = None

    def to_csv(self, wall_time: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_iou"] + (["wall_time"] if wall_time else []))
        for r in self.epochs:
            row = [r.epoch, repr(r.train_loss), "" if r.val_iou is None else repr(r.val_iou)]
            writer.writerow(row + ([f"{r.wall_time:.3f}"] if wall_time else []))
        return buf.getvalue()

    def deterministic_view(self) -> tuple:
        """Everything except wall-clock time."""
        return (tuple((r.epoch, r.train_loss, r.val_iou) for r in self.epochs),
                self.test_counts, self.best_epoch, self.train_counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, TrainLog) and self.deterministic_view() == other.deterministic_view()


@dataclass
class Dataset:
    """Patches of one benchmark, split, stacked as arrays."""

    manifest: SplitManifest
    arrays: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.arrays or self.arrays[name][0].shape[0] == 0:
            raise ValueError(f"split {name!r} is empty or missing")
        return self.arrays[name]


def split_seed(seed: int) -> int:
    return Stream(seed).child("split").seed_int()


def model_seed(seed: int) -> int:
    return Stream(seed).child("model").seed_int()


def stack_split(patches: Sequence[Patch], keys) -> tuple[np.ndarray, np.ndarray]:
    lookup = {p.key: p for p in patches}
    missing = [k for k in keys if k not in lookup]
    if missing:
        raise ValueError(f"split manifest references unknown patches, e.g. {missing[0]}")
    if not keys:
        size = next(iter(lookup.values())).features.size if lookup else 0
        return np.zeros((0, 4, size, size), np.float32), np.zeros((0, size, size), np.uint8)
    return (np.stack([lookup[k].features.channels for k in keys]),
            np.stack([lookup[k].mask for k in keys]))


def prepare_dataset(cfg: ExperimentConfig, manifest: SplitManifest | None = None) -> Dataset:
    """Load scenes, tile them into non-overlapping patches and split by the config seed."""
    scenes = load_manifest_scenes(cfg.manifest)
    patches = [p for s in scenes for p in extract_patches(s, cfg.patch_size)]
    if manifest is None:
        manifest = split_patches(patches, cfg.split_fractions, split_seed(cfg.seed), names=("train", "val", "test"))
    arrays = {name: stack_split(patches, keys) for name, keys in manifest.splits.items()}
    return Dataset(manifest, arrays)


@dataclass
class RunResult:
    config: ExperimentConfig
    log: TrainLog
    estimator: FloodSegmenter
    dataset: Dataset


def train(cfg: ExperimentConfig, out_dir: str | Path | None = None, dataset: Dataset | None = None) -> RunResult:
    """Train one model; optionally write ``checkpoint/`` and ``train_log.csv`` under ``out_dir``."""
    dataset = dataset if dataset is not None else prepare_dataset(cfg)
    X_tr, y_tr = dataset.split("train")
    val = dataset.arrays.get("val")
    X_val, y_val = (val if val is not None and val[0].shape[0] else (None, None))
    est = cfg.estimator(seed=model_seed(cfg.seed))
    est.fit(X_tr, y_tr, X_val, y_val)
    X_te, y_te = dataset.split("test")
    log = TrainLog(est.history_, est.confusion(X_te, y_te), est.best_epoch_, est.confusion(X_tr, y_tr))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(est, out_dir / "checkpoint", cfg.to_json(), dataset.manifest)
        (out_dir / "train_log.csv").write_text(log.to_csv())
    return RunResult(cfg, log, est, dataset)


@dataclass
class AblationResult:
    backbone: str
    modes: tuple[str, ...]
    seeds: tuple[int, ...]
    logs: dict[tuple[str, int], TrainLog]

    def test_ious(self, mode: str) -> list[float]:
        return [iou(self.logs[mode, s].test_counts) for s in self.seeds]

    def mean_iou(self, mode: str) -> float:
        return float(np.mean(self.test_ious(mode)))

    def rows(self) -> list[MetricRow]:
        out = []
        for mode in self.modes:
            counts = [self.logs[mode, s].test_counts for s in self.seeds]
            ious = [iou(c) for c in counts]
            f1s = [f1(c) for c in counts]
            ddof = 1 if len(counts) > 1 else 0
            out.append(MetricRow(
                MODE_LABELS[mode], sum(counts, ConfusionCounts()),
                iou_std=float(np.std(ious, ddof=ddof)), f1_std=float(np.std(f1s, ddof=ddof)),
                iou_mean=float(np.mean(ious)), f1_mean=float(np.mean(f1s)),
                oa_mean=float(np.mean([oa(c) for c in counts])),
            ))
        return out

    def report(self) -> tuple[str, str]:
        return report(self.rows())


def _run_one(cfg: ExperimentConfig, out_dir, dataset) -> TrainLog:
    return train(cfg, out_dir, dataset).log


def run_ablation(base: ExperimentConfig, modes: Sequence[str] = FUSION_MODES, seeds: Sequence[int] = (0, 1, 2),
                 out_dir: str | Path | None = None, n_jobs: int = 1) -> AblationResult:
    """Train every (mode, seed) pair with all other settings equal.

    The data split, shuffling and augmentation draws depend only on the seed,
    so the five modes of one seed see exactly the same batches.
    """
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    for m in modes:
        if m not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {m!r}")
    datasets = {s: prepare_dataset(replace(base, seed=s)) for s in seeds}
    jobs = [(m, s) for s in seeds for m in modes]

    def run_dir(m, s):
        return None if out_dir is None else Path(out_dir) / base.backbone / f"{m}_seed{s}"

    if n_jobs == 1:
        results = [_run_one(replace(base, fusion=m, seed=s), run_dir(m, s), datasets[s]) for m, s in jobs]
    else:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=n_jobs)(
            delayed(_run_one)(replace(base, fusion=m, seed=s), run_dir(m, s), datasets[s]) for m, s in jobs)
    return AblationResult(base.backbone, tuple(modes), tuple(seeds), dict(zip(jobs, results)))
