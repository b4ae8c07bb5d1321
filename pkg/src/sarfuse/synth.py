"""Synthetic dual-pol flood scenes with gamma speckle.

Two independent smooth random fields decide, per pixel, whether the ground
is flooded and whether it is vegetated.  The four combinations map to the
cover classes below.  Their mean backscatter is chosen so that

* open water is dark in both channels (easy for either polarization),
* flooded vegetation looks like dry land in VV (within 10%) but not in VH,
* flooded vegetation and dry forest are only weakly apart in each channel,
  so telling them apart pays off from using both.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .data import DualPolScene, ManifestRow, save_scene, write_manifest
from .rng import Stream


@dataclass(frozen=True)
class CoverClass:
    name: str
    mean_vv: float
    mean_vh: float
    flooded: bool

    def __post_init__(self):
        if self.mean_vv <= 0 or self.mean_vh <= 0:
            raise ValueError(f"{self.name}: class means must be positive")
        if self.flooded != (self.name in ("open_water", "flooded_vegetation")):
            raise ValueError(f"{self.name}: flooded flag inconsistent with class name")


DEFAULT_CLASSES = (
    CoverClass("open_water", 0.010, 0.002, True),
    CoverClass("dry_land", 0.060, 0.015, False),
    CoverClass("flooded_vegetation", 0.065, 0.045, True),
    CoverClass("dry_forest", 0.055, 0.040, False),
)
CLASS_NAMES = tuple(c.name for c in DEFAULT_CLASSES)


@dataclass(frozen=True)
class SynthConfig:
    height: int = 256
    width: int = 256
    smoothness: int = 15       # box-blur window of the region fields, pixels
    blur_passes: int = 3       # repeated box blurs approximate a Gaussian
    flood_fraction: float = 0.35
    vegetation_fraction: float = 0.5
    looks: int = 4
    seed: int = 0
    pixel_size: float = 10.0
    classes: tuple[CoverClass, ...] = DEFAULT_CLASSES
    depth: int = 3             # target backbone depth, extents must divide 2**depth

    def __post_init__(self):
        if isinstance(self.looks, bool) or int(self.looks) != self.looks or self.looks < 1:
            raise ValueError(f"looks must be an integer >= 1, got {self.looks}")
        if self.height % 2 ** self.depth or self.width % 2 ** self.depth:
            raise ValueError(f"extents {self.height}x{self.width} not divisible by 2^{self.depth}")
        if self.smoothness < 1 or self.blur_passes < 0:
            raise ValueError("smoothness must be >= 1 and blur_passes >= 0")
        for frac in (self.flood_fraction, self.vegetation_fraction):
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"region fractions must lie in [0, 1], got {frac}")
        names = sorted(c.name for c in self.classes)
        if names != sorted(CLASS_NAMES):
            raise ValueError(f"class table must define exactly {CLASS_NAMES}")

    def class_by_name(self, name: str) -> CoverClass:
        return next(c for c in self.classes if c.name == name)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def _region(stream: Stream, shape, smoothness: int, passes: int, fraction: float) -> np.ndarray:
    """Boolean map covering ``fraction`` of the grid, thresholded from blurred white noise."""
    field_ = stream.normal(shape)
    for _ in range(passes):
        field_ = uniform_filter(field_, size=smoothness, mode="wrap")
    if fraction <= 0.0:
        return np.zeros(shape, dtype=bool)
    if fraction >= 1.0:
        return np.ones(shape, dtype=bool)
    # rank-based threshold: exactly round(fraction * n) pixels, ties broken by index
    order = np.argsort(-field_.ravel(), kind="stable")
    out = np.zeros(field_.size, dtype=bool)
    out[order[: int(round(fraction * field_.size))]] = True
    return out.reshape(shape)


def class_map(cfg: SynthConfig) -> np.ndarray:
    """Per-pixel index into ``CLASS_NAMES``."""
    root = Stream(cfg.seed).child("synth")
    shape = (cfg.height, cfg.width)
    flooded = _region(root.child("flood"), shape, cfg.smoothness, cfg.blur_passes, cfg.flood_fraction)
    vegetated = _region(root.child("vegetation"), shape, cfg.smoothness, cfg.blur_passes, cfg.vegetation_fraction)
    # index order matches CLASS_NAMES
    return np.select(
        [flooded & ~vegetated, ~flooded & ~vegetated, flooded & vegetated],
        [0, 1, 2], default=3,
    ).astype(np.uint8)


def generate_scene(cfg: SynthConfig, scene_id: str = "scene") -> DualPolScene:
    labels = class_map(cfg)
    table = [cfg.class_by_name(n) for n in CLASS_NAMES]
    mean_vv = np.array([c.mean_vv for c in table])[labels]
    mean_vh = np.array([c.mean_vh for c in table])[labels]
    flooded = np.array([c.flooded for c in table])[labels]
    root = Stream(cfg.seed).child("synth")
    shape = labels.shape
    g_vv = root.child("speckle_vv").gamma(cfg.looks, shape, scale=1.0 / cfg.looks)
    g_vh = root.child("speckle_vh").gamma(cfg.looks, shape, scale=1.0 / cfg.looks)
    return DualPolScene(
        (mean_vv * g_vv).astype(np.float32),
        (mean_vh * g_vh).astype(np.float32),
        flooded.astype(np.uint8),
        id=scene_id,
        pixel_size=cfg.pixel_size,
    )


def scene_seed(master_seed: int, index: int) -> int:
    return Stream(master_seed).child("scene", index).seed_int()


def generate_benchmark(cfg: SynthConfig, n_scenes: int, out_dir: str | Path) -> Path:
    """Write ``n_scenes`` scenes plus ``manifest.csv``; returns the manifest path."""
    if n_scenes < 2:
        raise ValueError("a benchmark needs at least 2 scenes")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create benchmark directory {out_dir}: {exc}") from exc
    rows = []
    for i in range(n_scenes):
        sid = f"scene_{i:03d}"
        scene_cfg = replace(cfg, seed=scene_seed(cfg.seed, i))
        sidecar = save_scene(generate_scene(scene_cfg, sid), out_dir)
        rows.append(ManifestRow(sid, cfg.height, cfg.width, sidecar.name))
    manifest = out_dir / "manifest.csv"
    write_manifest(rows, manifest)
    (out_dir / "synth_config.json").write_text(cfg.to_json() + "\n")
    return manifest

