"""Scene I/O, ratio features, patch tiling, spatially disjoint splits, augmentation.

Intensities are linear backscatter power (not dB).  A scene on disk is three
raw little-endian rasters plus a JSON sidecar::

    <id>.vv.f32r   float32, row-major
    <id>.vh.f32r   float32, row-major
    <id>.mask.u8r  uint8 in {0, 1}
    <id>.json      {"id", "height", "width", "pixel_size", "files", "sha256"}
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .rng import Stream

EPS = 1e-6
CHANNELS = ("vv", "vh", "vv_over_vh", "log_vv_over_vh")
AUGMENT_OPS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


class SceneError(ValueError):
    """A scene violates the alignment/domain invariants or its files are inconsistent."""


@dataclass
class DualPolScene:
    vv: np.ndarray
    vh: np.ndarray
    mask: np.ndarray
    id: str = "scene"
    pixel_size: float = 10.0

    def __post_init__(self):
        self.vv = np.asarray(self.vv, dtype=np.float32)
        self.vh = np.asarray(self.vh, dtype=np.float32)
        self.mask = np.asarray(self.mask)
        validate_scene(self)

    @property
    def shape(self) -> tuple[int, int]:
        return self.vv.shape


def validate_scene(scene: DualPolScene) -> None:
    if scene.vv.ndim != 2:
        raise SceneError(f"{scene.id}: rasters must be 2-D, got {scene.vv.shape}")
    if scene.vv.shape != scene.vh.shape or scene.vv.shape != scene.mask.shape:
        raise SceneError(
            f"{scene.id}: extent mismatch vv {scene.vv.shape}, vh {scene.vh.shape}, mask {scene.mask.shape}"
        )
    for name in ("vv", "vh"):
        arr = getattr(scene, name)
        if not np.all(np.isfinite(arr)):
            raise SceneError(f"{scene.id}: non-finite {name} pixels")
        if np.any(arr < 0):
            raise SceneError(f"{scene.id}: negative {name} intensity")
    if not np.all((scene.mask == 0) | (scene.mask == 1)):
        raise SceneError(f"{scene.id}: mask values outside {{0, 1}}")


# -- raster format ----------------------------------------------------------
def _sha256(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def save_scene(scene: DualPolScene, directory: str | Path) -> Path:
    """Write the three rasters and the sidecar; returns the sidecar path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payloads = {
        "vv": (f"{scene.id}.vv.f32r", scene.vv.astype("<f4").tobytes()),
        "vh": (f"{scene.id}.vh.f32r", scene.vh.astype("<f4").tobytes()),
        "mask": (f"{scene.id}.mask.u8r", scene.mask.astype(np.uint8).tobytes()),
    }
    for fname, raw in payloads.values():
        (directory / fname).write_bytes(raw)
    header = {
        "id": scene.id,
        "height": int(scene.shape[0]),
        "width": int(scene.shape[1]),
        "pixel_size": float(scene.pixel_size),
        "files": {k: v[0] for k, v in payloads.items()},
        "sha256": {k: _sha256(v[1]) for k, v in payloads.items()},
    }
    sidecar = directory / f"{scene.id}.json"
    sidecar.write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")
    return sidecar


def load_scene(path: str | Path) -> DualPolScene:
    """Load and validate a scene from its JSON sidecar (or the ``<id>`` stem next to it)."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_name(path.name.split(".")[0] + ".json")
    if not path.exists():
        raise SceneError(f"missing sidecar header {path}")
    header = json.loads(path.read_text())
    h, w = int(header["height"]), int(header["width"])
    arrays = {}
    for key, dtype in (("vv", "<f4"), ("vh", "<f4"), ("mask", "u1")):
        fpath = path.parent / header["files"][key]
        if not fpath.exists():
            raise SceneError(f"{header['id']}: missing raster {fpath.name}")
        raw = fpath.read_bytes()
        expected = header.get("sha256", {}).get(key)
        if expected is not None and _sha256(raw) != expected:
            raise SceneError(f"{header['id']}: checksum mismatch for {fpath.name}")
        arr = np.frombuffer(raw, dtype=dtype)
        if arr.size != h * w:
            raise SceneError(f"{header['id']}: {key} raster holds {arr.size} values, header declares {h}x{w}")
        arrays[key] = arr.reshape(h, w).copy()
    return DualPolScene(arrays["vv"].astype(np.float32), arrays["vh"].astype(np.float32), arrays["mask"],
                        id=header["id"], pixel_size=float(header.get("pixel_size", 10.0)))


def write_raster(path: str | Path, arr: np.ndarray) -> None:
    """Raw little-endian row-major raster (float32 or uint8)."""
    arr = np.asarray(arr)
    dtype = "u1" if arr.dtype == np.uint8 else "<f4"
    Path(path).write_bytes(arr.astype(dtype).tobytes())


def read_raster(path: str | Path, shape: tuple[int, int], dtype: str = "<f4") -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype=dtype).reshape(shape).copy()


# -- dataset manifest ----------------------------------------------------------
@dataclass(frozen=True)
class ManifestRow:
    id: str
    height: int
    width: int
    path: str


def write_manifest(rows: Iterable[ManifestRow], path: str | Path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "height", "width", "path"])
    for r in rows:
        writer.writerow([r.id, r.height, r.width, r.path])
    Path(path).write_text(buf.getvalue())


def read_manifest(path: str | Path) -> list[ManifestRow]:
    with open(path, newline="") as fh:
        return [ManifestRow(r["id"], int(r["height"]), int(r["width"]), r["path"]) for r in csv.DictReader(fh)]


def load_manifest_scenes(path: str | Path) -> list[DualPolScene]:
    path = Path(path)
    return [load_scene(path.parent / row.path) for row in read_manifest(path)]


# -- features -------------------------------------------------------------------
def ratio_features(vv: np.ndarray, vh: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Stack [VV, VH, VV/VH, ln(VV/VH)] along a new leading channel axis.

    Works on any trailing shape.  The ratio denominator and the log argument
    are floored at ``eps`` so zero VH never produces inf/nan.
    """
    vv = np.asarray(vv, dtype=np.float64)
    vh = np.asarray(vh, dtype=np.float64)
    ratio = vv / np.maximum(vh, eps)
    log_ratio = np.log(np.maximum(ratio, eps))
    return np.stack([vv, vh, ratio, log_ratio]).astype(np.float32)


@dataclass
class FeatureStack:
    channels: np.ndarray  # 4 x h x w, order given by CHANNELS
    scene_id: str = ""
    row: int = 0
    col: int = 0

    @property
    def size(self) -> int:
        return self.channels.shape[-1]


def make_features(scene: DualPolScene, eps: float = EPS) -> FeatureStack:
    return FeatureStack(ratio_features(scene.vv, scene.vh, eps), scene.id, 0, 0)


@dataclass
class Patch:
    features: FeatureStack
    mask: np.ndarray

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.features.scene_id, self.features.row, self.features.col)


def extract_patches(scene: DualPolScene, size: int, stride: int | None = None, eps: float = EPS) -> list[Patch]:
    """Tile ``scene`` into ``size`` x ``size`` patches, row-major order."""
    stride = size if stride is None else stride
    h, w = scene.shape
    if size > h or size > w:
        raise SceneError(f"{scene.id}: patch size {size} exceeds scene extents {h}x{w}")
    if stride < 1:
        raise ValueError("stride must be positive")
    full = ratio_features(scene.vv, scene.vh, eps)
    patches = []
    for r in range(0, h - size + 1, stride):
        for c in range(0, w - size + 1, stride):
            fs = FeatureStack(full[:, r:r + size, c:c + size].copy(), scene.id, r, c)
            patches.append(Patch(fs, scene.mask[r:r + size, c:c + size].astype(np.uint8).copy()))
    return patches


# -- splits --------------------------------------------------------------------
def _split_names(k: int) -> tuple[str, ...]:
    return {1: ("train",), 2: ("train", "test"), 3: ("train", "val", "test")}.get(
        k, tuple(f"split{i}" for i in range(k)))


def _apportion(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items to ``fractions``."""
    raw = [f * n for f in fractions]
    counts = [int(np.floor(x + 1e-9)) for x in raw]
    rest = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


@dataclass
class SplitManifest:
    splits: dict[str, list[tuple[str, int, int]]]
    fractions: tuple[float, ...]
    seed: int
    patch_size: int

    def names(self) -> list[str]:
        return list(self.splits)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["split", "scene_id", "row", "col"])
        for name, keys in self.splits.items():
            for sid, r, c in keys:
                writer.writerow([name, sid, r, c])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path: str | Path, patch_size: int, fractions=(), seed: int = -1) -> "SplitManifest":
        splits: dict[str, list[tuple[str, int, int]]] = {}
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                splits.setdefault(r["split"], []).append((r["scene_id"], int(r["row"]), int(r["col"])))
        return cls(splits, tuple(fractions), seed, patch_size)


def overlapping_pairs(manifest: SplitManifest) -> list[tuple[tuple, tuple]]:
    """All pairs of patches in *different* splits whose footprints intersect."""
    size = manifest.patch_size
    by_scene: dict[str, list[tuple[str, int, int]]] = {}
    for name, keys in manifest.splits.items():
        for sid, r, c in keys:
            by_scene.setdefault(sid, []).append((name, r, c))
    bad = []
    for sid, items in by_scene.items():
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                (na, ra, ca), (nb, rb, cb) = items[i], items[j]
                if na == nb:
                    continue
                if ra < rb + size and rb < ra + size and ca < cb + size and cb < ca + size:
                    bad.append(((na, sid, ra, ca), (nb, sid, rb, cb)))
    return bad


def split_patches(patches: Sequence[Patch], fractions: Sequence[float], seed: int,
                  names: Sequence[str] | None = None) -> SplitManifest:
    """Seeded shuffle then partition by ``fractions``; inputs must not overlap."""
    fractions = tuple(float(f) for f in fractions)
    if not fractions or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    names = tuple(names) if names is not None else _split_names(len(fractions))
    if len(names) != len(fractions):
        raise ValueError("one split name per fraction required")
    keys = [p.key for p in patches]
    sizes = {p.features.size for p in patches}
    if len(sizes) > 1:
        raise ValueError("all patches must share one size")
    size = sizes.pop() if sizes else 0
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate patches in split input")
    probe = SplitManifest({str(i): [k] for i, k in enumerate(keys)}, fractions, seed, size)
    if overlapping_pairs(probe):
        raise ValueError("split input contains spatially overlapping patches; tile with stride == size")
    order = Stream(seed).child("split").permutation(len(keys))
    counts = _apportion(len(keys), fractions)
    splits, start = {}, 0
    for name, cnt in zip(names, counts):
        splits[name] = [keys[i] for i in order[start:start + cnt]]
        start += cnt
    return SplitManifest(splits, fractions, seed, size)


# -- augmentation ----------------------------------------------------------------
def augment(channels: np.ndarray, mask: np.ndarray, op: str) -> tuple[np.ndarray, np.ndarray]:
    """Apply one geometric op to every channel and to the mask alike."""
    if op not in AUGMENT_OPS:
        raise ValueError(f"unknown augmentation {op!r}")
    if op.startswith("rot") and channels.shape[-1] != channels.shape[-2]:
        raise ValueError(f"rotation requires a square patch, got {channels.shape[-2:]}")

    def geo(a):
        if op == "identity":
            return a
        if op == "hflip":
            return a[..., :, ::-1]
        if op == "vflip":
            return a[..., ::-1, :]
        return np.rot90(a, {"rot90": 1, "rot180": 2, "rot270": 3}[op], axes=(-2, -1))

    return np.ascontiguousarray(geo(channels)), np.ascontiguousarray(geo(mask))


def random_augment(channels, mask, ops: Sequence[str], stream: Stream):
    op = ops[int(stream.integers(len(ops), 1)[0])]
    return augment(channels, mask, op)


# -- sklearn transformers ----------------------------------------------------------
class PolarimetricFeatures(TransformerMixin, BaseEstimator):
    """(n, 2, h, w) VV/VH intensities -> (n, 4, h, w) ratio feature stacks."""

    def __init__(self, eps: float = EPS):
        self.eps = eps

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim != 4 or X.shape[1] != 2:
            raise ValueError(f"expected (n, 2, h, w) input, got {X.shape}")
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = np.asarray(X)
        if X.ndim != 4 or X.shape[1] != 2:
            raise ValueError(f"expected (n, 2, h, w) input, got {X.shape}")
        return np.moveaxis(ratio_features(X[:, 0], X[:, 1], self.eps), 0, 1)


class ChannelStandardizer(TransformerMixin, BaseEstimator):
    """Per-channel zero-mean/unit-variance scaling of (n, c, h, w) stacks."""

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4:
            raise ValueError(f"expected (n, c, h, w) input, got {X.shape}")
        self.mean_ = X.mean(axis=(0, 2, 3))
        std = X.std(axis=(0, 2, 3))
        self.scale_ = np.where(std > 0, std, 1.0)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, ("mean_", "scale_"))
        X = np.asarray(X)
        if X.ndim != 4 or X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected (n, {self.n_features_in_}, h, w) input, got {X.shape}")
        out = (X - self.mean_[None, :, None, None]) / self.scale_[None, :, None, None]
        return out.astype(np.float32)
