"""scikit-learn style flood segmenter wrapping the fusion network and its training loop."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .backbones import BackboneConfig, SegmentationNet, binarize
from .data import AUGMENT_OPS, ChannelStandardizer, augment
from .fusion import CpfConfig, StemConfig
from .metrics import ConfusionCounts, accumulate, iou
from .optim import Adam, NonFiniteError, bce_loss
from .rng import Stream
from .tensor import Tensor, backward, no_grad

DEFAULT_AUGMENT = ("hflip", "vflip", "rot90", "rot180", "rot270")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_iou: float | None
    wall_time: float


def _check_features(X, depth: int) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[1] != 4:
        raise ValueError(f"expected (n, 4, h, w) feature stacks, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty input: no patches")
    if X.shape[2] % 2 ** depth or X.shape[3] % 2 ** depth:
        raise ValueError(f"patch extents {X.shape[2:]} not divisible by 2^{depth}")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature stacks contain non-finite values")
    return X


def _check_masks(y, X: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"masks {y.shape} do not match features {X.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("masks must be binary")
    return y.astype(np.uint8)


class FloodSegmenter(ClassifierMixin, BaseEstimator):
    """Pixelwise flood classifier on (n, 4, h, w) [VV, VH, VV/VH, ln VV/VH] stacks.

    ``fit`` standardizes channels with statistics of the training stacks only,
    then trains with BCE and Adam.  When validation data is given the weights
    with the best validation IoU are kept; otherwise the last epoch's.
    """

    def __init__(self, backbone="unet", fusion="cpf", depth=3, base_width=16, stem_width=16,
                 stem_depth=2, cpf_reduction=4, spatial_kernel=7, lr=1e-3, beta1=0.9, beta2=0.999, adam_eps=1e-8,
                 batch_size=8, epochs=30, augment=DEFAULT_AUGMENT, seed=0, precision="standard", tau=0.5):
        self.backbone = backbone
        self.fusion = fusion
        self.depth = depth
        self.base_width = base_width
        self.stem_width = stem_width
        self.stem_depth = stem_depth
        self.cpf_reduction = cpf_reduction
        self.spatial_kernel = spatial_kernel
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.batch_size = batch_size
        self.epochs = epochs
        self.augment = augment
        self.seed = seed
        self.precision = precision
        self.tau = tau

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            kind=self.backbone, depth=self.depth, base_width=self.base_width, fusion=self.fusion,
            stem=StemConfig(depth=self.stem_depth, width=self.stem_width),
            cpf=CpfConfig(reduction=self.cpf_reduction, spatial_kernel=self.spatial_kernel),
        )

    def _streams(self):
        root = Stream(self.seed)
        return root.child("init"), root.child("shuffle"), root.child("augment")

    def _init_model(self, X):
        init, _, _ = self._streams()
        self.net_ = SegmentationNet(self.backbone_config(), init, self.precision)
        self.standardizer_ = ChannelStandardizer().fit(X)
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.array([0, 1])

    def _batch_tensor(self, X) -> Tensor:
        return Tensor(self.standardizer_.transform(X), precision=self.precision)

    def fit(self, X, y, X_val=None, y_val=None):
        X = _check_features(X, self.depth)
        y = _check_masks(y, X)
        if (X_val is None) != (y_val is None):
            raise ValueError("pass both X_val and y_val or neither")
        if X_val is not None:
            X_val = _check_features(X_val, self.depth)
            y_val = _check_masks(y_val, X_val)
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        ops = ("identity",) + tuple(op for op in self.augment if op != "identity")
        for op in ops:
            if op not in AUGMENT_OPS:
                raise ValueError(f"unknown augmentation {op!r}")

        self._init_model(X)
        params = self.net_.parameters()
        opt = Adam(params, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)
        _, shuffle, aug = self._streams()
        n = X.shape[0]
        self.history_: list[EpochRecord] = []
        best_state, best_iou, self.best_epoch_ = self.net_.state_dict(), -1.0, 0
        for epoch in range(1, self.epochs + 1):
            t0 = time.perf_counter()
            order = shuffle.child(epoch).permutation(n)
            draws = aug.child(epoch).integers(len(ops), n)
            losses, weights = [], []
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                xb, yb = [], []
                for i, d in zip(idx, draws[start:start + self.batch_size]):
                    xa, ya = augment(X[i], y[i], ops[int(d)])
                    xb.append(xa)
                    yb.append(ya)
                xt = self._batch_tensor(np.stack(xb))
                target = np.stack(yb)[:, None]
                loss = bce_loss(self.net_(xt), target)
                if not np.isfinite(loss.item()):
                    raise NonFiniteError(f"non-finite training loss at epoch {epoch}, batch starting {start}")
                backward(loss)
                opt.step()
                losses.append(loss.item())
                weights.append(len(idx))
            train_loss = float(np.average(losses, weights=weights))
            val = None
            if X_val is not None:
                val = iou(self._counts(X_val, y_val))
                if val > best_iou:
                    best_iou, self.best_epoch_ = val, epoch
                    best_state = self.net_.state_dict()
            self.history_.append(EpochRecord(epoch, train_loss, val, time.perf_counter() - t0))
        if X_val is not None and self.epochs > 0:
            self.net_.load_state_dict(best_state)
        else:
            self.best_epoch_ = self.epochs
        return self

    def predict_proba(self, X, batch_size: int | None = None) -> np.ndarray:
        """Flood probability per pixel, shape (n, h, w)."""
        check_is_fitted(self, "net_")
        X = _check_features(X, self.depth)
        bs = batch_size or max(self.batch_size, 1)
        out = []
        with no_grad():
            for start in range(0, X.shape[0], bs):
                out.append(self.net_(self._batch_tensor(X[start:start + bs])).data[:, 0])
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        return binarize(self.predict_proba(X), self.tau)

    def _counts(self, X, y) -> ConfusionCounts:
        return accumulate(None, self.predict(X), y)

    def confusion(self, X, y) -> ConfusionCounts:
        X = _check_features(X, self.depth)
        return self._counts(X, _check_masks(y, X))

    def score(self, X, y, sample_weight=None) -> float:
        """Dataset-level IoU of the flooded class."""
        return iou(self.confusion(X, y))

    def loss(self, X, y) -> float:
        X = _check_features(X, self.depth)
        y = _check_masks(y, X)
        with no_grad():
            return bce_loss(self.net_(self._batch_tensor(X)), y[:, None]).item()
