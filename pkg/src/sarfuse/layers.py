"""Differentiable building blocks: convolution, pooling, normalization, MLP."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Stream
from .tensor import (
    PRECISIONS,
    Parameter,
    PrecisionError,
    ShapeError,
    Tensor,
    concat,
    max_,
    mean,
    relu,
    sigmoid,
    sqrt,
)

__all__ = [
    "Module",
    "Conv2d",
    "Dense",
    "Mlp",
    "LayerNorm",
    "conv2d",
    "relu",
    "sigmoid",
    "layer_norm",
    "max_pool2",
    "upsample2",
    "global_avg_pool",
    "global_max_pool",
    "channel_mean_max",
    "concat_channels",
    "glorot_uniform",
]


# -- convolution --------------------------------------------------------------
# Stride-1 convolutions run on a flattened, zero-padded, channel-major copy of
# the batch: tap (i, j) of the kernel then reads a contiguous column window
# shifted by i*Wp + j, so each tap is one small GEMM with no im2col copy.
# Columns are processed in cache-sized blocks.  With few input channels the
# shifted windows are stacked first so the whole kernel is one GEMM.  Outputs at padding positions
# are computed and discarded.
_BLOCK = 2048
_STACK_BLOCK = 1024
_STACK_MAX = 100  # k*k*C_in at or below which taps are stacked


def _flat_pad(x: np.ndarray, pad: int, k: int):
    b, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    n = b * hp * wp
    buf = np.zeros((c, n + (k - 1) * (wp + 1)), dtype=x.dtype)
    buf[:, :n].reshape(c, b, hp, wp)[:, :, pad:pad + h, pad:pad + w] = x.transpose(1, 0, 2, 3)
    return buf, hp, wp, n


def _taps(k: int, wp: int):
    return [i * wp + j for i in range(k) for j in range(k)]


def _stack_taps(buf, offsets, a, e, out):
    """Copy the shifted windows of columns [a, e) into ``out`` (taps x C x m)."""
    for q, s in enumerate(offsets):
        out[q] = buf[:, a + s:e + s]
    return out.reshape(-1, e - a)


def _correlate_flat(x: np.ndarray, w: np.ndarray, pad: int):
    b = x.shape[0]
    o, c, k, _ = w.shape
    buf, hp, wp, n = _flat_pad(x, pad, k)
    ho, wo = hp - k + 1, wp - k + 1
    offsets = _taps(k, wp)
    out = np.empty((o, n), dtype=x.dtype)
    if k * k * c <= _STACK_MAX:
        # few input taps: one GEMM over stacked windows beats k*k skinny ones
        wm = np.ascontiguousarray(w.transpose(0, 2, 3, 1).reshape(o, k * k * c))
        st = np.empty((k * k, c, _STACK_BLOCK), dtype=x.dtype)
        for a in range(0, n, _STACK_BLOCK):
            e = min(a + _STACK_BLOCK, n)
            np.matmul(wm, _stack_taps(buf, offsets, a, e, st[:, :, :e - a]), out=out[:, a:e])
    else:
        kernels = [np.ascontiguousarray(w[:, :, i, j]) for i in range(k) for j in range(k)]
        tmp = np.empty((o, _BLOCK), dtype=x.dtype)
        for a in range(0, n, _BLOCK):
            e = min(a + _BLOCK, n)
            acc = out[:, a:e]
            np.matmul(kernels[0], buf[:, a + offsets[0]:e + offsets[0]], out=acc)
            t = tmp[:, :e - a]
            for kern, s in zip(kernels[1:], offsets[1:]):
                np.matmul(kern, buf[:, a + s:e + s], out=t)
                acc += t
    y = out.reshape(o, b, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(y), buf, wp, n


def _weight_grad_flat(g: np.ndarray, buf: np.ndarray, wshape, wp: int, n: int) -> np.ndarray:
    o, c, k, _ = wshape
    b, _, ho, wo = g.shape
    hp = n // (b * wp)
    gf = np.zeros((o, b, hp, wp), dtype=g.dtype)
    gf[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
    gf = gf.reshape(o, n)
    offsets = _taps(k, wp)
    if k * k * c <= _STACK_MAX:
        acc = np.zeros((o, k * k * c), dtype=g.dtype)
        t = np.empty_like(acc)
        st = np.empty((k * k, c, _STACK_BLOCK), dtype=g.dtype)
        for a in range(0, n, _STACK_BLOCK):
            e = min(a + _STACK_BLOCK, n)
            np.matmul(gf[:, a:e], _stack_taps(buf, offsets, a, e, st[:, :, :e - a]).T, out=t)
            acc += t
        return np.ascontiguousarray(acc.reshape(o, k, k, c).transpose(0, 3, 1, 2))
    acc = np.zeros((k * k, o, c), dtype=g.dtype)
    t = np.empty((o, c), dtype=g.dtype)
    for a in range(0, n, _BLOCK):
        e = min(a + _BLOCK, n)
        ga = gf[:, a:e]
        for q, s in enumerate(offsets):
            np.matmul(ga, buf[:, a + s:e + s].T, out=t)
            acc[q] += t
    return np.ascontiguousarray(acc.reshape(k, k, o, c).transpose(2, 3, 0, 1))


def _im2col(x: np.ndarray, k: int, pad: int, stride: int):
    """Columns laid out (C*k*k, B*Ho*Wo) so one matmul yields (C_out, B, Ho, Wo)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, b * ho * wo), ho, wo


def _conv_strided(x, weight, bias, padding, stride):
    b, c, h, w = x.shape
    o, _, k, _ = weight.shape
    cols, ho, wo = _im2col(x.data, k, padding, stride)
    out = (weight.data.reshape(o, -1) @ cols).reshape(o, b, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def _bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (weight.data.reshape(o, -1).T @ g2).reshape(c, k, k, b, ho, wo)
            gp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gp[:, :, padding:padding + h, padding:padding + w]
        return gx, gw, gb

    return out, _bw


def _conv_unit_stride(x, weight, bias, padding):
    o, c, k, _ = weight.shape
    out, buf, wp, n = _correlate_flat(x.data, weight.data, padding)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def _bw(g):
        gw = _weight_grad_flat(g, buf, weight.shape, wp, n) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # input gradient = full correlation of g with the flipped, transposed kernel
            flipped = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _correlate_flat(g, flipped, k - 1 - padding)[0]
        return gx, gw, gb

    return out, _bw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    ``x`` is B x C_in x H x W and ``weight`` is C_out x C_in x k x k.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {weight.shape}")
    if x.dtype != weight.dtype or (bias is not None and bias.dtype != x.dtype):
        raise PrecisionError("conv2d: cannot mix precisions")
    b, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if stride < 1:
        raise ValueError("conv2d: stride must be positive")

    if stride == 1 and padding <= k - 1:
        out, _bw = _conv_unit_stride(x, weight, bias, padding)
    else:
        out, _bw = _conv_strided(x, weight, bias, padding, stride)
    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, (lambda g: _bw(g)[:2]) if bias is None else _bw, "conv2d")


# -- pooling / resampling ---------------------------------------------------------
def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties share the gradient equally."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2: spatial extents must be even, got {h}x{w}")
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2)
    out = blocks.max(axis=(3, 5))

    def _bw(g):
        hit = blocks == out[:, :, :, None, :, None]
        share = hit / hit.sum(axis=(3, 5), keepdims=True)
        return ((share * g[:, :, :, None, :, None]).reshape(x.shape),)

    return Tensor._from_op(out, (x,), _bw, "max_pool2")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    b, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, 2, w, 2)).reshape(b, c, 2 * h, 2 * w)

    def _bw(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), _bw, "upsample2")


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


def global_max_pool(x: Tensor) -> Tensor:
    return max_(x, axis=(2, 3))


def channel_mean_max(x: Tensor) -> Tensor:
    """B x 2 x H x W descriptor: per-pixel channel mean, then channel max."""
    return concat([mean(x, axis=1, keepdims=True), max_(x, axis=1, keepdims=True)], axis=1)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial extents differ: {a.shape} vs {b.shape}")
    if b.shape[1] == 0:
        return a
    if a.shape[1] == 0:
        return b
    return concat([a, b], axis=1)


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over (C, H, W) followed by a per-channel affine map."""
    mu = mean(x, axis=(1, 2, 3), keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=(1, 2, 3), keepdims=True)
    normed = centered / sqrt(var + eps)
    c = x.shape[1]
    return normed * gain.reshape(1, c, 1, 1) + offset.reshape(1, c, 1, 1)


# -- modules -------------------------------------------------------------------
def glorot_uniform(shape, fan_in: int, fan_out: int, stream: Stream, precision: str = "standard") -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    u = stream.uniform(shape)
    return ((2.0 * u - 1.0) * limit).astype(PRECISIONS[precision])


class Module:
    """Container that discovers Parameters and sub-Modules by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint extents {arr.shape} != parameter extents {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, padding: int | None = None,
                 stride: int = 1, stream: Stream | None = None, precision: str = "standard"):
        stream = stream if stream is not None else Stream(0)
        k = kernel_size
        self.padding = (k - 1) // 2 if padding is None else padding
        self.stride = stride
        shape = (out_channels, in_channels, k, k)
        self.weight = Parameter(glorot_uniform(shape, in_channels * k * k, out_channels * k * k, stream, precision))
        self.bias = Parameter(np.zeros(out_channels, PRECISIONS[precision]))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.padding, self.stride)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, stream: Stream | None = None, precision: str = "standard"):
        stream = stream if stream is not None else Stream(0)
        self.weight = Parameter(glorot_uniform((in_features, out_features), in_features, out_features, stream, precision))
        self.bias = Parameter(np.zeros(out_features, PRECISIONS[precision]))

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Mlp(Module):
    """Two dense stages C -> C/r -> C with a ReLU in between."""

    def __init__(self, width: int, reduction: int = 4, stream: Stream | None = None, precision: str = "standard"):
        if width % reduction:
            raise ValueError(f"width {width} not divisible by reduction ratio {reduction}")
        stream = stream if stream is not None else Stream(0)
        hidden = width // reduction
        self.fc1 = Dense(width, hidden, stream.child("fc1"), precision)
        self.fc2 = Dense(hidden, width, stream.child("fc2"), precision)

    @property
    def width(self) -> int:
        return self.fc1.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.width:
            raise ShapeError(f"mlp: input width {x.shape[-1]} != {self.width}")
        return self.fc2(relu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5, precision: str = "standard"):
        self.eps = eps
        self.gain = Parameter(np.ones(channels, PRECISIONS[precision]))
        self.offset = Parameter(np.zeros(channels, PRECISIONS[precision]))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.offset, self.eps)
