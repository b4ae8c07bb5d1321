"""Polarization-specific stems and cross-polarization attention fusion.

Each polarization (VV, VH) passes through its own convolutional stem.  The
fusion block then gates each branch with channel and spatial attention maps
computed from the *other* branch, concatenates the two gated maps and
projects them with a 3x3 convolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    Conv2d,
    LayerNorm,
    Mlp,
    Module,
    channel_mean_max,
    conv2d,
    global_avg_pool,
    global_max_pool,
    relu,
    sigmoid,
)
from .rng import Stream
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class StemConfig:
    depth: int = 2
    width: int = 16
    kernel: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("stem depth and width must be >= 1")
        if self.kernel % 2 == 0:
            raise ValueError("stem kernel must be odd")


@dataclass(frozen=True)
class CpfConfig:
    reduction: int = 4
    spatial_kernel: int = 7
    out_channels: int | None = None  # defaults to the stem width
    wiring: str = "cross"

    def __post_init__(self):
        if self.spatial_kernel % 2 == 0:
            raise ValueError("spatial attention kernel must be odd")
        if self.wiring not in ("cross", "self"):
            raise ValueError(f"unknown wiring {self.wiring!r}")


class Stem(Module):
    """``depth`` x (conv -> ReLU -> layer norm) on a single-polarization input."""

    def __init__(self, cfg: StemConfig = StemConfig(), stream: Stream | None = None, precision: str = "standard"):
        stream = stream if stream is not None else Stream(0)
        self.blocks = []
        in_ch = 1
        for i in range(cfg.depth):
            self.blocks.append(_StemBlock(in_ch, cfg.width, cfg.kernel, stream.child(i), precision))
            in_ch = cfg.width

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"stem: expected a B x 1 x H x W single-polarization input, got {x.shape}")
        for block in self.blocks:
            x = block(x)
        return x


class _StemBlock(Module):
    def __init__(self, in_ch, out_ch, k, stream, precision):
        self.conv = Conv2d(in_ch, out_ch, k, stream=stream.child("conv"), precision=precision)
        self.norm = LayerNorm(out_ch, precision=precision)

    def forward(self, x):
        return self.norm(relu(self.conv(x)))


class SpatialAttention(Module):
    """Per-pixel gate: sigmoid(conv_k([mean_c f, max_c f]))."""

    def __init__(self, kernel_size: int = 7, stream: Stream | None = None, precision: str = "standard"):
        self.conv = Conv2d(2, 1, kernel_size, stream=stream, precision=precision)

    def forward(self, f: Tensor) -> Tensor:
        return sigmoid(self.conv(channel_mean_max(f)))


class ChannelAttention(Module):
    """Per-channel gate: sigmoid(mlp(avg_pool f) + mlp(max_pool f)) with one shared MLP."""

    def __init__(self, channels: int, reduction: int = 4, stream: Stream | None = None, precision: str = "standard"):
        self.mlp = Mlp(channels, reduction, stream=stream, precision=precision)

    def forward(self, f: Tensor) -> Tensor:
        if f.shape[1] != self.mlp.width:
            raise ShapeError(f"channel attention: {f.shape[1]} channels, mlp width {self.mlp.width}")
        return sigmoid(self.mlp(global_avg_pool(f)) + self.mlp(global_max_pool(f)))


def _gate(f: Tensor, ca: Tensor, sa: Tensor) -> Tensor:
    b, c = ca.shape
    return f * ca.reshape(b, c, 1, 1) * sa


class CrossPolarizationFusion(Module):
    """Bidirectional attention between VV and VH feature maps.

    Attribute ``sa_vh2vv`` holds the spatial attention computed from VH and
    applied to VV (and so on); the ``self`` wiring swaps source and target.
    """

    def __init__(self, channels: int, cfg: CpfConfig = CpfConfig(), stream: Stream | None = None,
                 precision: str = "standard"):
        stream = stream if stream is not None else Stream(0)
        if channels % cfg.reduction:
            raise ValueError(f"channel count {channels} not divisible by reduction ratio {cfg.reduction}")
        self.wiring = cfg.wiring
        out = cfg.out_channels or channels
        self.sa_vv2vh = SpatialAttention(cfg.spatial_kernel, stream.child("sa_vv2vh"), precision)
        self.sa_vh2vv = SpatialAttention(cfg.spatial_kernel, stream.child("sa_vh2vv"), precision)
        self.ca_vv2vh = ChannelAttention(channels, cfg.reduction, stream.child("ca_vv2vh"), precision)
        self.ca_vh2vv = ChannelAttention(channels, cfg.reduction, stream.child("ca_vh2vv"), precision)
        self.fuse_conv = Conv2d(2 * channels, out, 3, stream=stream.child("fuse_conv"), precision=precision)

    @property
    def channels(self) -> int:
        return self.ca_vv2vh.mlp.width

    def attended(self, f_vv: Tensor, f_vh: Tensor) -> tuple[Tensor, Tensor]:
        """Return the gated (VV, VH) feature maps."""
        if f_vv.shape != f_vh.shape:
            raise ShapeError(f"cpf: VV features {f_vv.shape} and VH features {f_vh.shape} differ")
        if self.wiring == "cross":
            vv_att = _gate(f_vv, self.ca_vh2vv(f_vh), self.sa_vh2vv(f_vh))
            vh_att = _gate(f_vh, self.ca_vv2vh(f_vv), self.sa_vv2vh(f_vv))
        else:
            vv_att = _gate(f_vh, self.ca_vv2vh(f_vv), self.sa_vv2vh(f_vv))
            vh_att = _gate(f_vv, self.ca_vh2vv(f_vh), self.sa_vh2vv(f_vh))
        return vv_att, vh_att

    def forward(self, f_vv: Tensor, f_vh: Tensor) -> Tensor:
        vv_att, vh_att = self.attended(f_vv, f_vh)
        # Same value as one conv over [vv_att || vh_att]; summing the two
        # half-kernel terms keeps the result independent of branch order.
        c = vv_att.shape[1]
        w, conv = self.fuse_conv.weight, self.fuse_conv
        left = conv2d(vv_att, w[:, :c], None, conv.padding)
        right = conv2d(vh_att, w[:, c:], None, conv.padding)
        return left + right + conv.bias.reshape(1, -1, 1, 1)


def cpf_fuse(f_vv: Tensor, f_vh: Tensor, module: CrossPolarizationFusion) -> Tensor:
    return module(f_vv, f_vh)


def swap_directions(module: CrossPolarizationFusion) -> CrossPolarizationFusion:
    """Copy of ``module`` with the VV->VH and VH->VV roles exchanged.

    Attention sub-blocks swap direction and the two channel halves of the
    fusion kernel swap places, so ``swapped(f_vh, f_vv) == module(f_vv, f_vh)``.
    """
    state = module.state_dict()
    c = module.channels
    swapped = {}
    for name, value in state.items():
        if "vv2vh" in name:
            swapped[name.replace("vv2vh", "vh2vv")] = value
        elif "vh2vv" in name:
            swapped[name.replace("vh2vv", "vv2vh")] = value
        elif name == "fuse_conv.weight":
            swapped[name] = np.concatenate([value[:, c:], value[:, :c]], axis=1)
        else:
            swapped[name] = value
    out = CrossPolarizationFusion(c, CpfConfig(spatial_kernel=module.sa_vv2vh.conv.weight.shape[-1],
                                               reduction=c // module.ca_vv2vh.mlp.fc1.weight.shape[1],
                                               out_channels=module.fuse_conv.out_channels,
                                               wiring=module.wiring),
                                  precision=module.fuse_conv.weight.precision)
    out.load_state_dict(swapped)
    return out
