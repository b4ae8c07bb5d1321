"""Encoder-decoder segmentation backbones and the fusion-mode input stage."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fusion import CpfConfig, CrossPolarizationFusion, Stem, StemConfig
from .layers import Conv2d, Module, concat_channels, max_pool2, relu, sigmoid, upsample2
from .rng import Stream
from .tensor import ShapeError, Tensor

FUSION_MODES = ("vv_only", "vh_only", "addition", "concat", "cpf")
MODE_LABELS = {
    "vv_only": "VV only",
    "vh_only": "VH only",
    "addition": "Addition Fusion",
    "concat": "Early Fusion (Concat)",
    "cpf": "CPF (VV, VH)",
}
BACKBONES = ("unet", "autoencoder")
RATIO_EMBED_CHANNELS = 8


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "unet"
    depth: int = 3
    base_width: int = 16
    fusion: str = "cpf"
    stem: StemConfig = field(default_factory=StemConfig)
    cpf: CpfConfig = field(default_factory=CpfConfig)

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise ValueError(f"unknown backbone {self.kind!r}; expected one of {BACKBONES}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}; expected one of {FUSION_MODES}")
        if self.depth < 1 or self.base_width < 1:
            raise ValueError("depth and base_width must be >= 1")

    @property
    def fused_channels(self) -> int:
        return self.cpf.out_channels or self.stem.width

    def input_channels(self) -> int:
        """Channel count the backbone's first convolution receives."""
        return {
            "vv_only": 1,
            "vh_only": 1,
            "addition": self.stem.width,
            "concat": 4,
            "cpf": self.fused_channels + RATIO_EMBED_CHANNELS,
        }[self.fusion]


class _DoubleConv(Module):
    def __init__(self, in_ch, out_ch, stream, precision):
        self.conv1 = Conv2d(in_ch, out_ch, 3, stream=stream.child("conv1"), precision=precision)
        self.conv2 = Conv2d(out_ch, out_ch, 3, stream=stream.child("conv2"), precision=precision)

    def forward(self, x):
        return relu(self.conv2(relu(self.conv1(x))))


class EncoderDecoder(Module):
    """Conv encoder-decoder; ``skips=True`` gives a U-Net, ``False`` a plain autoencoder.

    Stage ``i`` of the encoder has ``base_width * 2**i`` channels; the
    bottleneck doubles the last stage.  The decoder upsamples by nearest
    neighbour and (U-Net only) concatenates the matching encoder output.
    Output is a B x 1 x H x W map of logits.
    """

    def __init__(self, in_channels: int, depth: int = 3, base_width: int = 16, skips: bool = True,
                 stream: Stream | None = None, precision: str = "standard"):
        stream = stream if stream is not None else Stream(0)
        self.depth = depth
        self.skips = skips
        widths = [base_width * 2 ** i for i in range(depth)]
        self.encoder = []
        ch = in_channels
        for i, w in enumerate(widths):
            self.encoder.append(_DoubleConv(ch, w, stream.child("enc", i), precision))
            ch = w
        self.bottleneck = _DoubleConv(ch, 2 * ch, stream.child("bottleneck"), precision)
        ch = 2 * ch
        self.decoder = []
        for i in reversed(range(depth)):
            in_ch = ch + (widths[i] if skips else 0)
            self.decoder.append(_DoubleConv(in_ch, widths[i], stream.child("dec", i), precision))
            ch = widths[i]
        self.head = Conv2d(ch, 1, 1, stream=stream.child("head"), precision=precision)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % 2 ** self.depth or w % 2 ** self.depth:
            raise ShapeError(f"backbone: spatial extents {h}x{w} not divisible by 2^{self.depth}")
        saved = []
        for block in self.encoder:
            x = block(x)
            saved.append(x)
            x = max_pool2(x)
        x = self.bottleneck(x)
        for block, skip in zip(self.decoder, reversed(saved)):
            x = upsample2(x)
            if self.skips:
                x = concat_channels(x, skip)
            x = block(x)
        return self.head(x)


class InputBuilder(Module):
    """Turns a B x 4 x H x W feature stack into the backbone input for one fusion mode."""

    def __init__(self, cfg: BackboneConfig, stream: Stream | None = None, precision: str = "standard"):
        stream = stream if stream is not None else Stream(0)
        self.mode = cfg.fusion
        if self.mode in ("addition", "cpf"):
            self.stem_vv = Stem(cfg.stem, stream.child("stem_vv"), precision)
            self.stem_vh = Stem(cfg.stem, stream.child("stem_vh"), precision)
        if self.mode == "cpf":
            self.cpf = CrossPolarizationFusion(cfg.stem.width, cfg.cpf, stream.child("cpf"), precision)
            self.ratio_embed = Conv2d(2, RATIO_EMBED_CHANNELS, 1, stream=stream.child("ratio_embed"),
                                      precision=precision)

    def forward(self, features: Tensor) -> Tensor:
        if features.ndim != 4 or features.shape[1] != 4:
            raise ShapeError(f"input builder: expected B x 4 x H x W feature stack, got {features.shape}")
        vv, vh = features[:, 0:1], features[:, 1:2]
        if self.mode == "vv_only":
            return vv
        if self.mode == "vh_only":
            return vh
        if self.mode == "concat":
            return features
        f_vv, f_vh = self.stem_vv(vv), self.stem_vh(vh)
        if self.mode == "addition":
            return f_vv + f_vh
        fused = self.cpf(f_vv, f_vh)
        return concat_channels(fused, relu(self.ratio_embed(features[:, 2:4])))


def build_input(features: Tensor, builder: InputBuilder) -> Tensor:
    return builder(features)


class SegmentationNet(Module):
    """Fusion input stage + backbone + sigmoid head: feature stack -> flood probability."""

    def __init__(self, cfg: BackboneConfig, stream: Stream | None = None, precision: str = "standard"):
        stream = stream if stream is not None else Stream(0)
        self.cfg = cfg
        self.inputs = InputBuilder(cfg, stream.child("inputs"), precision)
        self.backbone = EncoderDecoder(cfg.input_channels(), cfg.depth, cfg.base_width,
                                       skips=cfg.kind == "unet", stream=stream.child("backbone"),
                                       precision=precision)

    def named_parameters(self, prefix: str = ""):
        # checkpoint names: stem_vv.*, stem_vh.*, cpf.*, ratio_embed.*, backbone.*
        yield from self.inputs.named_parameters(prefix)
        yield from self.backbone.named_parameters(prefix + "backbone.")

    def logits(self, features: Tensor) -> Tensor:
        return self.backbone(self.inputs(features))

    def forward(self, features: Tensor) -> Tensor:
        return sigmoid(self.logits(features))


def binarize(prob, tau: float = 0.5) -> np.ndarray:
    """Flooded (1) where ``prob >= tau``."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    p = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    return (p >= tau).astype(np.uint8)
