"""DenseNet-style encoder, attention-gated SelfONN decoder and the full
segmentation model.

Stage map for an input of side ``H``:

============  ===================  ===================
feature       densenet121          tiny
============  ===================  ===================
skip 0        stem, H/2, 64 ch     stem, H, 8 ch
skip 1        block 1, H/4         block 1, H
skip 2        block 2, H/8         block 2, H/2
skip 3        block 3, H/16        block 3, H/4
bottleneck    block 4, H/32        block 4, H/8
============  ===================  ===================

Decoder stage ``i`` (i = 1..4) works at the resolution of skip ``4 - i``.
It upsamples the previous output when that is half the skip's size,
concatenates the CSCA-gated skip, applies SelfONN -> BN -> SelfONN, and
fuses the result with the previous output through CLFF. The head resizes
to the input side if needed, then applies a 1x1 conv and a sigmoid.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

from ..autograd import Tensor
from ..autograd import ops as F
from ..errors import ConfigurationError, DimensionError
from .blocks import (CLFF, CSCA, DSE, Conv, DenseBlock, SelfONN, SelfOnnLayerConfig, Transition,
                     match_resolution)
from .params import ParamStore

PRESETS = {
    # stem, growth, block layers, decoder widths, stem kind, total stride
    "densenet121": dict(stem_channels=64, growth_rate=32, block_layers=(6, 12, 24, 16),
                        decoder_channels=(256, 128, 64, 32), stem="imagenet"),
    "tiny": dict(stem_channels=8, growth_rate=8, block_layers=(2, 2, 2, 2),
                 decoder_channels=(16, 16, 8, 8), stem="light"),
}
_STEM_STRIDE = {"imagenet": 4, "light": 1}


@dataclass(frozen=True)
class EncoderConfig:
    preset: str = "tiny"
    stem_channels: int = 8
    growth_rate: int = 8
    block_layers: Tuple[int, ...] = (2, 2, 2, 2)
    compression: float = 0.5
    stem: str = "light"

    def __post_init__(self):
        if len(self.block_layers) != 4:
            raise ConfigurationError("encoder needs exactly four dense blocks")
        if self.stem not in _STEM_STRIDE:
            raise ConfigurationError(f"unknown stem kind {self.stem!r}")

    @property
    def total_stride(self) -> int:
        return _STEM_STRIDE[self.stem] * 8

    @property
    def divisor(self) -> int:
        """Input sides must be multiples of this."""
        return max(16, self.total_stride)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    in_channels: int = 3
    decoder_channels: Tuple[int, ...] = (16, 16, 8, 8)
    Q: int = 3
    pre_activation: str = "tanh"
    kernel: int = 3
    dse_reduction: int = 4

    def __post_init__(self):
        if self.in_channels not in (1, 2, 3):
            raise ConfigurationError(f"in_channels must be 1, 2 or 3, got {self.in_channels}")
        if len(self.decoder_channels) != 4:
            raise ConfigurationError("decoder needs exactly four stages")
        if self.Q < 1:
            raise ConfigurationError(f"SelfONN order Q must be >= 1, got {self.Q}")

    @classmethod
    def preset(cls, name: str, in_channels: int = 3, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        p = dict(PRESETS[name])
        dec = p.pop("decoder_channels")
        enc = EncoderConfig(preset=name, **p)
        return cls(encoder=enc, in_channels=in_channels,
                   decoder_channels=overrides.pop("decoder_channels", dec), **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["block_layers"] = list(self.encoder.block_layers)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = dict(d.pop("encoder"))
        enc["block_layers"] = tuple(enc["block_layers"])
        d["decoder_channels"] = tuple(d["decoder_channels"])
        return cls(encoder=EncoderConfig(**enc), **d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode()).digest()


class Encoder:
    def __init__(self, store: ParamStore, cfg: EncoderConfig, in_channels: int):
        self.cfg = cfg
        self.in_channels = in_channels
        c = cfg.stem_channels
        if cfg.stem == "imagenet":
            self.stem_conv = Conv(store, "enc.stem.conv", in_channels, c, 7, stride=2, padding=3,
                                  bias=False)
        else:
            self.stem_conv = Conv(store, "enc.stem.conv", in_channels, c, 3, bias=False)
        self.stem_bn = store.batchnorm("enc.stem.bn", c)
        self.blocks: List[DenseBlock] = []
        self.transitions: List[Transition] = []
        for i, n_layers in enumerate(cfg.block_layers):
            block = DenseBlock(store, f"enc.block{i + 1}", c, n_layers, cfg.growth_rate)
            self.blocks.append(block)
            c = block.out_ch
            if i < 3:
                tr = Transition(store, f"enc.trans{i + 1}", c, cfg.compression)
                self.transitions.append(tr)
                c = tr.out_ch
        self.final_bn = store.batchnorm("enc.final.bn", c)
        self.skip_channels = [cfg.stem_channels] + [b.out_ch for b in self.blocks[:3]]
        self.out_channels = c

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"encoder stem: expected {self.in_channels} input channels, got shape {x.shape}")
        d = self.cfg.divisor
        if x.shape[2] % d or x.shape[3] % d:
            raise DimensionError(
                f"encoder: spatial dims {x.shape[2:]} must be divisible by {d} "
                f"for the {self.cfg.preset} preset")

    def __call__(self, x: Tensor):
        """Return ``(skips, bottleneck)`` with four skips, shallow first."""
        self.check_input(x)
        h = F.relu(F.batchnorm2d(self.stem_conv(x), self.stem_bn))
        skips = [h]
        if self.cfg.stem == "imagenet":
            h = F.max_pool2d(h, 3, 2, 1)
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i < 3:
                skips.append(h)
                h = self.transitions[i](h)
        return skips, F.relu(F.batchnorm2d(h, self.final_bn))


class DecoderStage:
    def __init__(self, store: ParamStore, name: str, prev_ch: int, skip_ch: int, out_ch: int,
                 cfg: ModelConfig):
        self.name = name
        self.csca = CSCA(store, f"{name}.csca", skip_ch, cfg.dse_reduction)
        lc = dict(kernel=cfg.kernel, Q=cfg.Q, pre_activation=cfg.pre_activation)
        self.onn1 = SelfONN(store, f"{name}.onn1", SelfOnnLayerConfig(prev_ch + skip_ch, out_ch, **lc))
        self.bn = store.batchnorm(f"{name}.bn", out_ch)
        self.onn2 = SelfONN(store, f"{name}.onn2", SelfOnnLayerConfig(out_ch, out_ch, **lc))
        self.clff = CLFF(store, f"{name}.clff", out_ch, prev_ch, out_ch)

    def __call__(self, prev: Tensor, skip: Tensor) -> Tensor:
        up = match_resolution(prev, skip.shape[2:], self.name)
        h = F.concat([up, self.csca(skip)], axis=1)
        h = self.onn2(F.batchnorm2d(self.onn1(h), self.bn))
        return self.clff(h, prev)


class SegModel:
    """Callable model bound to a ParamStore; building twice on one store
    reuses the same tensors."""

    def __init__(self, cfg: ModelConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store
        self.encoder = Encoder(store, cfg.encoder, cfg.in_channels)
        self.bottleneck = DSE(store, "bottleneck.dse", self.encoder.out_channels, cfg.dse_reduction)
        prev = self.encoder.out_channels
        self.stages = []
        for i, width in enumerate(cfg.decoder_channels):
            skip_ch = self.encoder.skip_channels[3 - i]
            self.stages.append(DecoderStage(store, f"dec.stage{i + 1}", prev, skip_ch, width, cfg))
            prev = width
        self.head = Conv(store, "head.conv", prev, 1, 1)

    def __call__(self, x: Tensor) -> Tensor:
        skips, h = self.encoder(x)
        h = self.bottleneck(h)
        for i, stage in enumerate(self.stages):
            h = stage(h, skips[3 - i])
        h = match_resolution(h, x.shape[2:], "head")
        return F.sigmoid(self.head(h))


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    store = ParamStore(seed)
    SegModel(cfg, store)
    return store


def model_forward(batch: Tensor, cfg: ModelConfig, params: ParamStore,
                  model: Optional[SegModel] = None) -> Tensor:
    return (model or SegModel(cfg, params))(batch)
