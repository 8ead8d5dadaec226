"""Network building blocks.

Each block registers its tensors in a :class:`ParamStore` under a name
prefix at construction and is a plain callable afterwards. All arithmetic
goes through ``ops`` so any op can be swapped out for fault injection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

from ..autograd import Tensor
from ..autograd import ops as F
from ..errors import ConfigurationError, DimensionError
from .params import ParamStore


def _expect_channels(x: Tensor, channels: int, where: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise DimensionError(f"{where}: expected {channels} input channels, got shape {x.shape}")


class Conv:
    def __init__(self, store: ParamStore, name: str, in_ch: int, out_ch: int, k: int = 1,
                 stride: int = 1, padding: Optional[int] = None, bias: bool = True):
        self.weight = store.kernel(f"{name}.w", out_ch, in_ch, k)
        self.bias = store.bias(f"{name}.b", out_ch) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelfOnnLayerConfig:
    in_ch: int
    out_ch: int
    kernel: int = 3
    Q: int = 3
    pre_activation: str = "tanh"  # or "none"

    def __post_init__(self):
        if self.Q < 1:
            raise ConfigurationError(f"SelfONN order Q must be >= 1, got {self.Q}")
        if self.pre_activation not in ("tanh", "none"):
            raise ConfigurationError(f"unknown pre_activation {self.pre_activation!r}")


class SelfONN:
    """Generative-neuron convolution: ``bias + sum_q conv(W_q, y**q)``.

    ``y`` is ``tanh(x)`` by default so the powers stay bounded. The constant
    Taylor term of every kernel position folds into the bias. Kernels for
    ``q >= 2`` start ``1/q!`` smaller than the first-order kernel.

    All Q terms run as one convolution: powers are stacked along channels
    and the kernels along their input axis.
    """

    def __init__(self, store: ParamStore, name: str, cfg: SelfOnnLayerConfig):
        self.cfg = cfg
        self.weights = [store.kernel(f"{name}.w{q}", cfg.out_ch, cfg.in_ch, cfg.kernel,
                                     scale=1.0 / math.factorial(q))
                        for q in range(1, cfg.Q + 1)]
        self.bias = store.bias(f"{name}.b", cfg.out_ch)

    def __call__(self, x: Tensor) -> Tensor:
        _expect_channels(x, self.cfg.in_ch, "SelfONN")
        y = F.tanh(x) if self.cfg.pre_activation == "tanh" else x
        if self.cfg.Q == 1:
            stacked, kernel = y, self.weights[0]
        else:
            stacked = F.concat([y] + [F.power(y, q) for q in range(2, self.cfg.Q + 1)], axis=1)
            kernel = F.concat(self.weights, axis=1)
        return F.conv2d(stacked, kernel, self.bias, 1, self.cfg.kernel // 2)


# ---------------------------------------------------------------------------


class ConvBlock:
    """1x1 conv -> BN -> ReLU -> 1x1 conv on pooled (N, C, 1, 1) vectors.

    Convolutions that feed a batch norm carry no bias here or elsewhere:
    the normalisation would cancel it.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, hidden: int):
        self.down = Conv(store, f"{name}.conv1", channels, hidden, bias=False)
        self.norm = store.batchnorm(f"{name}.bn", hidden)
        self.up = Conv(store, f"{name}.conv2", hidden, channels)

    def __call__(self, v: Tensor) -> Tensor:
        return self.up(F.relu(F.batchnorm2d(self.down(v), self.norm)))


class DSE:
    """Double squeeze-and-excitation.

    An average-pooled gate rescales the channels, then a max-pooled gate
    computed from the rescaled map rescales them again. Both gates lie in
    (0, 1), so no element grows in magnitude.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, reduction: int = 4):
        hidden = max(1, channels // reduction)
        self.channels = channels
        self.avg_block = ConvBlock(store, f"{name}.avg", channels, hidden)
        self.max_block = ConvBlock(store, f"{name}.max", channels, hidden)

    def __call__(self, x: Tensor) -> Tensor:
        _expect_channels(x, self.channels, "DSE")
        w1 = F.sigmoid(self.avg_block(F.global_avg_pool(x)))
        f_avg = F.mul(x, w1)
        w2 = F.sigmoid(self.max_block(F.global_max_pool(f_avg)))
        return F.mul(f_avg, w2)


class CSCA:
    """Channel and space compound attention over a skip connection.

    Three paths see the input: a DSE-first value path ``F_v``, a sigmoid
    query path ``F_q`` and a DSE-last key path ``F_k``. The spatial mean of
    ``F_v * F_q * F_k`` gives one weight per channel, which rescales a 1x1
    projection ``F_r`` of the input.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, reduction: int = 4):
        c = channels
        self.channels = c
        self.v_dse = DSE(store, f"{name}.v.dse", c, reduction)
        self.v_conv1 = Conv(store, f"{name}.v.conv1", c, c, 3, bias=False)
        self.v_bn = store.batchnorm(f"{name}.v.bn", c)
        self.v_conv2 = Conv(store, f"{name}.v.conv2", c, c, 3)
        self.q_conv1 = Conv(store, f"{name}.q.conv1", c, c, 1, bias=False)
        self.q_bn = store.batchnorm(f"{name}.q.bn", c)
        self.q_conv2 = Conv(store, f"{name}.q.conv2", c, c, 1)
        self.k_conv1 = Conv(store, f"{name}.k.conv1", c, c, 3, bias=False)
        self.k_bn = store.batchnorm(f"{name}.k.bn", c)
        self.k_conv2 = Conv(store, f"{name}.k.conv2", c, c, 3)
        self.k_dse = DSE(store, f"{name}.k.dse", c, reduction)
        self.r_proj = Conv(store, f"{name}.r", c, c, 1)

    def attention(self, x: Tensor) -> Tensor:
        f_v = self.v_conv2(F.batchnorm2d(self.v_conv1(self.v_dse(x)), self.v_bn))
        f_q = F.sigmoid(self.q_conv2(F.batchnorm2d(self.q_conv1(x), self.q_bn)))
        f_k = self.k_dse(self.k_conv2(F.batchnorm2d(self.k_conv1(x), self.k_bn)))
        return F.global_avg_pool(F.mul(f_v, F.mul(f_q, f_k)))

    def __call__(self, x: Tensor) -> Tensor:
        _expect_channels(x, self.channels, "CSCA")
        return F.mul(self.r_proj(x), self.attention(x))


def match_resolution(small: Tensor, target_hw, where: str) -> Tensor:
    """Return ``small`` at ``target_hw``: unchanged if equal, bilinearly
    doubled if exactly half, otherwise a DimensionError naming ``where``."""
    hw = small.shape[2:]
    if tuple(hw) == tuple(target_hw):
        return small
    if (hw[0] * 2, hw[1] * 2) == tuple(target_hw):
        return F.upsample2x(small, "bilinear")
    raise DimensionError(f"{where}: cannot bring spatial dims {tuple(hw)} to {tuple(target_hw)}")


class CLFF:
    """Cross-layer fusion ``relu(W_i * F_i + W_j * up(F_j))`` with 1x1 kernels.

    The 1x1 projection of ``F_j`` runs before the upsampling. Both are linear
    and the bilinear weights sum to one, so the order does not change the
    result and the projection is four times cheaper.
    """

    def __init__(self, store: ParamStore, name: str, in_i: int, in_j: int, out_ch: int):
        self.in_i, self.in_j = in_i, in_j
        self.proj_i = Conv(store, f"{name}.wi", in_i, out_ch)
        self.proj_j = Conv(store, f"{name}.wj", in_j, out_ch)

    def __call__(self, f_i: Tensor, f_j: Tensor) -> Tensor:
        _expect_channels(f_i, self.in_i, "CLFF F_i")
        _expect_channels(f_j, self.in_j, "CLFF F_j")
        pj = match_resolution(self.proj_j(f_j), f_i.shape[2:], "CLFF")
        return F.relu(F.add(self.proj_i(f_i), pj))


# ---------------------------------------------------------------------------


class DenseLayer:
    def __init__(self, store: ParamStore, name: str, in_ch: int, growth: int):
        self.norm = store.batchnorm(f"{name}.bn", in_ch)
        self.conv = Conv(store, f"{name}.conv", in_ch, growth, 3, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(F.relu(F.batchnorm2d(x, self.norm)))


class DenseBlock:
    """Layer ``l`` sees the block input and every earlier layer's output."""

    def __init__(self, store: ParamStore, name: str, in_ch: int, layers: int, growth: int):
        self.in_ch = in_ch
        self.layers = [DenseLayer(store, f"{name}.layer{i}", in_ch + i * growth, growth)
                       for i in range(layers)]
        self.out_ch = in_ch + layers * growth

    def __call__(self, x: Tensor) -> Tensor:
        _expect_channels(x, self.in_ch, "dense block")
        features: List[Tensor] = [x]
        for layer in self.layers:
            features.append(layer(F.concat(features, axis=1)))
        return F.concat(features, axis=1)


class Transition:
    """BN -> ReLU -> 1x1 conv halving channels -> 2x2 average pool."""

    def __init__(self, store: ParamStore, name: str, in_ch: int, compression: float = 0.5):
        self.out_ch = int(math.floor(in_ch * compression))
        self.norm = store.batchnorm(f"{name}.bn", in_ch)
        self.conv = Conv(store, f"{name}.conv", in_ch, self.out_ch, 1, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        return F.avg_pool2d(self.conv(F.relu(F.batchnorm2d(x, self.norm))), 2)
