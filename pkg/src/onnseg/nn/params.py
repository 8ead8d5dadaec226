"""Named parameter storage shared by every block.

Blocks ask the store for their tensors by name. The first request creates
and initialises the tensor from the store's PCG64 stream, so construction
order fixes the draw order and a given seed always yields the same store.
Later requests return the existing tensor, which lets a model be rebuilt
around loaded weights.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from ..autograd import BatchNormState, Tensor
from ..errors import ContractError, DimensionError


def kaiming_bound(fan_in: int) -> float:
    return math.sqrt(6.0 / fan_in)


class ParamStore:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.norms: "OrderedDict[str, BatchNormState]" = OrderedDict()

    # -- creation -----------------------------------------------------------

    def _get(self, name: str, shape: Tuple[int, ...], init) -> Tensor:
        t = self.params.get(name)
        if t is None:
            t = Tensor(init(shape), requires_grad=True, name=name)
            self.params[name] = t
        elif t.shape != tuple(shape):
            raise DimensionError(f"parameter {name} has shape {t.shape}, block expects {shape}")
        return t

    def kernel(self, name: str, out_ch: int, in_ch: int, k: int, scale: float = 1.0) -> Tensor:
        """Kernel drawn from U(-b, b) with ``b = scale * sqrt(6 / fan_in)``."""
        bound = scale * kaiming_bound(in_ch * k * k)
        return self._get(name, (out_ch, in_ch, k, k),
                         lambda s: self.rng.uniform(-bound, bound, s))

    def bias(self, name: str, channels: int) -> Tensor:
        return self._get(name, (channels,), np.zeros)

    def batchnorm(self, name: str, channels: int) -> BatchNormState:
        st = self.norms.get(name)
        if st is None:
            gamma = self._get(f"{name}.gamma", (channels,), np.ones)
            beta = self._get(f"{name}.beta", (channels,), np.zeros)
            st = BatchNormState(gamma, beta, np.zeros(channels), np.ones(channels))
            self.norms[name] = st
        elif st.channels != channels:
            raise DimensionError(f"batchnorm {name} has {st.channels} channels, block expects {channels}")
        return st

    # -- views --------------------------------------------------------------

    def train(self, mode: bool = True) -> None:
        for st in self.norms.values():
            st.training = mode

    def eval(self) -> None:
        self.train(False)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, st in self.norms.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Every parameter and buffer keyed ``param/<name>`` or ``buffer/<name>``."""
        out = OrderedDict((f"param/{k}", t.data) for k, t in self.params.items())
        out.update((f"buffer/{k}", v) for k, v in self.buffers().items())
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray], strict: bool = True) -> None:
        expected = self.state_arrays()
        if strict:
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(k for k in arrays if k.split("/")[0] in ("param", "buffer")
                           and k not in expected)
            if missing or extra:
                raise ContractError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for key, dst in expected.items():
            if key not in arrays:
                continue
            src = np.asarray(arrays[key], dtype=np.float64)
            if src.shape != dst.shape:
                raise DimensionError(f"{key}: stored shape {src.shape} != model shape {dst.shape}")
            dst[...] = src

    def equal(self, other: "ParamStore") -> bool:
        a, b = self.state_arrays(), other.state_arrays()
        return list(a) == list(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)

    def get(self, name: str) -> Optional[Tensor]:
        return self.params.get(name)
