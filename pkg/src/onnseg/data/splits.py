"""Patient-wise train/val/test splits and k-fold plans.

Shuffling is a Fisher-Yates pass driven by SplitMix64 so plans are
reproducible in any language: for ``i`` from ``n-1`` down to ``1`` draw
``j`` uniformly from ``[0, i]`` by rejection sampling on the 64-bit output
and swap positions ``i`` and ``j``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import List, Sequence, Tuple

from ..errors import ConfigurationError, ValidationError

_MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Uniform integer in ``[0, bound)`` without modulo bias."""
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            r = self.next()
            if r < limit:
                return r % bound


def seeded_shuffle(items: Sequence, seed: int) -> list:
    out = list(items)
    rng = SplitMix64(seed)
    for i in range(len(out) - 1, 0, -1):
        j = rng.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def round_half_up(x) -> int:
    return math.floor(Fraction(x) + Fraction(1, 2))


def _decimal(r: float) -> Fraction:
    # 0.7 means 7/10, not the nearest binary float
    return Fraction(repr(float(r)))


def _check_unique(ids: Sequence[str]) -> None:
    seen = set()
    dups = sorted({i for i in ids if i in seen or seen.add(i)})
    if dups:
        raise ValidationError(f"duplicate patient ids: {dups}")


@dataclass
class SplitPlan:
    train: List[str]
    val: List[str]
    test: List[str]
    seed: int
    ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)

    def partition_of(self, patient_id: str) -> str:
        for name in ("train", "val", "test"):
            if patient_id in getattr(self, name):
                return name
        raise KeyError(patient_id)

    def to_json(self) -> str:
        return json.dumps({"train": self.train, "val": self.val, "test": self.test,
                           "seed": self.seed, "ratios": list(self.ratios)}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        return cls(d["train"], d["val"], d["test"], d["seed"], tuple(d["ratios"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "SplitPlan":
        return cls.from_json(Path(path).read_text())


def patient_split(ids: Sequence[str], ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitPlan:
    """Shuffle then cut at ``round(r0*n)`` and ``round((r0+r1)*n)``, rounding
    half up."""
    ids = list(ids)
    _check_unique(ids)
    if len(ids) < 3:
        raise ValidationError(f"need at least 3 patients to split, got {len(ids)}")
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValidationError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    order = seeded_shuffle(ids, seed)
    n = len(order)
    a = round_half_up(_decimal(ratios[0]) * n)
    b = round_half_up((_decimal(ratios[0]) + _decimal(ratios[1])) * n)
    return SplitPlan(order[:a], order[a:b], order[b:], seed, tuple(ratios))


@dataclass
class FoldPlan:
    folds: List[List[str]]
    seed: int
    k: int = field(init=False)

    def __post_init__(self):
        self.k = len(self.folds)

    def train_ids(self, fold: int) -> List[str]:
        return [p for i, f in enumerate(self.folds) if i != fold for p in f]

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "seed": self.seed, "folds": self.folds}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        return cls(d["folds"], d["seed"])


def kfold(ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle, then position ``i`` goes to fold ``i % k``."""
    ids = list(ids)
    _check_unique(ids)
    if k < 1 or k > len(ids):
        raise ConfigurationError(f"k={k} folds impossible for {len(ids)} patients")
    order = seeded_shuffle(ids, seed)
    return FoldPlan([order[i::k] for i in range(k)], seed)
