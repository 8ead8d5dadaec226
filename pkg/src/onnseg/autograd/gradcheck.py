"""Central finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, DeterminismError
from .tensor import Tape, Tensor


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    n_checked: int


@dataclass
class GradCheckReport:
    tol: float
    params: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tol

    def worst(self) -> Optional[ParamCheck]:
        return max(self.params, key=lambda p: p.max_rel_err, default=None)


def relative_error(analytic, numeric) -> float:
    """``max|a - n| / max(max|a|, max|n|, 1e-12)`` over one parameter.

    The denominator is taken over the whole parameter rather than per
    coordinate: central differences at ``h = 1e-5`` carry an absolute
    truncation error near 1e-10, which would swamp any coordinate whose true
    gradient happens to sit near zero.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
    return float(np.abs(a - n).max() / denom)


def _scalar(out: Tensor) -> float:
    if out.data.size != 1:
        raise ContractError(f"grad_check closure must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(()))


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], tol: float,
               h: float = 1e-5, max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None, pick: str = "random") -> GradCheckReport:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the computation from ``params`` on every call.
    With ``max_coords`` set, only that many randomly chosen coordinates of
    each parameter are probed (the analytic gradient is still computed in
    full); otherwise every coordinate is probed. ``pick="largest"`` probes
    the coordinates with the largest analytic magnitude instead of random
    ones.
    """
    if pick not in ("random", "largest"):
        raise ContractError(f"unknown coordinate pick rule {pick!r}")
    first = _scalar(fn())
    if _scalar(fn()) != first:
        raise DeterminismError("grad_check closure is not deterministic")

    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    rng = rng if rng is not None else np.random.default_rng(0)
    report = GradCheckReport(tol=tol)
    for i, (p, a) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            if pick == "largest":
                coords = np.sort(np.argsort(-np.abs(a.reshape(-1)), kind="stable")[:max_coords])
            else:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        else:
            coords = np.arange(flat.size)
        numeric = np.empty(len(coords))
        for j, k in enumerate(coords):
            orig = flat[k]
            flat[k] = orig + h
            fp = _scalar(fn())
            flat[k] = orig - h
            fm = _scalar(fn())
            flat[k] = orig
            numeric[j] = (fp - fm) / (2 * h)
        err = relative_error(a.reshape(-1)[coords], numeric)
        name = p.name or f"param[{i}]"
        report.params.append(ParamCheck(name, err, len(coords)))
    return report
