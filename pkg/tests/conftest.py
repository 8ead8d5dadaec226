import numpy as np
import pytest

from onnseg.autograd import Tensor


def param(rng, *shape, scale=1.0, name=None):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, name=name)


def weighted_sum(out: Tensor, seed: int = 123) -> Tensor:
    """Scalar probe ``sum(out * R)`` with fixed random R, so every output
    element gets a distinct, O(1) upstream gradient."""
    from onnseg.autograd import ops as F

    r = np.random.default_rng(seed).standard_normal(out.shape)
    return F.sum(F.mul(out, Tensor(r)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and prints it."""
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
