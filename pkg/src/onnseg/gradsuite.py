"""Registered finite-difference checks for every differentiable op and block.

Each item builds a closure and its parameters from a seed and reports the
worst per-parameter relative error. ``run_suite`` runs a scope over seeds
0-4 and ``inject_fault`` corrupts one op's backward pass so the suite can
be shown to catch it.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import objectives as O
from .autograd import BatchNormState, Tensor, active_tape, grad_check
from .autograd import ops as F
from .errors import ConfigurationError
from .nn import (CLFF, CSCA, DSE, DenseBlock, ModelConfig, ParamStore, SegModel, SelfONN,
                 SelfOnnLayerConfig, Transition, init_params)

MODULES = ("tensor-core", "net-blocks", "objectives")
TOL = {"tensor-core": 1e-6, "net-blocks": 1e-6, "objectives": 1e-7, "end-to-end": 1e-5}

Case = Tuple[Callable[[], Tensor], List[Tensor], dict]


@dataclass(frozen=True)
class Item:
    name: str
    module: str
    tol: float
    build: Callable[[int], Case]  # seed -> (closure, params, grad_check kwargs)
    op: Optional[str] = None  # the ops function a single-op item exercises


@dataclass
class ItemResult:
    name: str
    module: str
    tol: float
    max_rel_err: float
    worst_param: str
    seconds: float
    op: Optional[str] = None

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.max_rel_err)) and self.max_rel_err <= self.tol


def _p(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, name="x")


def _probe(out: Tensor) -> Tensor:
    r = np.random.default_rng(123).standard_normal(out.shape)
    return F.sum(F.mul(out, Tensor(r)))


def _randomize(store: ParamStore, rng, scale=0.5) -> None:
    for t in store:
        t.data[...] = rng.standard_normal(t.shape) * scale


# -- tensor-core ---------------------------------------------------------------

def _conv(stride, padding, k, bias=True):
    def build(seed):
        rng = np.random.default_rng(seed)
        x, w = _p(rng, 2, 3, 6, 6), _p(rng, 4, 3, k, k)
        w.name = "weight"
        params = [x, w]
        b = None
        if bias:
            b = _p(rng, 4)
            b.name = "bias"
            params.append(b)
        return (lambda: _probe(F.conv2d(x, w, b, stride, padding))), params, {}
    return build


def _bn(training):
    def build(seed):
        rng = np.random.default_rng(seed)
        x = _p(rng, 2, 3, 4, 4)
        st = BatchNormState.create(3, training=training)
        st.gamma.data[:] = rng.standard_normal(3)
        st.beta.data[:] = rng.standard_normal(3)
        if not training:
            st.running_mean[:] = rng.standard_normal(3)
            st.running_var[:] = rng.random(3) + 0.5
        return (lambda: _probe(F.batchnorm2d(x, st))), [x, st.gamma, st.beta], {}
    return build


def _unary(fn, shape=(2, 3, 4, 4)):
    def build(seed):
        x = _p(np.random.default_rng(seed), *shape)
        return (lambda: _probe(fn(x))), [x], {}
    return build


def _binary(fn, b_shape=(2, 3, 1, 1), positive_b=False):
    def build(seed):
        rng = np.random.default_rng(seed)
        a = _p(rng, 2, 3, 4, 4)
        b = Tensor(rng.random(b_shape) + 1.0, requires_grad=True, name="b") if positive_b \
            else _p(rng, *b_shape)
        a.name = "a"
        b.name = "b"
        return (lambda: _probe(fn(a, b))), [a, b], {}
    return build


def _concat(seed):
    rng = np.random.default_rng(seed)
    a, b = _p(rng, 1, 2, 3, 3), _p(rng, 1, 1, 3, 3)
    a.name, b.name = "a", "b"
    return (lambda: _probe(F.concat([a, b], axis=1))), [a, b], {}


def _tensor_core() -> List[Item]:
    t = TOL["tensor-core"]
    specs = [
        ("conv2d", "conv2d", _conv(1, 1, 3)),
        ("conv2d_stride2", "conv2d", _conv(2, 1, 3)),
        ("conv2d_1x1_nobias", "conv2d", _conv(1, 0, 1, bias=False)),
        ("conv2d_5x5_valid", "conv2d", _conv(1, 0, 5)),
        ("batchnorm_train", "batchnorm2d", _bn(True)),
        ("batchnorm_eval", "batchnorm2d", _bn(False)),
        ("relu", "relu", _unary(F.relu)),
        ("sigmoid", "sigmoid", _unary(F.sigmoid)),
        ("tanh", "tanh", _unary(F.tanh)),
        ("power2", "power", _unary(lambda x: F.power(x, 2))),
        ("power3", "power", _unary(lambda x: F.power(x, 3))),
        ("global_avg_pool", "global_avg_pool", _unary(F.global_avg_pool)),
        ("global_max_pool", "global_max_pool", _unary(F.global_max_pool)),
        ("avg_pool2d", "avg_pool2d", _unary(lambda x: F.avg_pool2d(x, 2), (1, 2, 8, 8))),
        ("max_pool2d", "max_pool2d", _unary(F.max_pool2d, (1, 2, 8, 8))),
        ("upsample_bilinear", "upsample2x", _unary(lambda x: F.upsample2x(x, "bilinear"), (1, 2, 3, 4))),
        ("upsample_nearest", "upsample2x", _unary(lambda x: F.upsample2x(x, "nearest"), (1, 2, 3, 4))),
        ("add", "add", _binary(F.add)),
        ("mul", "mul", _binary(F.mul)),
        ("div", "div", _binary(F.div, positive_b=True)),
        ("concat", "concat", _concat),
    ]
    return [Item(n, "tensor-core", t, b, op) for n, op, b in specs]


# -- net-blocks ----------------------------------------------------------------

def _block(make, in_shapes, training=True, max_coords=24):
    """``make(store)`` returns a callable taking len(in_shapes) tensors."""
    def build(seed):
        rng = np.random.default_rng(seed)
        store = ParamStore(seed)
        block = make(store)
        _randomize(store, rng)
        store.train(training)
        xs = [_p(rng, *s) for s in in_shapes]
        for i, x in enumerate(xs):
            x.name = f"input{i}"
        kw = {"max_coords": max_coords}
        return (lambda: _probe(block(*xs))), xs + list(store), kw
    return build


def _selfonn(q):
    return _block(lambda s: SelfONN(s, "onn", SelfOnnLayerConfig(2, 3, 3, Q=q)), [(2, 2, 5, 5)])


def _end_to_end(seed):
    """Tiny preset in eval mode on one 16x16 slice, probed through the
    combined loss. Each parameter group is represented by a few tensors and
    the coordinates with the largest analytic gradient."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig.preset("tiny", in_channels=2)
    store = init_params(cfg, seed)
    model = SegModel(cfg, store)
    for name, st in store.norms.items():
        st.running_mean[:] = rng.standard_normal(st.running_mean.shape) * 0.1
        st.running_var[:] = rng.random(st.running_var.shape) + 0.5
    store.eval()
    x = Tensor(rng.random((1, 2, 16, 16)), requires_grad=True, name="input")
    y = Tensor((rng.random((1, 1, 16, 16)) < 0.3).astype(float))
    names = list(store.params)
    picked = [store.params[n] for n in names
              if n.startswith(("enc.stem", "head.", "bottleneck.dse.avg.conv2"))
              or n.endswith((".onn1.w3", ".clff.wj.w", ".csca.r.w", "layer0.conv.w"))]
    kw = {"max_coords": 2, "pick": "largest"}
    return (lambda: O.combined_loss(model(x), y)), [x] + picked, kw


def _net_blocks() -> List[Item]:
    t = TOL["net-blocks"]
    items = [Item(f"selfonn_q{q}", "net-blocks", t, _selfonn(q)) for q in (1, 2, 3)]
    items += [
        Item("selfonn_no_preact", "net-blocks", t,
             _block(lambda s: SelfONN(s, "onn", SelfOnnLayerConfig(2, 3, 3, Q=3, pre_activation="none")),
                    [(2, 2, 4, 4)])),
        Item("dse", "net-blocks", t, _block(lambda s: DSE(s, "dse", 4, 2), [(3, 4, 4, 4)])),
        # three samples: batch norm over two pooled vectors returns +-1 and
        # leaves the gates with almost no gradient to measure
        Item("csca_train", "net-blocks", t, _block(lambda s: CSCA(s, "csca", 3, 1), [(3, 3, 5, 5)])),
        Item("csca_eval", "net-blocks", t,
             _block(lambda s: CSCA(s, "csca", 4, 2), [(1, 4, 6, 6)], training=False)),
        Item("clff", "net-blocks", t,
             _block(lambda s: CLFF(s, "clff", 3, 2, 3), [(2, 3, 4, 4), (2, 2, 2, 2)])),
        Item("dense_block", "net-blocks", t,
             _block(lambda s: DenseBlock(s, "db", 2, 2, 2), [(2, 2, 4, 4)])),
        Item("transition", "net-blocks", t,
             _block(lambda s: Transition(s, "tr", 4), [(2, 4, 4, 4)])),
        Item("tiny_end_to_end", "net-blocks", TOL["end-to-end"], _end_to_end),
    ]
    return items


# -- objectives ----------------------------------------------------------------

def _loss(fn):
    def build(seed):
        rng = np.random.default_rng(seed)
        p = Tensor(rng.uniform(0.05, 0.95, (2, 1, 6, 6)), requires_grad=True, name="pred")
        g = Tensor((rng.random((2, 1, 6, 6)) < 0.3).astype(float))
        return (lambda: fn(p, g)), [p], {}
    return build


def _objectives() -> List[Item]:
    t = TOL["objectives"]
    return [Item(n, "objectives", t, _loss(f)) for n, f in
            [("soft_dice", O.soft_dice), ("soft_jaccard", O.soft_jaccard),
             ("dice_loss", O.dice_loss), ("jaccard_loss", O.jaccard_loss),
             ("combined_loss", O.combined_loss)]]


def registry() -> List[Item]:
    return _tensor_core() + _net_blocks() + _objectives()


def select(scope: str = "all") -> List[Item]:
    items = registry()
    if scope == "all":
        return items
    picked = [i for i in items if scope in (i.module, i.name)]
    if not picked:
        raise ConfigurationError(
            f"unknown gradcheck scope {scope!r}; use 'all', a module {list(MODULES)} or an item name")
    return picked


STEPS = (1e-5, 1e-6, 1e-7)


def _check_seed(item: Item, seed: int) -> Tuple[float, str]:
    """Worst per-parameter error for one seed.

    A parameter that misses the tolerance at the first step is re-probed at
    the smaller steps on the same coordinates and keeps its best error. A
    perturbation that straddles a ReLU or max-pool kink produces a spurious
    error that vanishes as the step shrinks; a wrong backward pass does not.
    """
    fn, params, kw = item.build(seed)
    best: Dict[str, float] = {}
    for h in STEPS:
        rep = grad_check(fn, params, tol=item.tol, h=h, rng=np.random.default_rng(seed), **kw)
        for pc in rep.params:
            e = pc.max_rel_err if np.isfinite(pc.max_rel_err) else np.inf
            best[pc.name] = min(best.get(pc.name, np.inf), e)
        if max(best.values(), default=0.0) <= item.tol:
            break
    name = max(best, key=best.get, default="-")
    return best.get(name, 0.0), name


def run_item(item: Item, seeds: Iterable[int] = range(5)) -> ItemResult:
    t0 = time.perf_counter()
    worst, worst_param = 0.0, ""
    for seed in seeds:
        err, name = _check_seed(item, seed)
        if not np.isfinite(err) or err > worst:
            worst, worst_param = err, f"{name} (seed {seed})"
            if not np.isfinite(err):
                break
    return ItemResult(item.name, item.module, item.tol, worst, worst_param,
                      time.perf_counter() - t0, item.op)


def run_suite(scope: str = "all", seeds: Sequence[int] = range(5)) -> List[ItemResult]:
    return [run_item(item, seeds) for item in select(scope)]


def culprits(results: Sequence[ItemResult]) -> List[str]:
    """Failing single-op items; a broken op also fails every block that uses it."""
    return sorted({r.op for r in results if r.op is not None and not r.ok})


def format_results(results: Sequence[ItemResult]) -> str:
    lines = [f"{'item':<22}{'module':<13}{'max rel err':>13}{'tol':>9}  status  worst"]
    for r in results:
        lines.append(f"{r.name:<22}{r.module:<13}{r.max_rel_err:>13.3e}{r.tol:>9.0e}  "
                     f"{'pass' if r.ok else 'FAIL':<6}  {r.worst_param}")
    total = sum(r.seconds for r in results)
    failed = [r.name for r in results if not r.ok]
    lines.append(f"{len(results) - len(failed)}/{len(results)} passed in {total:.1f}s")
    if failed:
        lines.append("failed: " + ", ".join(failed))
        names = culprits(results)
        if names:
            lines.append("culprit ops: " + ", ".join(names))
    return "\n".join(lines)


@contextlib.contextmanager
def inject_fault(op: str, factor: float = 2.0) -> Iterator[None]:
    """Temporarily scale every input gradient of ``ops.<op>`` by ``factor``.

    Blocks and losses call ops through the module attribute, so the fault
    reaches every composite that uses the op.
    """
    real = getattr(F, op, None)
    if not callable(real):
        raise ConfigurationError(f"no op named {op!r} to inject a fault into")

    def faulty(*args, **kwargs):
        tape = active_tape()
        before = len(tape.nodes) if tape is not None else 0
        out = real(*args, **kwargs)
        if tape is not None:
            for node in tape.nodes[before:]:
                if node.output is out:
                    inner = node.backward
                    node.backward = lambda g, inner=inner: tuple(
                        None if v is None else factor * v for v in inner(g))
        return out

    setattr(F, op, faulty)
    try:
        yield
    finally:
        setattr(F, op, real)
