"""Adam, the training loop and slice-level evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import objectives as O
from .autograd import Tape, Tensor
from .data.pipeline import SliceSample, stack_batch
from .errors import ContractError, OnnSegError
from .nn.model import SegModel
from .nn.params import ParamStore

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_soft_dsc")


class NonFiniteLossError(OnnSegError, FloatingPointError):
    pass


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[Tensor], state: AdamState, lr: float,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on every parameter."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError(f"no gradient for parameter {p.name!r}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    running_loss: float = 0.0
    best_val_dsc: float = -math.inf
    patience_counter: int = 0
    history: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "step": self.step, "running_loss": self.running_loss,
                "best_val_dsc": self.best_val_dsc, "patience_counter": self.patience_counter}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    adam: AdamConfig = AdamConfig()
    loss: O.LossWeights = O.LossWeights()
    patience: Optional[int] = 20  # None disables early stopping
    target_dsc: Optional[float] = None  # stop once validation soft-DSC reaches it
    shuffle: bool = True


def batch_indices(n: int, batch_size: int, rng: Optional[np.random.Generator]) -> List[np.ndarray]:
    """Split ``range(n)`` into batches, shuffled when ``rng`` is given.

    A trailing batch of one joins its predecessor: batch norm on the pooled
    attention vectors needs two samples.
    """
    order = rng.permutation(n) if rng is not None else np.arange(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def _batch_stats(x: np.ndarray, y: np.ndarray) -> str:
    parts = [f"ch{c}: min={x[:, c].min():.4g} max={x[:, c].max():.4g} mean={x[:, c].mean():.4g}"
             for c in range(x.shape[1])]
    return "; ".join(parts) + f"; mask fraction={y.mean():.4g}; shape={x.shape}"


def predict_probs(model: SegModel, samples: Sequence[SliceSample], batch_size: int = 8) -> np.ndarray:
    """Eval-mode probabilities for ``samples`` as (N, 1, S, S)."""
    model.store.eval()
    outs = []
    for i in range(0, len(samples), batch_size):
        x, _ = stack_batch(samples[i:i + batch_size])
        outs.append(model(Tensor(x)).data)
    return np.concatenate(outs)


def soft_scores(probs: np.ndarray, masks: np.ndarray, weights: O.LossWeights) -> Tuple[float, float]:
    """(combined loss, soft Dice) pooled over every pixel of the set."""
    p, g = Tensor(probs), Tensor(masks)
    return (O.combined_loss(p, g, weights).item(), O.soft_dice(p, g, weights.eps).item())


def train(model: SegModel, train_samples: Sequence[SliceSample],
          val_samples: Sequence[SliceSample], cfg: TrainConfig, seed: int = 0,
          log_path=None, on_best: Optional[Callable] = None,
          on_epoch: Optional[Callable] = None, opt_state: Optional[AdamState] = None,
          state: Optional[TrainState] = None, rng: Optional[np.random.Generator] = None):
    """Run Adam on the combined loss and validate after every epoch.

    Returns ``(state, opt_state, rng)``. ``on_best`` and ``on_epoch`` get
    ``(state, opt_state, rng)`` after the matching event.
    """
    if not train_samples:
        raise ContractError("no training samples")
    store: ParamStore = model.store
    params = list(store)
    state = state or TrainState()
    opt_state = opt_state or AdamState()
    rng = rng or np.random.default_rng(seed)
    a = cfg.adam
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists() or state.epoch == 0
        log_file = log_path.open("w" if new else "a", newline="")
        writer = csv.writer(log_file)
        if new:
            writer.writerow(LOG_COLUMNS)
    try:
        while state.epoch < cfg.epochs:
            store.train()
            losses = []
            for idx in batch_indices(len(train_samples), cfg.batch_size,
                                     rng if cfg.shuffle else None):
                x, y = stack_batch([train_samples[i] for i in idx])
                store.zero_grad()
                with Tape() as tape:
                    loss = O.combined_loss(model(Tensor(x)), Tensor(y), cfg.loss)
                if not np.isfinite(loss.item()):
                    raise NonFiniteLossError(
                        f"non-finite loss {loss.item()} at epoch {state.epoch + 1} step "
                        f"{state.step + 1}; batch: {_batch_stats(x, y)}")
                tape.backward(loss)
                adam_step(params, opt_state, a.lr, (a.beta1, a.beta2), a.eps)
                state.step += 1
                losses.append(loss.item())
            state.epoch += 1
            state.running_loss = float(np.mean(losses))

            val = val_samples or train_samples
            probs = predict_probs(model, val, max(cfg.batch_size, 2))
            val_loss, val_dsc = soft_scores(probs, stack_batch(val)[1], cfg.loss)
            row = {"epoch": state.epoch, "train_loss": state.running_loss,
                   "val_loss": val_loss, "val_soft_dsc": val_dsc}
            state.history.append(row)
            if log_file is not None:
                writer.writerow([row[c] if c == "epoch" else repr(row[c]) for c in LOG_COLUMNS])
                log_file.flush()
            improved = val_dsc > state.best_val_dsc
            if improved:
                state.best_val_dsc = val_dsc
                state.patience_counter = 0
                if on_best is not None:
                    on_best(state, opt_state, rng)
            else:
                state.patience_counter += 1
            if on_epoch is not None:
                on_epoch(state, opt_state, rng)
            if cfg.target_dsc is not None and val_dsc >= cfg.target_dsc:
                break
            if cfg.patience is not None and state.patience_counter >= cfg.patience:
                break
    finally:
        if log_file is not None:
            log_file.close()
    store.eval()
    return state, opt_state, rng


def evaluate(model: SegModel, samples: Sequence[SliceSample], threshold: float = 0.5,
             batch_size: int = 8):
    """Per-slice hard metrics plus both aggregates.

    Returns ``(per_slice, {"mean-over-slices": report, "pooled-counts": report})``.
    """
    if not samples:
        raise ContractError("no samples to evaluate")
    probs = predict_probs(model, samples, batch_size)
    per_slice = []
    for s, p in zip(samples, probs):
        per_slice.append(O.metrics(O.confusion(O.binarize(p, threshold), s.mask[0])))
    return per_slice, {mode: O.aggregate(per_slice, mode)
                       for mode in ("mean-over-slices", "pooled-counts")}
