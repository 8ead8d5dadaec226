"""Segmentation losses and hard overlap metrics.

The soft losses operate on probability maps and are differentiable through
the tape. The Jaccard index is the standard intersection over union,
``sum(p*g) / (sum(p + g - p*g) + eps)``, so it never exceeds 1.

Hard metrics follow the usual confusion-count formulas. Any ratio whose
numerator and denominator are both zero scores 1.0 when prediction and
ground truth are both empty for that ratio's terms, else 0.0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor, ops as F
from .errors import ContractError, DimensionError, ValidationError

TABLE_COLUMNS = ("DSC", "IoU", "Precision", "Recall")


@dataclass(frozen=True)
class LossWeights:
    w_dice: float = 0.5
    w_jaccard: float = 0.5
    eps: float = 1e-6

    def __post_init__(self):
        if abs(self.w_dice + self.w_jaccard - 1.0) > 1e-12:
            raise ValidationError(
                f"loss weights must sum to 1, got {self.w_dice} + {self.w_jaccard}")
        if not self.eps > 0:
            raise ValidationError(f"eps must be positive, got {self.eps}")


def _overlap_terms(pred: Tensor, gt: Tensor):
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    inter = F.sum(F.mul(pred, gt))
    return inter, F.sum(pred), F.sum(gt)


def soft_dice(pred: Tensor, gt: Tensor, eps: float = 1e-6) -> Tensor:
    inter, sp, sg = _overlap_terms(pred, gt)
    return F.div(F.mul(inter, 2.0), F.add(F.add(sp, sg), eps))


def soft_jaccard(pred: Tensor, gt: Tensor, eps: float = 1e-6) -> Tensor:
    inter, sp, sg = _overlap_terms(pred, gt)
    union = F.sub(F.add(sp, sg), inter)
    return F.div(inter, F.add(union, eps))


def dice_loss(pred: Tensor, gt: Tensor, eps: float = 1e-6) -> Tensor:
    return F.sub(1.0, soft_dice(pred, gt, eps))


def jaccard_loss(pred: Tensor, gt: Tensor, eps: float = 1e-6) -> Tensor:
    return F.sub(1.0, soft_jaccard(pred, gt, eps))


def combined_loss(pred: Tensor, gt: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    ld = dice_loss(pred, gt, weights.eps)
    lj = jaccard_loss(pred, gt, weights.eps)
    return F.add(F.mul(ld, weights.w_dice), F.mul(lj, weights.w_jaccard))


# ---------------------------------------------------------------------------
# hard metrics


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    """1 where ``pred >= threshold`` else 0 (ties go to the lesion class)."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=np.float64)
    return (p >= threshold).astype(np.uint8)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def _as_binary(a, what: str) -> np.ndarray:
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    if arr.dtype == bool:
        return arr
    if not np.all((arr == 0) | (arr == 1)):
        raise ContractError(f"{what} must be binary (values in {{0, 1}})")
    return arr.astype(bool)


def confusion(pred_bin, gt) -> ConfusionCounts:
    p = _as_binary(pred_bin, "prediction")
    g = _as_binary(gt, "ground truth")
    if p.shape != g.shape:
        raise DimensionError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


@dataclass(frozen=True)
class MetricReport:
    dsc: float
    iou: float
    precision: float
    recall: float
    counts: ConfusionCounts
    scope: str = "per-slice"

    def to_dict(self) -> dict:
        return {"dsc": self.dsc, "iou": self.iou, "precision": self.precision,
                "recall": self.recall, "tp": self.counts.tp, "fp": self.counts.fp,
                "fn": self.counts.fn, "tn": self.counts.tn, "scope": self.scope}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["dsc"], d["iou"], d["precision"], d["recall"],
                   ConfusionCounts(d["tp"], d["fp"], d["fn"], d["tn"]), d["scope"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def row(self) -> tuple:
        """Values in table column order: DSC, IoU, Precision, Recall."""
        return (self.dsc, self.iou, self.precision, self.recall)


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def metrics(counts: ConfusionCounts, scope: str = "per-slice") -> MetricReport:
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    pred_empty = tp + fp == 0
    gt_empty = tp + fn == 0
    empty = pred_empty and gt_empty
    return MetricReport(
        dsc=_ratio(2 * tp, 2 * tp + fp + fn, empty),
        iou=_ratio(tp, tp + fp + fn, empty),
        precision=_ratio(tp, tp + fp, empty),
        recall=_ratio(tp, tp + fn, empty),
        counts=counts,
        scope=scope,
    )


def aggregate(reports: Sequence[MetricReport], mode: str = "mean-over-slices") -> MetricReport:
    """Combine per-slice reports.

    ``mean-over-slices`` averages each metric; the attached counts are the
    summed counts. ``pooled-counts`` sums counts first and recomputes.
    """
    if not reports:
        raise ContractError("aggregate needs at least one report")
    total = reports[0].counts
    for r in reports[1:]:
        total = total + r.counts
    if mode == "pooled-counts":
        return metrics(total, scope=mode)
    if mode == "mean-over-slices":
        n = len(reports)
        return MetricReport(
            dsc=math.fsum(r.dsc for r in reports) / n,
            iou=math.fsum(r.iou for r in reports) / n,
            precision=math.fsum(r.precision for r in reports) / n,
            recall=math.fsum(r.recall for r in reports) / n,
            counts=total,
            scope=mode,
        )
    raise ContractError(f"unknown aggregation mode {mode!r}")


def format_table_row(label: str, report: MetricReport, width: int = 18) -> str:
    """Percentages in DSC / IoU / Precision / Recall order, two decimals."""
    vals = " / ".join(f"{100 * v:.2f}" for v in report.row())
    return f"{label:<{width}} {vals}"


def format_table(rows: Sequence[tuple], width: int = 18) -> str:
    header = f"{'':<{width}} " + " / ".join(TABLE_COLUMNS)
    return "\n".join([header] + [format_table_row(lbl, rep, width) for lbl, rep in rows])
