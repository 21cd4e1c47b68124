"""Focal, IoU and BCE losses with reciprocal re-weighting.

The classification loss at positive cells is weighted by the IoU of the box
regressed at that cell, the IoU loss by the classification confidence, and
the localization branch is trained toward the same IoU.  All three weights
are detached so each branch is steered only by its own loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .diffmath import Tensor, ops
from .geometry import centerness_array, decode_array, encode_array, iou_array, iou_diff

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    reciprocal: bool = True  # IoU-weighted cls loss and p_cls-weighted reg loss
    localization: bool = True  # train the localization branch and rank by p_cls * p_loc
    reciprocal_start_step: int = 0  # steps of unweighted losses before the links switch on
    loc_target: str = "iou"  # "iou" (dynamic) or "centerness" (fixed geometric prior)

    def __post_init__(self):
        if self.loc_target not in ("iou", "centerness"):
            raise ValueError(f"loc_target must be 'iou' or 'centerness', got {self.loc_target!r}")


@dataclass
class LossBundle:
    l_cls: Tensor
    l_reg: Tensor
    l_loc: Tensor
    total: Tensor
    lambda1: float = 1.0
    lambda2: float = 1.0
    n_clamped: int = 0

    def values(self) -> dict[str, float]:
        return {
            "l_cls": self.l_cls.item(),
            "l_reg": self.l_reg.item(),
            "l_loc": self.l_loc.item(),
            "total": self.total.item(),
        }


@dataclass
class TargetBatch:
    """Per-batch labels for a stack of ``N`` pairs on one ``H x W`` grid.

    ``gt`` holds one corner box per pair; rows of negative pairs are NaN.
    """

    cls_label: np.ndarray  # (N, H, W)
    pos_mask: np.ndarray  # (N, H, W) bool
    gt: np.ndarray  # (N, 4)
    loc_x: np.ndarray  # (H, W)
    loc_y: np.ndarray  # (H, W)

    @property
    def n_pos(self) -> int:
        return int(self.pos_mask.sum())

    @property
    def normalizer(self) -> float:
        return float(max(self.n_pos, 1))

    @classmethod
    def from_label_maps(cls, maps, gts, loc_x, loc_y) -> "TargetBatch":
        gt = np.array([g.as_array() if g is not None else [np.nan] * 4 for g in gts], dtype=np.float64)
        return cls(
            cls_label=np.stack([m.cls_label for m in maps]).astype(np.float64),
            pos_mask=np.stack([m.pos_mask for m in maps]),
            gt=gt.reshape(len(maps), 4),
            loc_x=loc_x,
            loc_y=loc_y,
        )

    def positive_index(self):
        return np.nonzero(self.pos_mask)

    def positive_gt(self) -> np.ndarray:
        n_idx = self.positive_index()[0]
        return self.gt[n_idx]

    def positive_locations(self) -> tuple[np.ndarray, np.ndarray]:
        _, yi, xi = self.positive_index()
        return self.loc_x[yi, xi], self.loc_y[yi, xi]


def focal(p: float, y: int, alpha: float = 0.25, gamma: float = 2.0) -> float:
    p = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    if y == 1:
        return -alpha * (1.0 - p) ** gamma * math.log(p)
    return -(1.0 - alpha) * p**gamma * math.log(1.0 - p)


def focal_map(p: Tensor, y: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise focal loss of probabilities ``p`` against 0/1 labels ``y``."""
    y = np.asarray(y, dtype=np.float64)
    pc = ops.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    qc = ops.sub(1.0, pc)
    pos = ops.mul(ops.mul(ops.pow(qc, gamma), ops.log(pc)), -alpha)
    neg = ops.mul(ops.mul(ops.pow(pc, gamma), ops.log(qc)), -(1.0 - alpha))
    return ops.add(ops.mul(pos, Tensor(y)), ops.mul(neg, Tensor(1.0 - y)))


def bce_map(p: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    pc = ops.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    a = ops.mul(ops.log(pc), Tensor(target))
    b = ops.mul(ops.log(ops.sub(1.0, pc)), Tensor(1.0 - target))
    return ops.neg(ops.add(a, b))


def bce(p: float, target: float) -> float:
    p = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    return -(target * math.log(p) + (1.0 - target) * math.log(1.0 - p))


def _gather_t(t_reg: Tensor, targets: TargetBatch) -> Tensor:
    n_idx, yi, xi = targets.positive_index()
    # advanced indices separated by a slice put the indexed axis first: (P, 4)
    rows = ops.index(t_reg, (n_idx, slice(None), yi, xi))
    return _transpose_rows(rows)


def _transpose_rows(rows: Tensor) -> Tensor:
    return ops.stack([rows[:, k] for k in range(4)], axis=0)


def detached_iou(t_reg: Tensor, targets: TargetBatch) -> np.ndarray:
    """IoU of the decoded prediction with its ground truth at every positive cell, shape ``(P,)``."""
    n_idx, yi, xi = targets.positive_index()
    t = t_reg.data[n_idx, :, yi, xi].T
    lx, ly = targets.positive_locations()
    boxes = decode_array(t, lx, ly)
    return iou_array(boxes, targets.positive_gt())


def centerness_target(targets: TargetBatch) -> np.ndarray:
    """Centerness of every positive cell with respect to its ground truth, shape ``(P,)``."""
    lx, ly = targets.positive_locations()
    return centerness_array(encode_array(targets.positive_gt(), lx, ly))


def loss_cls(
    p_cls: Tensor,
    targets: TargetBatch,
    iou_weight: Optional[np.ndarray] = None,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> Tensor:
    """Focal loss summed over all cells and divided by the positive count.

    ``iou_weight`` (shape ``(P,)``, detached) scales the positive cells; the
    negatives keep weight 1.  Without it the loss is the plain focal loss.
    """
    fl = focal_map(p_cls, targets.cls_label, alpha, gamma)
    if iou_weight is not None:
        w = np.ones(p_cls.shape, dtype=np.float64)
        w[targets.positive_index()] = iou_weight
        fl = ops.mul(fl, Tensor(w))
    return ops.div(ops.reduce_sum(fl), targets.normalizer)


def loss_reg(
    t_reg: Tensor,
    targets: TargetBatch,
    cls_weight: Optional[np.ndarray] = None,
) -> tuple[Tensor, int]:
    """``-ln IoU`` at positive cells, optionally weighted by detached ``p_cls``.

    Returns the loss and the number of positives whose IoU had to be clamped
    away from zero before the log.
    """
    if targets.n_pos == 0:
        return ops.mul(ops.reduce_sum(t_reg), 0.0), 0
    t = _gather_t(t_reg, targets)
    lx, ly = targets.positive_locations()
    iou = iou_diff(t, targets.positive_gt(), lx, ly)
    clamped = int(np.sum(iou.data < PROB_EPS))
    if clamped:
        log.debug("IoU below %.0e at %d positive cell(s); clamped before log", PROB_EPS, clamped)
    nll = ops.neg(ops.log(ops.maximum(iou, PROB_EPS)))
    if cls_weight is not None:
        nll = ops.mul(nll, Tensor(cls_weight))
    return ops.div(ops.reduce_sum(nll), targets.normalizer), clamped


def loss_loc(p_loc: Tensor, targets: TargetBatch, iou_target: np.ndarray) -> Tensor:
    """BCE between ``p_loc`` and the detached IoU at positive cells."""
    if targets.n_pos == 0:
        return ops.mul(ops.reduce_sum(p_loc), 0.0)
    p = ops.index(p_loc, targets.positive_index())
    return ops.div(ops.reduce_sum(bce_map(p, iou_target)), targets.normalizer)


def total_loss(l_cls: Tensor, l_reg: Tensor, l_loc: Tensor, lambda1: float = 1.0, lambda2: float = 1.0) -> LossBundle:
    total = ops.add(ops.add(l_cls, ops.mul(l_reg, lambda1)), ops.mul(l_loc, lambda2))
    return LossBundle(l_cls, l_reg, l_loc, total, lambda1, lambda2)


@dataclass
class DetachedTerms:
    """Stop-gradient quantities of one head output at its positive cells."""

    iou: np.ndarray  # IoU of the decoded box with its ground truth, (P,)
    p_cls: np.ndarray  # classification probability, (P,)


def detached_terms(output, targets: TargetBatch) -> DetachedTerms:
    iou_t = detached_iou(output.t_reg, targets) if targets.n_pos else np.zeros(0)
    return DetachedTerms(iou=iou_t, p_cls=np.array(output.p_cls.data[targets.positive_index()], dtype=np.float64))


def head_loss(
    output,
    targets: TargetBatch,
    cfg: Optional[LossConfig] = None,
    step: int = 0,
    detached: Optional[DetachedTerms] = None,
) -> LossBundle:
    """Combined loss of a head output against a target batch.

    ``cfg.reciprocal`` toggles both weighting links; ``cfg.localization``
    toggles the localization term (it is replaced by a zero tensor).
    ``detached`` pins the stop-gradient weights to given values instead of
    reading them off ``output`` -- finite-difference checks need this so that
    perturbed evaluations keep the weights of the base point.
    """
    cfg = cfg or LossConfig()
    linked = cfg.reciprocal and step >= cfg.reciprocal_start_step
    d = detached if detached is not None else detached_terms(output, targets)
    l_cls = loss_cls(output.p_cls, targets, d.iou if linked else None, cfg.alpha, cfg.gamma)
    l_reg, clamped = loss_reg(output.t_reg, targets, d.p_cls if linked else None)
    if cfg.localization:
        loc_t = centerness_target(targets) if cfg.loc_target == "centerness" else d.iou
        l_loc = loss_loc(output.p_loc, targets, loc_t)
    else:
        l_loc = Tensor(0.0)
    bundle = total_loss(l_cls, l_reg, l_loc, cfg.lambda1, cfg.lambda2)
    bundle.n_clamped = clamped
    return bundle
