"""Training losses over the pixelwise grasp parameter maps.

Both losses sum per-map mean-squared errors. The positional variant scales
the angle and width residuals by the ground-truth grasp quality before
squaring, so pixels where no grasp exists contribute nothing to those terms
(and receive exactly zero gradient through them).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor


@dataclass
class LossBreakdown:
    """Per-term values plus the differentiable total.

    ``total`` is always the exact float sum of the present terms, in the
    fixed order q, cos, sin, w, aux. ``node`` is the scalar graph node to
    call ``backward()`` on.
    """

    q_term: float
    cos_term: float
    sin_term: float
    w_term: float
    aux_term: float | None
    total: float
    node: Tensor

    def terms(self):
        out = {"q": self.q_term, "cos": self.cos_term, "sin": self.sin_term, "w": self.w_term}
        if self.aux_term is not None:
            out["aux"] = self.aux_term
        return out


def _as_target(arr, pred: Tensor, name: str) -> Tensor:
    a = np.asarray(arr, dtype=pred.dtype)
    if a.ndim == 2:
        a = a.reshape(1, 1, *a.shape)
    if a.shape != pred.shape:
        raise ContractViolation(
            f"{name}: prediction shape {tuple(pred.shape)} does not match "
            f"ground truth shape {tuple(a.shape)}"
        )
    return Tensor(a)


def _pixels(pred: Tensor) -> float:
    # N is the pixel count of one map; batches are averaged over samples.
    n, _, h, w = pred.shape
    return float(h * w * n)


def _check_aux(pred_a, gt_a):
    if (pred_a is None) != (gt_a is None):
        raise ContractViolation(
            "auxiliary maps must be both present or both absent "
            f"(prediction: {pred_a is not None}, ground truth: {gt_a is not None})"
        )


def _mse(pred: Tensor, gt: Tensor, scale: float) -> Tensor:
    d = pred - gt
    return (d * d).sum() * scale


def _scaled_mse(weight: Tensor, pred: Tensor, gt: Tensor, scale: float) -> Tensor:
    d = weight * (pred - gt)
    return (d * d).sum() * scale


def _finish(nodes) -> LossBreakdown:
    total_node = nodes[0]
    for term in nodes[1:]:
        total_node = total_node + term
    values = [t.item() for t in nodes]
    total = 0.0
    for v in values:
        total += v
    aux = values[4] if len(values) == 5 else None
    return LossBreakdown(values[0], values[1], values[2], values[3], aux, total, total_node)


def standard_loss(pred, gt) -> LossBreakdown:
    """Summed MSE over the four grasp maps, plus the auxiliary map when present."""
    _check_aux(pred.a, getattr(gt, "a", None))
    scale = 1.0 / _pixels(pred.q)
    nodes = [
        _mse(pred.q, _as_target(gt.q, pred.q, "q"), scale),
        _mse(pred.cos, _as_target(gt.cos, pred.cos, "cos"), scale),
        _mse(pred.sin, _as_target(gt.sin, pred.sin, "sin"), scale),
        _mse(pred.w, _as_target(gt.w, pred.w, "w"), scale),
    ]
    if pred.a is not None:
        nodes.append(_mse(pred.a, _as_target(gt.a, pred.a, "aux"), scale))
    return _finish(nodes)


def positional_loss(pred, gt) -> LossBreakdown:
    """Like standard_loss, but angle/width residuals are multiplied by the
    ground-truth quality map before squaring; requires Q_GT in [0, 1]."""
    _check_aux(pred.a, getattr(gt, "a", None))
    q_gt = _as_target(gt.q, pred.q, "q")
    if q_gt.data.min() < 0.0 or q_gt.data.max() > 1.0:
        raise ContractViolation(
            f"positional loss requires Q_GT in [0, 1], got range "
            f"[{q_gt.data.min():g}, {q_gt.data.max():g}]"
        )
    scale = 1.0 / _pixels(pred.q)
    nodes = [
        _mse(pred.q, q_gt, scale),
        _scaled_mse(q_gt, pred.cos, _as_target(gt.cos, pred.cos, "cos"), scale),
        _scaled_mse(q_gt, pred.sin, _as_target(gt.sin, pred.sin, "sin"), scale),
        _scaled_mse(q_gt, pred.w, _as_target(gt.w, pred.w, "w"), scale),
    ]
    if pred.a is not None:
        nodes.append(_mse(pred.a, _as_target(gt.a, pred.a, "aux"), scale))
    return _finish(nodes)


LOSS_FUNCTIONS = {"standard": standard_loss, "positional": positional_loss}
