"""Training objective and scalar segmentation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import ndtensor as nt
from .ndtensor import DimensionError, Tensor

DICE_SMOOTH = 1.0


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given masks (e.g. Hausdorff of an empty mask)."""


@dataclass
class LossBreakdown:
    dice_loss: float
    grad_bulk: float
    grad_ft: float
    beta: float
    total: float


def dice_loss(pred: Tensor, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft Dice loss ``1 - (2 sum(p t) + s) / (sum p + sum t + s)``.

    Inputs may carry a leading batch axis; the result is then the batch mean.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != t.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {t.shape}")
    axes = tuple(range(pred.ndim - 2, pred.ndim))
    inter = nt.tsum(nt.mul(pred, t), axis=axes)
    denom = nt.add(nt.tsum(pred, axis=axes), t.sum(axis=axes) + smooth)
    ratio = nt.mul(nt.add(nt.scale(inter, 2.0), smooth), nt.reciprocal(denom))
    return nt.scale(nt.tsum(nt.neg(ratio) + 1.0), 1.0 / ratio.data.size)


def grad_loss(phi: Tensor, units: str = "voxel") -> Tensor:
    """Sum of squared forward differences of a displacement field.

    ``units="voxel"`` sums over the grid in voxel units.  ``units="normalized"``
    first rescales each channel to [-1, 1] image coordinates (factor
    2/extent) and averages over grid positions instead of summing.
    Batched fields give the batch mean.
    """
    if phi.shape[-2] < 2 or phi.shape[-1] < 2:
        raise DimensionError(f"gradient penalty needs a 2x2 grid or larger, got {phi.shape[-2:]}")
    H, W = phi.shape[-2:]
    d = phi
    if units == "normalized":
        d = nt.mul(phi, np.array([2.0 / H, 2.0 / W]).reshape(2, 1, 1))
    elif units != "voxel":
        raise ValueError(f"unknown units {units!r}")
    dr = d[..., 1:, :] - d[..., :-1, :]
    dc = d[..., :, 1:] - d[..., :, :-1]
    total = nt.add(nt.tsum(nt.square(dr)), nt.tsum(nt.square(dc)))
    n_batch = int(np.prod(phi.shape[:-3])) if phi.ndim > 3 else 1
    if units == "normalized":
        return nt.scale(total, 1.0 / (n_batch * H * W))
    return nt.scale(total, 1.0 / n_batch)


def total_loss(
    y_soft: Tensor,
    target,
    phi_bulk: Tensor | None,
    phi_ft: Tensor | None,
    beta: float = 10000.0,
    units: str = "voxel",
) -> tuple[Tensor, LossBreakdown]:
    """Dice loss plus ``beta`` times the gradient penalty of each field that is present."""
    loss = dice_loss(y_soft, target)
    dice_val = loss.item()
    parts = {}
    for key, phi in (("bulk", phi_bulk), ("ft", phi_ft)):
        if phi is None or beta == 0:
            parts[key] = 0.0 if phi is None else grad_loss(phi, units).item()
            continue
        g = grad_loss(phi, units)
        parts[key] = g.item()
        loss = nt.add(loss, nt.scale(g, beta))
    return loss, LossBreakdown(dice_val, parts["bulk"], parts["ft"], beta, loss.item())


def dice_metric(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes {a.shape} vs {b.shape}")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance (voxels) between the foreground pixel sets."""
    pa = np.argwhere(np.asarray(a, dtype=bool)).astype(np.float64)
    pb = np.argwhere(np.asarray(b, dtype=bool)).astype(np.float64)
    if len(pa) == 0 or len(pb) == 0:
        raise UndefinedMetricError("Hausdorff distance is undefined for an empty mask")
    return max(_kernels.directed_hausdorff(pa, pb), _kernels.directed_hausdorff(pb, pa))
