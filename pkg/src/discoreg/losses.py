"""Registration objective: segmentation, similarity, consistency and smoothness terms."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import NUM_LABELS, LabelMap, Volume, check_grids

DICE_EPS = 1e-5
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    seg: float = 0.1
    mse: float = 1.0
    dice: float = 0.1
    reg: float = 0.01

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not (val >= 0 and np.isfinite(val)):
                raise ValueError(f"loss weight {name} must be a finite non-negative number, got {val}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.seg, self.mse, self.dice, self.reg)


def mse_loss(warped: Volume, fixed: Volume) -> Tensor:
    check_grids(warped.grid, fixed.grid)
    return ad.mean(ad.square(warped.data - fixed.data))


def dice_loss(warped_onehot, fixed_onehot) -> Tensor:
    """1 - soft Dice, averaged over the three foreground channels."""
    a, b = ad.as_tensor(warped_onehot), ad.as_tensor(fixed_onehot)
    if a.shape != b.shape or a.shape[0] != NUM_LABELS:
        raise ValueError(f"dice_loss: expected matching (4, ...) maps, got {a.shape} and {b.shape}")
    axes = tuple(range(1, a.ndim))
    fa, fb = a[1:], b[1:]
    inter = ad.sum(fa * fb, axis=axes)
    sizes = ad.sum(fa, axis=axes) + ad.sum(fb, axis=axes)
    dice = (2.0 * inter + DICE_EPS) / (sizes + DICE_EPS)
    return 1.0 - ad.mean(dice)


def cross_entropy_seg(pred_probs, gt: LabelMap) -> Tensor:
    """Mean over voxels of -log p(true label); probabilities floored at 1e-12."""
    p = ad.as_tensor(pred_probs)
    if p.shape != (NUM_LABELS, *gt.grid.extents):
        raise ValueError(f"cross_entropy_seg: probabilities {p.shape} do not match labels {gt.grid.extents}")
    picked = ad.sum(p * Tensor(gt.one_hot()), axis=0)
    # floor without cutting the gradient where p is already above the floor
    floor = Tensor(np.where(picked.data < PROB_FLOOR, PROB_FLOOR - picked.data, 0.0))
    return -ad.mean(ad.log(picked + floor))


def total_loss(parts: dict, w: LossWeights = LossWeights()) -> Tensor:
    """lambda0*seg + lambda1*mse + lambda2*dice + lambda3*reg."""
    seg, mse, dice, reg = (ad.as_tensor(parts[k]) for k in ("seg", "mse", "dice", "reg"))
    for name, t in zip(("seg", "mse", "dice", "reg"), (seg, mse, dice, reg)):
        if t.size != 1:
            raise ValueError(f"total_loss: part {name!r} is not scalar")
    return w.seg * seg + w.mse * mse + w.dice * dice + w.reg * reg


def combine(parts: dict, w: LossWeights) -> float:
    """Float version of :func:`total_loss` for bookkeeping checks."""
    return w.seg * parts["seg"] + w.mse * parts["mse"] + w.dice * parts["dice"] + w.reg * parts["reg"]
