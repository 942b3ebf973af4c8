"""BCE and smoothed Dice supervision."""
from __future__ import annotations

import numpy as np

from bussam import ops
from bussam.autodiff import Tensor
from bussam.errors import ConfigError, UsageError

CLAMP_EPS = 1e-7


def _check(p: Tensor, g) -> Tensor:
    g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=p.dtype))
    if p.shape != g.shape:
        raise UsageError(f"prediction shape {p.shape} differs from mask shape {g.shape}")
    if not np.all((g.data == 0) | (g.data == 1)):
        raise UsageError("ground-truth mask must contain only 0 and 1")
    return g


def bce_loss(p: Tensor, g, reduction: str = "mean") -> Tensor:
    """Binary cross entropy summed over pixels, or averaged with ``mean``."""
    g = _check(p, g)
    pc = ops.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    terms = g * ops.log(pc) + (1.0 - g) * ops.log(1.0 - pc)
    if reduction == "sum":
        return -ops.sum(terms)
    if reduction == "mean":
        return -ops.mean(terms)
    raise UsageError(f"unknown reduction {reduction!r}")


def dice_loss(p: Tensor, g) -> Tensor:
    """``1 - (2TP + 1) / (2TP + FN + FP + 1)`` with soft counts.

    For a batch (rank 4 input) the loss is computed per image and averaged.
    """
    g = _check(p, g)
    axes = tuple(range(1, p.ndim)) if p.ndim == 4 else None
    tp = ops.sum(p * g, axis=axes)
    fp = ops.sum(p * (1.0 - g), axis=axes)
    fn = ops.sum((1.0 - p) * g, axis=axes)
    per = 1.0 - (2.0 * tp + 1.0) / (2.0 * tp + fn + fp + 1.0)
    return ops.mean(per) if axes is not None else per


def total_loss(p: Tensor, g, beta: float = 0.2) -> Tensor:
    """``beta * BCE(mean) + (1 - beta) * Dice``."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    return bce_loss(p, g) * beta + dice_loss(p, g) * (1.0 - beta)
