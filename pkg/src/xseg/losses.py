"""Smooth Dice loss used for every training stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _result

FORMS = ("paper-eq1", "standard")


@dataclass(frozen=True)
class DiceConfig:
    """``paper-eq1``: 1 - 2(I + lam)/(S + lam).  ``standard``: 1 - (2I + lam)/(S + lam).

    I is sum(pred * target), S is sum(pred) + sum(target).
    """

    lam: float = 1.0
    form: str = "paper-eq1"

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"dice smoothing factor must be > 0, got {self.lam}")
        if self.form not in FORMS:
            raise ValueError(f"unknown dice form {self.form!r}; expected one of {FORMS}")


def dice_loss_value(pred: np.ndarray, target: np.ndarray, cfg: DiceConfig) -> float:
    inter = float((pred * target).sum())
    total = float(pred.sum() + target.sum())
    if cfg.form == "paper-eq1":
        return 1.0 - 2.0 * (inter + cfg.lam) / (total + cfg.lam)
    return 1.0 - (2.0 * inter + cfg.lam) / (total + cfg.lam)


def smooth_dice_loss(pred: Tensor, target, cfg: DiceConfig = DiceConfig()) -> Tensor:
    """Scalar Smooth Dice loss over every element of ``pred``; differentiable in ``pred``."""
    t = np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeError(f"smooth_dice_loss: pred {pred.shape} vs target {t.shape}")
    p = pred.data
    inter = float((p * t).sum())
    denom = float(p.sum() + t.sum()) + cfg.lam
    value = dice_loss_value(p, t, cfg)
    numer = 2.0 * (inter + cfg.lam) if cfg.form == "paper-eq1" else 2.0 * inter + cfg.lam

    def bw(g):
        # d/dp [-(numer / denom)] with d(denom)/dp == 1
        return (-float(g) * (2.0 * t * denom - numer) / (denom * denom),)

    return _result(np.array(value), "smooth_dice", (pred,), bw)
