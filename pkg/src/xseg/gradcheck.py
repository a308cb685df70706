"""Finite-difference verification of the analytic backward rules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import zlib

import numpy as np

from . import tensor as T
from .losses import DiceConfig, smooth_dice_loss

STEP = 1e-5


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    tolerance: float
    passed: bool = False

    def __post_init__(self):
        self.passed = bool(self.max_rel_error <= self.tolerance)


def _loss_weights(shape, rng) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape)


def grad_check(
    fn: Callable[..., T.Tensor],
    inputs: list[np.ndarray],
    tolerance: float,
    name: str = "op",
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``sum(w * fn(*inputs))`` with central differences.

    ``w`` is a fixed random projection so every output element contributes.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    rng = np.random.default_rng(seed)
    leaves = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    out = fn(*leaves)
    weights = _loss_weights(out.shape, rng)
    out.backward(weights)

    def objective() -> float:
        with T.no_grad():
            return float((fn(*leaves).data * weights).sum())

    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + STEP
            up = objective()
            flat[i] = orig - STEP
            down = objective()
            flat[i] = orig
            numeric = (up - down) / (2 * STEP)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, float(abs(a - numeric) / denom))
    return GradCheckReport(name, worst, tolerance)


def corrupted(fn: Callable[..., T.Tensor], scale: float = 1.5) -> Callable[..., T.Tensor]:
    """Wrap ``fn`` so its backward rule is wrong by ``scale`` (negative control)."""

    def wrapped(*args):
        out = fn(*args)
        if out._backward is not None:
            inner = out._backward
            out._backward = lambda g: tuple(
                None if r is None else r * scale for r in inner(g)
            )
        return out

    return wrapped


# --------------------------------------------------------------------------
# registry of seeded cases used by the CLI and the acceptance suite


def _away_from(x: np.ndarray, lo: float) -> np.ndarray:
    # push values out of (-lo, lo) so kinks are never straddled
    return np.where(np.abs(x) < lo, np.copysign(lo + np.abs(x), x), x)


def _no_ties(rng, shape) -> np.ndarray:
    # a random permutation scaled into [-1, 1] keeps every 2x2 block tie-free
    # with gaps far larger than the probe step
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) / max(n - 1, 1)) * 2 - 1


def _bn_train(x, g, b):
    return T.batchnorm2d(x, g, b, T.BatchNormState.fresh(x.shape[1]), train=True)


def _bn_eval(x, g, b):
    state = T.BatchNormState(np.linspace(-0.2, 0.2, x.shape[1]), np.linspace(0.5, 1.5, x.shape[1]))
    return T.batchnorm2d(x, g, b, state, train=False)


def _dice(form: str):
    cfg = DiceConfig(lam=1.0, form=form)

    def make(rng):
        pred = rng.uniform(0.05, 0.95, size=(2, 1, 4, 4))
        target = (rng.uniform(size=pred.shape) > 0.5).astype(float)
        return [pred], lambda p: smooth_dice_loss(p, target, cfg)

    return make


def _cases() -> dict[str, Callable]:
    def u(rng, *shape):
        return rng.uniform(-1.0, 1.0, size=shape)

    return {
        "conv2d": lambda r: ([u(r, 1, 2, 6, 6), u(r, 3, 2, 3, 3), u(r, 3)], T.conv2d),
        "conv2d_1x1": lambda r: ([u(r, 2, 3, 4, 4), u(r, 2, 3, 1, 1), u(r, 2)], T.conv2d),
        "conv_transpose2d": lambda r: (
            [u(r, 2, 3, 3, 3), u(r, 3, 2, 2, 2), u(r, 2)],
            T.conv_transpose2d,
        ),
        "maxpool2d": lambda r: ([_no_ties(r, (2, 2, 4, 4))], T.maxpool2d),
        "batchnorm2d": lambda r: ([u(r, 2, 3, 3, 3), u(r, 3), u(r, 3)], _bn_train),
        "batchnorm2d_eval": lambda r: ([u(r, 2, 3, 3, 3), u(r, 3), u(r, 3)], _bn_eval),
        "relu": lambda r: ([_away_from(u(r, 2, 3, 4, 4), 1e-3)], T.relu),
        "sigmoid": lambda r: ([u(r, 2, 3, 4, 4)], T.sigmoid),
        "concat": lambda r: ([u(r, 2, 2, 3, 3), u(r, 2, 3, 3, 3)], T.concat_channels),
        "dice_paper": lambda r: _dice("paper-eq1")(r),
        "dice_standard": lambda r: _dice("standard")(r),
    }


OPS = tuple(_cases())


def run_suite(
    ops=None, seed: int = 0, trials: int = 10, tolerance: float = 1e-4, inject_bug: bool = False
) -> list[GradCheckReport]:
    """One report per op; each report holds the worst error over ``trials`` seeded draws."""
    cases = _cases()
    names = list(cases) if not ops else list(ops)
    unknown = [n for n in names if n not in cases]
    if unknown:
        raise KeyError(f"unknown op(s): {', '.join(unknown)}; choose from {', '.join(cases)}")
    reports = []
    for name in names:
        worst = 0.0
        for trial in range(trials):
            rng = np.random.default_rng([seed, trial, zlib.crc32(name.encode())])
            inputs, fn = cases[name](rng)
            if inject_bug:
                fn = corrupted(fn)
            rep = grad_check(fn, inputs, tolerance, name, seed=seed * 1000 + trial)
            worst = max(worst, rep.max_rel_error)
        reports.append(GradCheckReport(name, worst, tolerance))
    return reports
