"""Single-stage training: ADAM, rotation augmentation, early stopping."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .data import Sample, rotate, stack
from .losses import DiceConfig, dice_loss_value, smooth_dice_loss
from .metrics import Summary, summarize
from .unet import UNet

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite training loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


class MissingGradError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-6

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")


@dataclass(frozen=True)
class AugmentConfig:
    rotation_probability: float = 0.75
    rotation_range: tuple[float, float] = (-10.0, 10.0)

    def __post_init__(self):
        lo, hi = self.rotation_range
        if not 0 <= self.rotation_probability <= 1:
            raise ValueError("rotation_probability must lie in [0, 1]")
        if lo > hi or lo != -hi:
            raise ValueError(f"rotation_range must be symmetric with low <= high: {self.rotation_range}")


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    early_stop_patience: int = 20
    batch_size: int = 8
    augment: AugmentConfig = AugmentConfig()
    dice: DiceConfig = DiceConfig()
    seed: int = 0

    def __post_init__(self):
        if self.early_stop_patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("max_epochs, early_stop_patience and batch_size must be >= 1")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    train_ms: float
    val_ms: float


@dataclass
class TrainResult:
    model: UNet
    logs: list[EpochLog]
    best_epoch: int
    best_val_loss: float


# --------------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict, cfg: OptimizerConfig = OptimizerConfig()):
        self.params = params
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.state = {name: (np.zeros_like(p.data), np.zeros_like(p.data), 0) for name, p in params.items()}

    def step(self) -> None:
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradError(f"parameter {name!r} has no gradient")
        for name, p in self.params.items():
            m, v, t = self.state[name]
            g = p.grad
            t += 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + eps)
            self.state[name] = (m, v, t)


def augment(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    """Rotate image (bilinear) and mask (nearest) by one shared angle with probability p.

    Returns ``(sample, angle)``; ``angle`` is None when no rotation was applied.
    """
    apply = rng.random() < cfg.rotation_probability
    angle = float(rng.uniform(*cfg.rotation_range))
    if not apply:
        return sample, None
    if sample.image.ndim == 3:
        image = np.stack([rotate(ch, angle) for ch in sample.image])
    else:
        image = rotate(sample.image, angle)
    mask = rotate(sample.mask, angle, nearest=True)
    return replace(sample, image=image, mask=mask), angle


def eval_loss(model: UNet, samples: list[Sample], dice: DiceConfig, batch_size: int = 8) -> float:
    """Mean per-image loss in eval mode."""
    images, masks = stack(samples)
    pred = model.predict(images, batch_size)
    return math.fsum(dice_loss_value(p, t, dice) for p, t in zip(pred, masks)) / len(samples)


def train(
    model: UNet,
    train_set: list[Sample],
    val_set: list[Sample],
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    cfg: TrainConfig = TrainConfig(),
    validate: Callable[[UNet], float] | None = None,
    on_epoch_end: Callable[[EpochLog, UNet], None] | None = None,
) -> TrainResult:
    """Train until early stopping; the returned model holds the best-validation weights."""
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    if validate is None:
        validate = lambda m: eval_loss(m, val_set, cfg.dice, cfg.batch_size)  # noqa: E731

    opt = Adam(model.parameters(), opt_cfg)
    logs: list[EpochLog] = []
    best_loss = math.inf
    best_state = model.state_dict()
    best_epoch = 0
    since_best = 0
    plateau = 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(len(train_set))
        batch_losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = [
                augment(train_set[i], np.random.default_rng([cfg.seed, epoch, 1, int(i)]), cfg.augment)[0]
                for i in idx
            ]
            images, masks = stack(batch)
            model.zero_grad()
            loss = smooth_dice_loss(model.forward(images, train=True), masks, cfg.dice)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, b + 1, value)
            loss.backward()
            opt.step()
            batch_losses.append((value, len(idx)))
        train_loss = math.fsum(v * n for v, n in batch_losses) / len(order)
        t1 = time.perf_counter()
        val_loss = float(validate(model))
        t2 = time.perf_counter()
        if not math.isfinite(val_loss):
            raise NonFiniteLossError(epoch, 0, val_loss)

        entry = EpochLog(epoch, train_loss, val_loss, opt.lr, (t1 - t0) * 1e3, (t2 - t1) * 1e3)
        logs.append(entry)

        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = model.state_dict()
            since_best = plateau = 0
        else:
            since_best += 1
            plateau += 1
            if plateau >= opt_cfg.plateau_patience:
                opt.lr = max(opt.lr * opt_cfg.plateau_factor, opt_cfg.min_lr)
                plateau = 0
        log.debug("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, val_loss, entry.lr)
        if on_epoch_end is not None:
            on_epoch_end(entry, model)
        if since_best >= cfg.early_stop_patience:
            break

    model.load_state_dict(best_state)
    return TrainResult(model, logs, best_epoch, best_loss)


# --------------------------------------------------------------------------
# epoch logs and timing

LOG_FIELDS = ("epoch", "train_loss", "val_loss", "lr", "train_ms", "val_ms")


def logs_csv(logs: list[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for e in logs:
        w.writerow([e.epoch] + [repr(float(getattr(e, f))) for f in LOG_FIELDS[1:]])
    return buf.getvalue()


def read_logs_csv(path) -> list[EpochLog]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EpochLog(int(r["epoch"]), *(float(r[f]) for f in LOG_FIELDS[1:]))
        for r in rows
    ]


def bench(logs: list[EpochLog]) -> dict[str, Summary]:
    """Mean and sample std of per-epoch train and validation time, pooled over all logs."""
    if not logs:
        raise ValueError("bench: no epoch logs")
    return {
        "train_ms": summarize(e.train_ms for e in logs),
        "val_ms": summarize(e.val_ms for e in logs),
    }
