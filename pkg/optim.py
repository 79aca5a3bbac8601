"""Optimizers, weight-decay exclusion, learning-rate schedule and weight EMA."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from errors import ConfigurationError, InputError
from vit_models import Model

logger = logging.getLogger(__name__)

REFERENCE_MINIBATCH = 2048
OPTIMIZERS = ("sgd", "adamw", "adam")

State = dict[int, dict[str, np.ndarray]]


@dataclass(frozen=True)
class OptimConfig:
    """Optimizer and schedule settings; ``lr`` is normalized to a minibatch of 2048."""

    optimizer: str = "adamw"
    lr: float = 1e-3
    wd: float = 0.05
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: float = 5.0
    total_epochs: float = 100.0
    minibatch_size: int = REFERENCE_MINIBATCH
    ema_decay: float = 0.9998
    eval_ema: bool = True

    @property
    def base_lr(self) -> float:
        """Learning rate after linear scaling to the actual minibatch size."""
        return self.lr * self.minibatch_size / REFERENCE_MINIBATCH

    def validate(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            msg = f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}"
            raise ConfigurationError(msg)
        if not (math.isfinite(self.lr) and self.lr > 0):
            msg = f"lr must be positive and finite, got {self.lr}"
            raise ConfigurationError(msg)
        if not (math.isfinite(self.wd) and self.wd >= 0):
            msg = f"wd must be non-negative and finite, got {self.wd}"
            raise ConfigurationError(msg)
        if not 0 <= self.warmup_epochs < self.total_epochs:
            msg = f"warmup_epochs {self.warmup_epochs} must be in [0, total_epochs {self.total_epochs})"
            raise ConfigurationError(msg)
        if self.minibatch_size <= 0:
            msg = "minibatch_size must be positive"
            raise ConfigurationError(msg)
        if not 0 <= self.ema_decay < 1:
            msg = f"ema_decay must be in [0, 1), got {self.ema_decay}"
            raise ConfigurationError(msg)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> OptimConfig:
        config = cls(**data)
        config.validate()
        return config


def decay_mask(model: Model) -> dict[str, bool]:
    """True for parameters that receive weight decay: weights only, never norm gains or biases."""
    return {name: model.param_classes[name] == "weight" for name in model.params}


def lr_at(cfg: OptimConfig, t: float) -> float:
    """
    Learning rate after ``t`` (fractional) epochs.

    Linear warm-up from 0 to the base rate over ``warmup_epochs``, then a single
    half-period cosine decay reaching 0 at ``total_epochs``.
    """
    total, warmup = cfg.total_epochs, cfg.warmup_epochs
    if not 0 <= t <= total:
        msg = f"t={t} outside the schedule [0, {total}]"
        raise InputError(msg)
    base = cfg.base_lr
    if t < warmup:
        return base * t / warmup
    return base * 0.5 * (1.0 + math.cos(math.pi * (t - warmup) / (total - warmup)))


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: State,
    lr_t: float,
    wd: float,
    momentum: float,
    mask: Sequence[bool],
) -> None:
    """SGD with momentum; weight decay is added to the gradient of masked-in parameters."""
    for i, (theta, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        if mask[i] and wd:
            grad = grad + wd * theta
        slot = state.setdefault(i, {"velocity": np.zeros_like(theta)})
        slot["velocity"] = momentum * slot["velocity"] + grad
        theta -= lr_t * slot["velocity"]


def _adam_moments(
    theta: np.ndarray,
    grad: np.ndarray,
    slot: dict[str, np.ndarray],
    step_index: int,
    beta1: float,
    beta2: float,
    eps: float,
) -> np.ndarray:
    slot["m"] = beta1 * slot["m"] + (1 - beta1) * grad
    slot["v"] = beta2 * slot["v"] + (1 - beta2) * grad * grad
    m_hat = slot["m"] / (1 - beta1**step_index)
    v_hat = slot["v"] / (1 - beta2**step_index)
    return (m_hat / (np.sqrt(v_hat) + eps)).astype(theta.dtype, copy=False)


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: State,
    step_index: int,
    lr_t: float,
    wd: float,
    beta1: float,
    beta2: float,
    eps: float,
    mask: Sequence[bool],
) -> None:
    """Adam with decoupled weight decay; ``step_index`` starts at 1."""
    if step_index < 1:
        msg = "step_index starts at 1"
        raise InputError(msg)
    for i, (theta, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        slot = state.setdefault(i, {"m": np.zeros_like(theta), "v": np.zeros_like(theta)})
        direction = _adam_moments(theta, grad, slot, step_index, beta1, beta2, eps)
        decay = wd if mask[i] else 0.0
        theta -= lr_t * (direction + decay * theta)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: State,
    step_index: int,
    lr_t: float,
    wd: float,
    beta1: float,
    beta2: float,
    eps: float,
    mask: Sequence[bool],
) -> None:
    """Adam with L2 decay folded into the gradient."""
    if step_index < 1:
        msg = "step_index starts at 1"
        raise InputError(msg)
    for i, (theta, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        if mask[i] and wd:
            grad = grad + wd * theta
        slot = state.setdefault(i, {"m": np.zeros_like(theta), "v": np.zeros_like(theta)})
        theta -= lr_t * _adam_moments(theta, grad, slot, step_index, beta1, beta2, eps)


def ema_update(ema_params: Sequence[np.ndarray], params: Sequence[np.ndarray], decay: float) -> None:
    """In place, e <- decay * e + (1 - decay) * theta."""
    for ema, theta in zip(ema_params, params):
        ema *= decay
        ema += (1 - decay) * theta


class ModelOptimizer:
    """Applies one of the step rules to every parameter of a model."""

    def __init__(self, model: Model, cfg: OptimConfig) -> None:
        """
        Initialize the optimizer.

        Args:
            model: Model whose parameters are updated in place.
            cfg: Optimizer configuration.

        """
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.names = list(model.params)
        mask = decay_mask(model)
        self.mask = [mask[name] for name in self.names]
        self.state: State = {}
        self.step_index = 0

    def zero_grad(self) -> None:
        self.model.zero_grad()

    def step(self, lr_t: float) -> None:
        """Apply one update at learning rate ``lr_t``."""
        self.step_index += 1
        params = [self.model.params[name].data for name in self.names]
        grads = [self.model.params[name].grad for name in self.names]
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            sgd_step(params, grads, self.state, lr_t, cfg.wd, cfg.momentum, self.mask)
        else:
            rule = adamw_step if cfg.optimizer == "adamw" else adam_step
            rule(
                params,
                grads,
                self.state,
                self.step_index,
                lr_t,
                cfg.wd,
                cfg.beta1,
                cfg.beta2,
                cfg.eps,
                self.mask,
            )


class ModelEMA:
    """Exponential moving average of a model's parameters and batch-norm statistics."""

    def __init__(self, model: Model, decay: float) -> None:
        self.decay = decay
        self.model = model.clone()

    def update(self, model: Model) -> None:
        names = list(model.params)
        ema_update(
            [self.model.params[n].data for n in names],
            [model.params[n].data for n in names],
            self.decay,
        )
        for name, stats in model.running_stats.items():
            ema_stats = self.model.running_stats[name]
            ema_update([ema_stats.mean, ema_stats.var], [stats.mean, stats.var], self.decay)
