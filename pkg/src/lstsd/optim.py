"""Nesterov SGD with coupled weight decay, and epoch-level learning-rate schedules."""
from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ValidationError
from .models import ModelParams

SCHEDULES = ("constant", "step_decay", "cyclic_cosine")


@dataclass(frozen=True)
class LrSchedule:
    variant: str = "step_decay"
    base_lr: float = 0.1
    milestones: tuple[float, ...] = (0.25, 0.5, 0.75)
    factor: float = 0.1
    cycle_epochs: int = 6
    floor_lr: float = 0.0

    def __post_init__(self):
        if self.variant not in SCHEDULES:
            raise ParameterError(f"unknown schedule {self.variant!r}; expected one of {SCHEDULES}")
        if not self.base_lr > 0:
            raise ParameterError(f"base_lr must be positive, got {self.base_lr}")
        ms = tuple(float(m) for m in self.milestones)
        if any(not 0 < m < 1 for m in ms) or any(a >= b for a, b in zip(ms, ms[1:])):
            raise ParameterError(f"milestones must be strictly increasing in (0, 1), got {ms}")
        object.__setattr__(self, "milestones", ms)
        if self.cycle_epochs < 1:
            raise ParameterError(f"cycle_epochs must be >= 1, got {self.cycle_epochs}")
        if not 0 <= self.floor_lr <= self.base_lr:
            raise ParameterError(f"floor_lr must lie in [0, base_lr], got {self.floor_lr}")


def lr_at(schedule: LrSchedule, epoch: int, total_epochs: int) -> float:
    """Learning rate for 0-based ``epoch`` of a ``total_epochs`` run."""
    if not 0 <= epoch < total_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {total_epochs})")
    if schedule.variant == "constant":
        return schedule.base_lr
    if schedule.variant == "step_decay":
        k = sum(1 for frac in schedule.milestones if epoch >= math.floor(frac * total_epochs))
        return schedule.base_lr * schedule.factor**k
    e_in = epoch % schedule.cycle_epochs
    span = schedule.base_lr - schedule.floor_lr
    return schedule.floor_lr + 0.5 * span * (1.0 + math.cos(math.pi * e_in / schedule.cycle_epochs))


@dataclass
class SgdState:
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ModelParams, momentum: float = 0.9, weight_decay: float = 1e-4) -> "SgdState":
        return cls(momentum, weight_decay, {name: np.zeros_like(t.data) for name, t in params.items()})


def sgd_nesterov_step(
    params: ModelParams, grads: Mapping[str, np.ndarray], state: SgdState, lr: float
) -> tuple[ModelParams, SgdState]:
    """One Nesterov step in look-ahead form.

    g' = g + wd*theta;  v <- mu*v - lr*g';  theta <- theta + mu*v - lr*g'.
    """
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    mu, wd = state.momentum, state.weight_decay
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        if name not in grads or grads[name] is None:
            raise ValidationError(f"missing gradient for parameter {name!r}")
        theta = p.data
        g = grads[name] + wd * theta if wd else grads[name]
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        step = lr * g
        if mu:
            v = mu * v - step
            new_params[name] = theta + mu * v - step
        else:
            v = -step
            new_params[name] = theta - step
        new_velocity[name] = v
    return ModelParams(new_params), SgdState(mu, wd, new_velocity)
