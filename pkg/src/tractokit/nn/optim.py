"""Optimizer construction and learning-rate schedules.

Schedules are plain dataclasses evaluated with :func:`lr_at`; training loops write
the value into the optimizer's parameter groups before each step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from tractokit.errors import InvalidInputError


@dataclass(frozen=True)
class WarmRestartSchedule:
    """Cosine annealing with warm restarts; period ``t_0`` grows by ``t_mult`` per cycle."""

    base_lr: float = 1e-4
    t_0: int = 10
    t_mult: int = 2
    eta_min: float = 1e-7

    def __post_init__(self):
        if self.t_0 < 1 or self.t_mult < 1 or self.base_lr <= 0 or self.eta_min <= 0:
            raise InvalidInputError("invalid warm-restart schedule parameters")


@dataclass(frozen=True)
class WarmupCosineSchedule:
    """Linear warmup followed by one (or more, decayed) cosine cycles, then ``lr_min``."""

    base_lr: float = 5e-4
    t_initial: int = 300
    warmup_t: int = 10
    lr_min: float = 1e-6
    warmup_lr_init: float = 1e-6
    decay_rate: float = 0.1
    cycle_limit: int = 1
    t_mul: float = 1.0

    def __post_init__(self):
        if self.t_initial < 1 or self.base_lr <= 0 or self.lr_min <= 0 or self.warmup_lr_init <= 0:
            raise InvalidInputError("invalid warmup-cosine schedule parameters")


def cycle_position(t: int, t_0: int, t_mult: float) -> tuple[int, float, float]:
    """(cycle index, position inside cycle, cycle length) for step ``t``."""
    if t_mult == 1:
        i = t // t_0
        return i, t - i * t_0, float(t_0)
    i = int(math.floor(math.log(1 - t / t_0 * (1 - t_mult), t_mult)))
    start = t_0 * (1 - t_mult**i) / (1 - t_mult)
    # guard against log rounding at exact cycle boundaries
    while start > t:
        i -= 1
        start = t_0 * (1 - t_mult**i) / (1 - t_mult)
    while t >= start + t_0 * t_mult**i:
        start += t_0 * t_mult**i
        i += 1
    return i, t - start, t_0 * t_mult**i


def lr_at(schedule, step: int) -> float:
    if step < 0:
        raise InvalidInputError(f"step must be >= 0, got {step}")
    if isinstance(schedule, WarmRestartSchedule):
        _, t_cur, t_i = cycle_position(step, schedule.t_0, schedule.t_mult)
        return schedule.eta_min + (schedule.base_lr - schedule.eta_min) * (1 + math.cos(math.pi * t_cur / t_i)) / 2
    if isinstance(schedule, WarmupCosineSchedule):
        s = schedule
        if step < s.warmup_t:
            return s.warmup_lr_init + step * (s.base_lr - s.warmup_lr_init) / s.warmup_t
        i, t_cur, t_i = cycle_position(step, s.t_initial, s.t_mul)
        if i >= s.cycle_limit:
            return s.lr_min
        lr_max = s.base_lr * s.decay_rate**i
        return s.lr_min + 0.5 * (lr_max - s.lr_min) * (1 + math.cos(math.pi * t_cur / t_i))
    raise InvalidInputError(f"unknown schedule {schedule!r}")


def make_optimizer(params, variant="adamw", lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
    params = [p for p in params if p.requires_grad]
    if variant == "adam":
        return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps, weight_decay=0.0)
    if variant == "adamw":
        return torch.optim.AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
    raise InvalidInputError(f"unknown optimizer variant {variant!r}")


def set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def optimizer_step(optimizer, params, grads) -> None:
    """Apply one update with externally computed gradients."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise InvalidInputError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.shape:
            raise InvalidInputError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        p.grad = None if g is None else g.detach().clone()
    optimizer.step()
