"""Adam with decoupled weight decay, learning-rate schedules and gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .nn import Params
from .tensor import NumericError


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Params, state: AdamState, lr: float, grads: dict[str, np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update in place.

    Weight decay shrinks each parameter by ``lr * weight_decay * param``
    outside the moment estimates. Parameters without a gradient are left
    untouched. Raises :class:`NumericError` naming the first parameter whose
    gradient is not finite.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name].data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p *= p.dtype.type(1.0 - lr * state.weight_decay)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def clip_grad_norm(params: Params, max_norm: float) -> float:
    """Scale all gradients so their global l2 norm is at most ``max_norm``; return the pre-clip norm."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.grad.dtype, copy=False)
    return total


SCHEDULE_KINDS = ("warmup_cosine", "warmup_exponential", "constant")


@dataclass
class Schedule:
    """Learning-rate schedule.

    ``warmup_cosine``: linear 0 -> peak over ``warmup_steps`` then a half cosine
    down to ``floor_lr`` at ``total_steps``.
    ``warmup_exponential``: linear warmup, constant peak until ``decay_start``,
    then geometric decay reaching ``floor_lr`` at ``total_steps``.
    ``constant``: linear warmup, then ``peak_lr``.
    """

    kind: str = "warmup_cosine"
    peak_lr: float = 1e-4
    warmup_steps: int = 50_000
    total_steps: int = 500_000
    floor_lr: float = 5e-5
    decay_start: int | None = None

    def validate(self) -> Schedule:
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("need 0 <= warmup_steps < total_steps")
        if self.floor_lr > self.peak_lr:
            raise ConfigError("floor_lr exceeds peak_lr")
        if self.kind == "warmup_exponential":
            if self.decay_start is None or not self.warmup_steps <= self.decay_start < self.total_steps:
                raise ConfigError("exponential schedule needs warmup_steps <= decay_start < total_steps")
            if self.floor_lr <= 0:
                raise ConfigError("exponential schedule needs a positive floor_lr")
        return self

    @classmethod
    def stage1_full(cls) -> Schedule:
        return cls("warmup_cosine", peak_lr=1e-4, warmup_steps=50_000, total_steps=500_000, floor_lr=5e-5)

    @classmethod
    def stage2_full(cls) -> Schedule:
        return cls("warmup_exponential", peak_lr=4.5e-4, warmup_steps=5_000, total_steps=450_000,
                   floor_lr=1e-5, decay_start=80_000)


def schedule_lr(schedule: Schedule, step: int) -> float:
    s = schedule
    if step < 0:
        raise ValueError("step must be non-negative")
    if s.warmup_steps and step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    if s.kind == "constant":
        return s.peak_lr
    if s.kind == "warmup_cosine":
        frac = min(1.0, (step - s.warmup_steps) / (s.total_steps - s.warmup_steps))
        return s.floor_lr + 0.5 * (s.peak_lr - s.floor_lr) * (1.0 + math.cos(math.pi * frac))
    if step < s.decay_start:
        return s.peak_lr
    frac = min(1.0, (step - s.decay_start) / (s.total_steps - s.decay_start))
    return s.peak_lr * (s.floor_lr / s.peak_lr) ** frac
