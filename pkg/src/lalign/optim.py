"""AdamW with decoupled weight decay, learning-rate schedules, gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamWState:
    """Per-parameter moment buffers plus shared hyperparameters.

    Buffers are keyed by parameter name and zero-initialized on first use,
    which keeps the state serializable as plain named arrays.
    """

    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
) -> AdamWState:
    """One decoupled-weight-decay Adam update, in place on `params`.

    The decay term is lr * weight_decay * param, applied alongside the
    bias-corrected moment update rather than folded into the gradients.
    """
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}: {g.shape} vs {p.data.shape}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= lr * update + lr * state.weight_decay * p.data
    return state


class AdamW:
    """Object wrapper tying an AdamWState to a fixed named-parameter dict."""

    def __init__(
        self,
        params: dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.95,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.state = AdamWState(beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state, lr)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to max_lr followed by cosine decay to min_lr."""

    max_lr: float
    min_lr: float = 0.0
    warmup_steps: int = 0
    total_steps: int = 1
    kind: str = "linear-warmup-cosine-decay"

    def __post_init__(self):
        if self.min_lr > self.max_lr:
            raise ValueError("min_lr must not exceed max_lr")
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.kind not in ("cosine-decay", "linear-warmup-cosine-decay"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "cosine-decay" and self.warmup_steps != 0:
            raise ValueError("cosine-decay takes no warmup steps")


def schedule_lr(sched: LrSchedule, step: int) -> float:
    if not (0 <= step <= sched.total_steps):
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    if sched.warmup_steps > 0 and step < sched.warmup_steps:
        return sched.max_lr * step / sched.warmup_steps
    span = max(sched.total_steps - sched.warmup_steps, 1)
    progress = (step - sched.warmup_steps) / span
    return sched.min_lr + 0.5 * (sched.max_lr - sched.min_lr) * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm.

    Returns the pre-clip global norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
