"""Adam with linear warmup and cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument, TrainingDiverged


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    warmup_steps: int = 200
    total_steps: int = 4000
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    crop_len: int = 64

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidArgument("learning rate must be positive")
        if self.total_steps < 1 or self.batch_size < 1:
            raise InvalidArgument("total_steps and batch_size must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise InvalidArgument("warmup_steps must be in [0, total_steps)")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def lr_factors(step: int, cfg: TrainConfig) -> tuple[float, float]:
    """(warmup, cosine) multipliers of the base learning rate."""
    warm = min(1.0, step / cfg.warmup_steps) if cfg.warmup_steps > 0 else 1.0
    cosine = 0.5 * (1.0 + math.cos(math.pi * step / cfg.total_steps))
    return warm, cosine


def learning_rate(step: int, cfg: TrainConfig) -> float:
    warm, cosine = lr_factors(step, cfg)
    return cfg.lr * warm * cosine


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def train_step(params: dict, grads: dict, state: AdamState, step: int, cfg: TrainConfig):
    """One Adam update. Returns ``(new_params, new_state)``; inputs are not mutated."""
    if step >= cfg.total_steps:
        raise InvalidArgument(f"step {step} is past total_steps {cfg.total_steps}")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise TrainingDiverged(f"non-finite gradient at step {step}")
    clip = min(1.0, cfg.grad_clip / norm) if cfg.grad_clip and norm > 0 else 1.0
    lr = learning_rate(step, cfg)
    k = step + 1
    bc1 = 1.0 - cfg.beta1**k
    bc2 = 1.0 - cfg.beta2**k
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name] * clip
        m = cfg.beta1 * state.m.get(name, 0.0) + (1 - cfg.beta1) * g
        v = cfg.beta2 * state.v.get(name, 0.0) + (1 - cfg.beta2) * g * g
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v)
