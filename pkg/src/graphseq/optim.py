"""Decoupled-weight-decay adaptive-moment optimizer and the LR schedule.

Weight decay is applied directly to weights, scaled by the learning rate,
and skipped for layer-norm gains, all biases, and the embedding tables.
The schedule is linear warmup to the peak followed by linear decay to the
end rate at the final step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

_NO_DECAY_LEAVES = {"bias", "gain", "bq", "bk", "bv", "bo", "b1", "b2"}
_NO_DECAY_NAMES = {"pos_emb", "mask_emb"}


def decays(name: str) -> bool:
    if name in _NO_DECAY_NAMES:
        return False
    return name.rsplit(".", 1)[-1] not in _NO_DECAY_LEAVES


@dataclass
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optim(params: dict) -> OptimState:
    return OptimState(
        step=0,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adamw_step(
    params: dict,
    grads: dict,
    state: OptimState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay and decays(name):
            p -= p.dtype.type(lr * weight_decay) * p
        p -= p.dtype.type(lr) * (m / bc1) / (np.sqrt(v / bc2) + eps)


def lr_at_step(peak_lr: float, end_lr: float, warmup: int, t: int, total: int) -> float:
    """Linear 0 -> peak over [0, warmup], then linear peak -> end over (warmup, total]."""
    if total < warmup:
        raise ConfigError(f"total steps {total} < warmup_updates {warmup}")
    if t > total:
        raise ConfigError(f"step {t} beyond total {total}")
    if warmup > 0 and t <= warmup:
        return peak_lr * t / warmup
    if total == warmup:
        return peak_lr
    return peak_lr + (end_lr - peak_lr) * (t - warmup) / (total - warmup)
