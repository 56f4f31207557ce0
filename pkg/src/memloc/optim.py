"""SGD with momentum, the one-cycle schedule, and vector helpers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedSimilarity(ValueError):
    """Cosine similarity with a zero vector has no value."""


@dataclass(frozen=True)
class OneCycleSchedule:
    """Linear warm-up to ``peak_lr`` at ``peak_epoch``, then linear decay.

    The rate starts at ``peak_lr / div_factor`` and ends at
    ``peak_lr / (div_factor * 100)`` on the last epoch (``total_epochs - 1``).
    """

    peak_lr: float = 0.1
    peak_epoch: int = 10
    total_epochs: int = 50
    div_factor: float = 25.0

    def __post_init__(self):
        if not 0 < self.peak_epoch < self.total_epochs:
            raise ValueError(
                f"need 0 < peak_epoch < total_epochs, got {self.peak_epoch} / {self.total_epochs}"
            )
        if self.peak_lr <= 0 or self.div_factor <= 0:
            raise ValueError("peak_lr and div_factor must be positive")

    @property
    def initial_lr(self) -> float:
        return self.peak_lr / self.div_factor

    @property
    def final_lr(self) -> float:
        return self.peak_lr / (self.div_factor * 100.0)


def one_cycle_lr(schedule: OneCycleSchedule, epoch: float) -> float:
    """Learning rate at a (possibly fractional) epoch in ``[0, total_epochs)``."""
    s = schedule
    if not 0 <= epoch < s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs})")
    if epoch <= s.peak_epoch:
        return s.initial_lr + (s.peak_lr - s.initial_lr) * epoch / s.peak_epoch
    end = s.total_epochs - 1
    if end == s.peak_epoch:  # only possible for a 1-epoch decay phase
        return s.peak_lr
    frac = min((epoch - s.peak_epoch) / (end - s.peak_epoch), 1.0)
    return s.peak_lr + (s.final_lr - s.peak_lr) * frac


class SGD:
    """Momentum SGD with L2 weight decay, updating arrays in place.

    ``v <- momentum * v + (g + wd * theta)``; ``theta <- theta - lr * v``.
    With momentum and weight decay at zero this is exactly
    ``theta <- theta - lr * g``.
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        sgd_step(params, grads, lr, self.momentum, self.weight_decay, self.velocity)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.velocity.items()}


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None) -> None:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"sgd_step: {name} has shape {p.shape}, gradient {g.shape}")
        dt = p.dtype.type
        d = g + dt(weight_decay) * p if weight_decay else g
        if momentum:
            if velocity is None:
                raise ValueError("momentum needs a velocity buffer")
            buf = velocity.get(name)
            if buf is None:
                buf = velocity[name] = np.array(d, dtype=p.dtype, copy=True)
            else:
                buf *= dt(momentum)
                buf += d
            d = buf
        if lr:
            p -= dt(lr) * d


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity: lengths {a.size} and {b.size} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedSimilarity("cosine similarity with a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))
