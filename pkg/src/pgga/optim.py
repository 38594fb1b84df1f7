"""SGD with momentum and weight decay, plus a central-difference gradient checker."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import ComputationRecord, Tensor, backward, recording

__all__ = ["OptimizerState", "GradientError", "sgd_step", "finite_diff_check"]


class GradientError(RuntimeError):
    """Raised when an update would consume a non-finite gradient."""


class OptimizerState:
    """Per-parameter velocity buffers and the group's update hyperparameters."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr < 0.0:
            raise ValueError(f"learning rate must be nonnegative, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0.0:
            raise ValueError(f"weight decay must be nonnegative, got {weight_decay}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState) -> None:
    """In-place update: g' = g + wd*p; v <- momentum*v + g'; p <- p - lr*v.

    Rejects the whole step (mutating nothing) if any gradient is non-finite.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {name!r}")
    for name, p in params.items():
        g = grads[name] + state.weight_decay * p.data
        v = state.velocity.get(name)
        v = g if v is None else state.momentum * v + g
        state.velocity[name] = v
        p.data = p.data - state.lr * v


def finite_diff_check(
    forward: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_coords: int = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``forward`` rebuilds the scalar loss from the current parameter values on
    every call. Up to ``max_coords`` coordinates are sampled per parameter
    (all of them when the parameter is small). Relative error uses the
    denominator max(|a|, |b|, 1e-8); a non-finite forward value makes the
    affected coordinate report an infinite error.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must be within [1e-7, 1e-3], got {eps}")
    if max_coords < 32:
        raise ValueError("at least 32 sampled coordinates per parameter are required")
    rng = rng or np.random.default_rng(0)

    record = ComputationRecord(params)
    with recording(record):
        loss = forward()
    analytic = backward(record, loss)

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        ga = analytic[name].reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = forward().item()
            flat[idx] = orig - eps
            f_minus = forward().item()
            flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                worst = np.inf
                continue
            cd = (f_plus - f_minus) / (2.0 * eps)
            a = ga[idx]
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            if err > worst:
                worst = err
    return float(worst)
