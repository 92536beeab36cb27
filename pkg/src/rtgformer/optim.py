"""Adaptive-moment optimizer with decoupled weight decay, plus gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class NonFiniteGradientError(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step aborted")
        self.param_name = name


@dataclass
class OptimizerState:
    """First/second-moment accumulators and step counter, one slot per parameter."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def init_slots(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                   state: OptimizerState, lr: float | None = None) -> None:
    """One bias-corrected moment update; weight decay applied decoupled."""
    if lr is None:
        lr = state.lr
    if not state.m:
        state.init_slots(params)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p.data)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    # fixed summation order so the result is bit-identical regardless of
    # dict insertion order (fresh init vs. checkpoint load)
    for name in sorted(grads):
        g = grads[name]
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm; returns the pre-clip norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm
