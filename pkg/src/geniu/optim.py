"""Adam and plain SGD over named parameter sets.

Weight decay is the classic L2 form: added to the gradient before any moment
bookkeeping, never decoupled from the update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteValue
from .tensor import Tensor

__all__ = ["AdamState", "adam_step", "sgd_step"]


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float,
                   weight_decay: float = 0.0, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        for name, p in params.items():
            state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        return state


def _check_grads(params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteValue(f"gradient of {name!r}")


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place on `params` and `state`."""
    _check_grads(params, grads)
    if set(state.first_moment) != set(params):
        raise ValueError("Adam state does not belong to this parameter set")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype, copy=False)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
             lr: float, weight_decay: float = 0.0) -> None:
    """Plain gradient descent with L2 weight decay, in place."""
    _check_grads(params, grads)
    for name, p in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p.data
        p.data -= (lr * g).astype(p.data.dtype, copy=False)
