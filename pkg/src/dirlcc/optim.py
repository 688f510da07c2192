"""Adam with bias correction over a name -> Tensor parameter dict."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError, NumericError

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


def _array(p) -> np.ndarray:
    # ndarray.data is a buffer, so only unwrap real Tensors
    return p.data if isinstance(p, Tensor) else p


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS) -> None:
    """Update ``params`` (arrays or Tensors, in place) and ``state``.

    All gradients are validated before anything is mutated, so a failing step
    leaves both parameters and moments untouched.
    """
    for name, g in grads.items():
        p = _array(params[name])
        if np.shape(g) != p.shape:
            raise DimensionError(f"adam_step: grad shape {np.shape(g)} vs param {name} {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"adam_step: non-finite gradient for parameter {name!r}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        p = _array(params[name])
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        for k in grads:
            grads[k] = grads[k] * (max_norm / total)
    return total
