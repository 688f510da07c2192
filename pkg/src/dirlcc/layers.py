"""Linear maps, multi-head attention and parameter initialisers."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError

MASK_VALUE = -1e9


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def normal_init(rng, std, shape):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_init(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_init(shape):
    return Tensor(np.ones(shape), requires_grad=True)


def sub(params: dict, prefix: str) -> dict:
    """View of the entries under ``prefix.`` with the prefix stripped."""
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply ``x @ w + b`` over the last axis of an input with any leading shape."""
    lead = x.shape[:-1]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} vs weight {w.shape}")
    y = ad.matmul(ad.reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = ad.add(y, b)
    return ad.reshape(y, (*lead, w.shape[1]))


def dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.multiply(x, keep)


def init_attention(rng, d_model: int) -> dict:
    return {name: uniform_init(rng, d_model, (d_model, d_model)) for name in ("wq", "wk", "wv", "wo")}


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(q, k, v, p: dict, heads: int, mask=None):
    """Scaled dot-product attention over ``heads`` heads.

    ``q`` is (B, n_q, D) or (n_q, D); ``k``/``v`` likewise with n_k rows.
    ``mask`` is a boolean array broadcastable to (B, n_q, n_k); False blocks.
    Returns the (.., n_q, D) output and the (.., h, n_q, n_k) weights.
    """
    unbatched = q.ndim == 2
    if unbatched:
        q, k, v = (ad.reshape(t, (1, *t.shape)) for t in (q, k, v))
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[:2] != v.shape[:2] or q.shape[0] != k.shape[0]:
        raise DimensionError(f"attention: shapes {q.shape}, {k.shape}, {v.shape}")
    if d % heads:
        raise DimensionError(f"attention: {heads} heads do not divide width {d}")
    b, nq, nk = q.shape[0], q.shape[1], k.shape[1]
    qh = _split_heads(linear(q, p["wq"]), heads)
    kh = _split_heads(linear(k, p["wk"]), heads)
    vh = _split_heads(linear(v, p["wv"]), heads)
    logits = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d // heads))
    if mask is not None:
        allowed = np.broadcast_to(np.asarray(mask, dtype=bool).reshape(-1, nq, nk), (b, nq, nk))
        bias = np.where(allowed, 0.0, MASK_VALUE)[:, None, :, :]
        logits = ad.add(logits, np.broadcast_to(bias, logits.shape))
    weights = ad.softmax(logits, axis=-1)
    out = ad.reshape(ad.transpose(ad.matmul(weights, vh), (0, 2, 1, 3)), (b, nq, d))
    out = linear(out, p["wo"])
    if unbatched:
        return ad.reshape(out, (nq, d)), weights.data[0]
    return out, weights.data
