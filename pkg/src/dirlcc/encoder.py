"""Feature projection with positional table, shared MLP head and the
channel-correlation decorrelation loss."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, NumericError
from .layers import linear, normal_init, uniform_init, zeros_init

DEFAULT_ALPHA = 0.003


def init_encoder(rng, in_channels: int, d_model: int, positions: int, pos_std: float = 0.02) -> dict:
    return {
        "proj.weight": uniform_init(rng, in_channels, (in_channels, d_model)),
        "pos.visual": normal_init(rng, pos_std, (positions, d_model)),
        "mlp.w1": uniform_init(rng, d_model, (d_model, d_model)),
        "mlp.b1": zeros_init((d_model,)),
        "mlp.w2": uniform_init(rng, d_model, (d_model, d_model)),
        "mlp.b2": zeros_init((d_model,)),
    }


def project_embed(grid, params: dict) -> Tensor:
    """(B, H, W, C) or (H, W, C) features -> (B, HW, D) or (HW, D) embeddings.

    A per-position linear map (1x1 convolution) plus a learnable positional table.
    """
    grid = np.asarray(getattr(grid, "values", grid), dtype=np.float64)
    unbatched = grid.ndim == 3
    if unbatched:
        grid = grid[None]
    b, h, w, c = grid.shape
    weight, pos = params["proj.weight"], params["pos.visual"]
    if c != weight.shape[0]:
        raise DimensionError(f"project_embed: grid has {c} channels, projection expects {weight.shape[0]}")
    if h * w != pos.shape[0]:
        raise DimensionError(f"project_embed: {h}x{w} grid vs positional table of {pos.shape[0]}")
    x = ad.matmul(Tensor(grid.reshape(b * h * w, c)), weight)
    x = ad.add(x, ad.embedding(pos, np.tile(np.arange(h * w), b)))
    d = weight.shape[1]
    return ad.reshape(x, (h * w, d) if unbatched else (b, h * w, d))


def mlp_head(x: Tensor, params: dict, enabled: bool = True) -> Tensor:
    if not enabled:
        return x
    hidden = ad.relu(linear(x, params["mlp.w1"], params["mlp.b1"]))
    return linear(hidden, params["mlp.w2"], params["mlp.b2"])


def flatten_samples(y: Tensor, mode: str = "flatten") -> Tensor:
    """(B, HW, D) -> (N, D) correlation samples.

    ``flatten`` treats every (batch, position) as a sample; ``pool`` averages
    positions first so N = B.
    """
    if y.ndim == 2:
        return y
    if mode == "flatten":
        return ad.reshape(y, (-1, y.shape[-1]))
    if mode == "pool":
        return ad.mean(y, axis=1)
    raise ValueError(f"unknown correlation mode {mode!r}")


def _inverse_column_norms(y: Tensor, label: str) -> Tensor:
    sq = ad.sum(ad.square(y), axis=0)
    zero = np.flatnonzero(sq.data <= 0)
    if zero.size:
        raise NumericError(f"correlation_matrix: zero-norm column {int(zero[0])} in {label} batch")
    # 1/sqrt(s) as exp(-log(s)/2)
    return ad.exp(ad.scale(ad.log(sq), -0.5))


def correlation_matrix(y_bef: Tensor, y_aft: Tensor) -> Tensor:
    """C_ij = sum_n yb_ni ya_nj / (||yb_.i|| ||ya_.j||), no mean-centering."""
    if y_bef.shape != y_aft.shape or y_bef.ndim != 2:
        raise DimensionError(f"correlation_matrix: shapes {y_bef.shape} and {y_aft.shape}")
    d = y_bef.shape[1]
    cross = ad.matmul(ad.transpose(y_bef), y_aft)
    inv_b = ad.reshape(_inverse_column_norms(y_bef, "before"), (d, 1))
    inv_a = ad.reshape(_inverse_column_norms(y_aft, "after"), (1, d))
    return ad.multiply(cross, ad.matmul(inv_b, inv_a))


def dirl_loss(c: Tensor, alpha: float = DEFAULT_ALPHA) -> Tensor:
    """sum_i (1 - C_ii)^2 + alpha * sum_{i != j} C_ij^2."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    d = c.shape[0]
    eye = np.eye(d)
    diag = ad.sum(ad.multiply(c, eye), axis=1)
    on = ad.sum(ad.square(ad.subtract(np.ones(d), diag)))
    off = ad.sum(ad.square(ad.multiply(c, 1.0 - eye)))
    return ad.add(on, ad.scale(off, alpha))


def correlation_stats(c) -> tuple:
    """(mean diagonal, mean |off-diagonal|) of a correlation matrix."""
    m = c.data if isinstance(c, Tensor) else np.asarray(c)
    d = m.shape[0]
    off = np.abs(m[~np.eye(d, dtype=bool)])
    return float(np.mean(np.diag(m))), float(off.mean()) if off.size else 0.0
