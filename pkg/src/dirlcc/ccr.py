"""Contrastive alignment between pooled word features and pooled attended
difference features (symmetric InfoNCE over the batch)."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

DEFAULT_TAU = 0.5


def _masked_mean(x: Tensor, mask) -> Tensor:
    """Mean over axis -2 of (..., m, D) restricted to rows where ``mask`` is True."""
    if mask is None:
        return ad.mean(x, axis=-2)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise DimensionError(f"mask shape {mask.shape} does not match rows of {x.shape}")
    counts = mask.sum(axis=-1)
    if (counts == 0).any():
        raise ContractError("mean pooling needs at least one unmasked row")
    weights = np.broadcast_to(mask[..., None], x.shape).astype(np.float64)
    total = ad.sum(ad.multiply(x, weights), axis=-2)
    inv = np.broadcast_to((1.0 / counts)[..., None], total.shape)
    return ad.multiply(total, inv)


def mean_pool_words(e_hat: Tensor, mask=None) -> Tensor:
    return _masked_mean(e_hat, mask)


def mean_pool_visual(v_hat: Tensor, mask=None) -> Tensor:
    """Average over the sequence axis of the attended features (length m)."""
    if v_hat.shape[-2] == 0:
        raise ContractError("cannot pool an empty sequence")
    return _masked_mean(v_hat, mask)


def similarity_matrix(words: Tensor, visual: Tensor, cosine: bool = False) -> Tensor:
    """S_kr = words_k . visual_r; ``cosine`` L2-normalises both sides first."""
    if words.shape != visual.shape or words.ndim != 2:
        raise DimensionError(f"similarity_matrix: shapes {words.shape} and {visual.shape}")
    if cosine:
        words, visual = _l2_normalize(words), _l2_normalize(visual)
    return ad.matmul(words, ad.transpose(visual))


def _l2_normalize(x: Tensor) -> Tensor:
    inv = ad.exp(ad.scale(ad.log(ad.sum(ad.square(x), axis=1)), -0.5))
    inv = ad.matmul(ad.reshape(inv, (-1, 1)), np.ones((1, x.shape[1])))
    return ad.multiply(x, inv)


def _row_nce(s: Tensor) -> Tensor:
    """-(1/B) sum_k log softmax(s_k)_k with max-subtraction inside log-sum-exp."""
    b = s.shape[0]
    row_max = s.data.max(axis=1)
    shifted = ad.subtract(s, np.broadcast_to(row_max[:, None], s.shape))
    lse = ad.add(ad.log(ad.sum(ad.exp(shifted), axis=1)), row_max)
    diag = ad.sum(ad.multiply(s, np.eye(b)), axis=1)
    return ad.mean(ad.subtract(lse, diag))


def infonce_ccr(s: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """(L_t2v + L_v2t) / 2 over a (B, B) similarity matrix."""
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"infonce_ccr: expected a square matrix, got {s.shape}")
    logits = ad.scale(s, 1.0 / tau)
    t2v = _row_nce(logits)
    v2t = _row_nce(ad.transpose(logits))
    return ad.scale(ad.add(t2v, v2t), 0.5)


def ccr_loss(e_hat: Tensor, v_hat: Tensor, mask, tau: float = DEFAULT_TAU, cosine: bool = False) -> Tensor:
    words = mean_pool_words(e_hat, mask)
    visual = mean_pool_visual(v_hat, mask)
    return infonce_ccr(similarity_matrix(words, visual, cosine), tau)
