"""Captioning negative log-likelihood and the weighted joint objective."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError


def _check_targets(shape, targets, mask):
    targets = np.asarray(targets)
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if targets.shape != shape[:-1] or mask.shape != targets.shape:
        raise DimensionError(f"targets {targets.shape} / mask {mask.shape} vs predictions {shape}")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("caption loss needs at least one unmasked token")
    onehot = np.zeros(shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    return onehot * mask[..., None], mask, count


def caption_loss(probs: Tensor, targets, mask=None, reduction: str = "mean") -> Tensor:
    """-sum_t mask_t log p(target_t) from probabilities, per-token mean by default."""
    sel, _, count = _check_targets(probs.shape, targets, mask)
    picked = ad.sum(ad.multiply(probs, sel), axis=-1)
    # masked slots hold probability 1 so that log contributes 0
    picked = ad.add(picked, 1.0 - sel.sum(axis=-1))
    nll = ad.scale(ad.sum(ad.log(picked)), -1.0)
    return ad.scale(nll, 1.0 / count) if reduction == "mean" else nll


def caption_nll(logits: Tensor, targets, mask=None, reduction: str = "mean") -> Tensor:
    """Same quantity computed from logits with a max-shifted log-sum-exp."""
    sel, mask, count = _check_targets(logits.shape, targets, mask)
    row_max = logits.data.max(axis=-1)
    shifted = ad.subtract(logits, np.broadcast_to(row_max[..., None], logits.shape))
    lse = ad.add(ad.log(ad.sum(ad.exp(shifted), axis=-1)), row_max)
    picked = ad.sum(ad.multiply(logits, sel), axis=-1)
    per_token = ad.multiply(ad.subtract(lse, picked), mask.astype(np.float64))
    nll = ad.sum(per_token)
    return ad.scale(nll, 1.0 / count) if reduction == "mean" else nll


def total_loss(l_cap: Tensor, l_dirl: Tensor | None, l_ccr: Tensor | None,
               lambda_d: float, lambda_c: float) -> Tensor:
    """L_cap + lambda_d * L_dirl + lambda_c * L_ccr; absent terms count as zero."""
    if lambda_d < 0 or lambda_c < 0:
        raise ContractError("trade-off weights must be >= 0")
    total = l_cap
    if l_dirl is not None:
        total = ad.add(total, ad.scale(l_dirl, lambda_d))
    if l_ccr is not None:
        total = ad.add(total, ad.scale(l_ccr, lambda_c))
    return total
