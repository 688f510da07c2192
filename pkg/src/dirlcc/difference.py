"""Shared features by cross-attention, per-image differences and their fusion."""
from __future__ import annotations

from . import autodiff as ad
from .autodiff import Tensor
from .layers import init_attention, linear, multi_head_attention, sub, uniform_init, zeros_init

DEFAULT_HEADS = 8


def init_difference(rng, d_model: int, tied: bool = True) -> dict:
    params = {f"diff.attn.{k}": v for k, v in init_attention(rng, d_model).items()}
    if not tied:
        params.update({f"diff.attn_aft.{k}": v for k, v in init_attention(rng, d_model).items()})
    params["fuse.weight"] = uniform_init(rng, 2 * d_model, (2 * d_model, d_model))
    params["fuse.bias"] = zeros_init((d_model,))
    return params


def shared_features(f_bef: Tensor, f_aft: Tensor, params: dict, heads: int = DEFAULT_HEADS):
    """Each image queries the other one; returns the two shared-feature tensors
    and the two attention weight arrays."""
    attn_bef = sub(params, "diff.attn")
    attn_aft = sub(params, "diff.attn_aft") or attn_bef
    s_bef, w_bef = multi_head_attention(f_bef, f_aft, f_aft, attn_bef, heads)
    s_aft, w_aft = multi_head_attention(f_aft, f_bef, f_bef, attn_aft, heads)
    return s_bef, s_aft, (w_bef, w_aft)


def difference_features(f: Tensor, shared: Tensor) -> Tensor:
    return ad.subtract(f, shared)


def fuse_difference(d_bef: Tensor, d_aft: Tensor, params: dict) -> Tensor:
    """relu([d_bef ; d_aft] W_c + b_c) per position."""
    cat = ad.concat([d_bef, d_aft], axis=-1)
    return ad.relu(linear(cat, params["fuse.weight"], params["fuse.bias"]))


def difference_module(f_bef, f_aft, params, heads=DEFAULT_HEADS, subtraction=False):
    """Full difference path. ``subtraction`` swaps cross-attention for the
    position-aligned opposite image (direct-subtraction baseline)."""
    if subtraction:
        s_bef, s_aft, weights = f_aft, f_bef, None
    else:
        s_bef, s_aft, weights = shared_features(f_bef, f_aft, params, heads)
    fused = fuse_difference(
        difference_features(f_bef, s_bef), difference_features(f_aft, s_aft), params
    )
    return fused, weights
