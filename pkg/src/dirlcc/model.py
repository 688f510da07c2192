"""The full captioner: encoder, decorrelation branch, difference module,
decoder and contrastive regulariser wired together."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ccr import ccr_loss
from .config import TrainConfig
from .decoder import decode_stack, greedy_decode, init_decoder, vocab_logits
from .difference import difference_module, init_difference
from .encoder import (
    correlation_matrix,
    dirl_loss,
    flatten_samples,
    init_encoder,
    mlp_head,
    project_embed,
)
from .losses import caption_nll, total_loss
from .scenes import PAD_ID


@dataclass
class Batch:
    before: np.ndarray  # (B, H, W, C)
    after: np.ndarray
    tokens: np.ndarray  # (B, L) ids with BOS ... EOS PAD*


def make_batch(samples, vocab) -> Batch:
    encoded = [vocab.encode(s.caption) for s in samples]
    length = max(len(e) for e in encoded)
    tokens = np.full((len(samples), length), PAD_ID, dtype=np.int64)
    for i, e in enumerate(encoded):
        tokens[i, : len(e)] = e
    return Batch(
        np.stack([s.before.values for s in samples]),
        np.stack([s.after.values for s in samples]),
        tokens,
    )


@dataclass
class ForwardOutput:
    l_cap: Tensor
    l_dirl: Optional[Tensor]
    l_ccr: Optional[Tensor]
    total: Tensor
    corr: np.ndarray  # (D, D) channel correlation matrix
    logits: Tensor


class CaptionModel:
    def __init__(self, config: TrainConfig, vocab, in_channels: int, positions: int,
                 params: Optional[dict] = None):
        self.config = config.validate()
        self.vocab = vocab
        vocab_size = len(vocab)
        self.in_channels = in_channels
        self.positions = positions
        if params is None:
            rng = np.random.default_rng(config.seed)
            d = config.d_model
            params = {}
            params.update(init_encoder(rng, in_channels, d, positions, config.pos_init))
            params.update(init_difference(rng, d, tied=config.tied_attention))
            params.update(init_decoder(rng, vocab_size, d, config.word_dim, config.layers, config.max_len))
        self.params = params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def grads(self) -> dict:
        return {k: p.grad for k, p in self.params.items()}

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # ------------------------------------------------------------- pieces

    def embed_pair(self, before, after):
        return project_embed(before, self.params), project_embed(after, self.params)

    def correlation(self, f_bef: Tensor, f_aft: Tensor) -> Tensor:
        cfg = self.config
        y_bef = flatten_samples(mlp_head(f_bef, self.params, cfg.mlp), cfg.corr_mode)
        y_aft = flatten_samples(mlp_head(f_aft, self.params, cfg.mlp), cfg.corr_mode)
        return correlation_matrix(y_bef, y_aft)

    def difference(self, f_bef: Tensor, f_aft: Tensor):
        return difference_module(f_bef, f_aft, self.params, self.config.heads, self.config.subtraction)

    def encode(self, before, after) -> Tensor:
        f_bef, f_aft = self.embed_pair(before, after)
        fd, _ = self.difference(f_bef, f_aft)
        return fd

    # ------------------------------------------------------------ training

    def forward(self, batch: Batch, rng=None) -> ForwardOutput:
        cfg = self.config
        f_bef, f_aft = self.embed_pair(batch.before, batch.after)

        use_dirl = cfg.dirl and cfg.lambda_d > 0
        if use_dirl:
            corr = self.correlation(f_bef, f_aft)
            l_dirl = dirl_loss(corr, cfg.alpha)
            corr_values = corr.data
        else:
            l_dirl = None
            with ad.no_grad():
                corr_values = self.correlation(f_bef, f_aft).data

        fd, _ = self.difference(f_bef, f_aft)
        inputs, targets = batch.tokens[:, :-1], batch.tokens[:, 1:]
        mask = targets != PAD_ID
        states = decode_stack(inputs, fd, self.params, cfg.heads, valid=mask, drop=cfg.dropout, rng=rng)
        logits = vocab_logits(states[-1].v_prime, self.params)
        l_cap = caption_nll(logits, targets, mask, "sum" if cfg.caption_sum else "mean")

        l_ccr = None
        if cfg.ccr and cfg.lambda_c > 0 and batch.tokens.shape[0] >= 2:
            last = states[-1]
            l_ccr = ccr_loss(last.e_hat, last.v_hat, mask, cfg.tau, cfg.cosine_sim)
        total = total_loss(l_cap, l_dirl, l_ccr, cfg.lambda_d, cfg.lambda_c)
        return ForwardOutput(l_cap, l_dirl, l_ccr, total, corr_values, logits)

    # ----------------------------------------------------------- inference

    def caption(self, before, after, max_len: Optional[int] = None):
        with ad.no_grad():
            fd = self.encode(before, after)
            return greedy_decode(fd, self.params, self.config.heads, max_len or self.config.max_len)

    def state_arrays(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise KeyError(f"parameter set mismatch: {sorted(missing)}")
        for k, p in self.params.items():
            if arrays[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {p.data.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)
            p.zero_grad()
