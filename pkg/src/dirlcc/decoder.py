"""Post-norm transformer decoder over difference features, plus greedy decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    dropout,
    init_attention,
    linear,
    multi_head_attention,
    normal_init,
    ones_init,
    sub,
    uniform_init,
    zeros_init,
)
from .scenes import BOS_ID, EOS_ID, PAD_ID

DEFAULT_MAX_LEN = 12


@dataclass
class DecoderState:
    e_hat: Tensor  # relation-embedded word features (B, m, D)
    v_hat: Tensor  # attended difference features (B, m, D)
    v_prime: Tensor  # enhanced features fed to the vocabulary layer (B, m, D)
    cross_weights: np.ndarray  # (B, h, m, HW)
    self_weights: np.ndarray  # (B, h, m, m)


def init_decoder(rng, vocab_size: int, d_model: int, word_dim: int, layers: int, max_len: int) -> dict:
    p = {
        "word.table": normal_init(rng, 1.0, (vocab_size, word_dim)),
        "word.proj": uniform_init(rng, word_dim, (word_dim, d_model)),
        "pos.word": normal_init(rng, 0.02, (max_len, d_model)),
        "out.weight": uniform_init(rng, d_model, (d_model, vocab_size)),
        "out.bias": zeros_init((vocab_size,)),
    }
    for i in range(layers):
        pre = f"dec{i}"
        for part in ("self", "cross"):
            p.update({f"{pre}.{part}.{k}": v for k, v in init_attention(rng, d_model).items()})
        p[f"{pre}.ffn.w1"] = uniform_init(rng, d_model, (d_model, 4 * d_model))
        p[f"{pre}.ffn.b1"] = zeros_init((4 * d_model,))
        p[f"{pre}.ffn.w2"] = uniform_init(rng, 4 * d_model, (4 * d_model, d_model))
        p[f"{pre}.ffn.b2"] = zeros_init((d_model,))
        for ln in ("ln1", "ln2", "ln3"):
            p[f"{pre}.{ln}.gain"] = ones_init((d_model,))
            p[f"{pre}.{ln}.bias"] = zeros_init((d_model,))
    return p


def num_layers(params: dict) -> int:
    return len({k.split(".")[0] for k in params if k.startswith("dec")})


def embed_words(tokens, params: dict) -> Tensor:
    """(B, m) token ids -> (B, m, D): table lookup, linear map to D, position table."""
    tokens = np.asarray(tokens)
    unbatched = tokens.ndim == 1
    if unbatched:
        tokens = tokens[None]
    b, m = tokens.shape
    words = linear(ad.embedding(params["word.table"], tokens), params["word.proj"])
    pos = ad.embedding(params["pos.word"], np.tile(np.arange(m), (b, 1)))
    out = ad.add(words, pos)
    return ad.reshape(out, out.shape[1:]) if unbatched else out


def self_attention_mask(valid: np.ndarray) -> np.ndarray:
    """(B, m) valid flags -> (B, m, m) causal mask that also hides PAD keys."""
    m = valid.shape[1]
    causal = np.tril(np.ones((m, m), dtype=bool))
    return causal[None] & valid[:, None, :]


def _ln(x, p, name):
    return ad.layer_norm(x, p[f"{name}.gain"], p[f"{name}.bias"])


def decoder_layer(x: Tensor, fd: Tensor, p: dict, heads: int, self_mask=None,
                  drop: float = 0.0, rng=None) -> DecoderState:
    sa, w_self = multi_head_attention(x, x, x, sub(p, "self"), heads, self_mask)
    e_hat = _ln(ad.add(x, dropout(sa, drop, rng)), p, "ln1")
    v_hat, w_cross = multi_head_attention(e_hat, fd, fd, sub(p, "cross"), heads)
    h = _ln(ad.add(e_hat, dropout(v_hat, drop, rng)), p, "ln2")
    ff = linear(ad.relu(linear(h, p["ffn.w1"], p["ffn.b1"])), p["ffn.w2"], p["ffn.b2"])
    v_prime = _ln(ad.add(h, dropout(ff, drop, rng)), p, "ln3")
    return DecoderState(e_hat, v_hat, v_prime, w_cross, w_self)


def decode_stack(tokens, fd: Tensor, params: dict, heads: int, valid=None,
                 drop: float = 0.0, rng=None) -> list:
    """Run every decoder layer; returns the per-layer states."""
    tokens = np.asarray(tokens)
    if valid is None:
        valid = tokens != PAD_ID
    x = embed_words(tokens, params)
    mask = self_attention_mask(valid)
    states = []
    for i in range(num_layers(params)):
        st = decoder_layer(x, fd, sub(params, f"dec{i}"), heads, mask, drop, rng)
        states.append(st)
        x = st.v_prime
    return states


def vocab_logits(v_prime: Tensor, params: dict) -> Tensor:
    return linear(v_prime, params["out.weight"], params["out.bias"])


def vocab_probs(v_prime: Tensor, params: dict) -> Tensor:
    return ad.softmax(vocab_logits(v_prime, params), axis=-1)


@dataclass
class GreedyResult:
    tokens: list  # per sample, BOS .. EOS (EOS absent when truncated)
    attention: list  # per sample, (n_generated, HW) head-averaged cross-attention
    truncated: list


def greedy_decode(fd: Tensor, params: dict, heads: int, max_len: int = DEFAULT_MAX_LEN) -> GreedyResult:
    """Argmax decoding from BOS, recomputing the prefix each step.

    Ties go to the lowest token id (``np.argmax`` returns the first maximum).
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    if fd.ndim == 2:
        fd = ad.reshape(fd, (1, *fd.shape))
    b = fd.shape[0]
    seqs = np.full((b, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    attn = [[] for _ in range(b)]
    with ad.no_grad():
        while seqs.shape[1] < max_len and not done.all():
            states = decode_stack(seqs, fd, params, heads, valid=np.ones_like(seqs, dtype=bool))
            logits = vocab_logits(states[-1].v_prime, params).data[:, -1, :]
            nxt = np.argmax(logits, axis=-1)
            cross = states[-1].cross_weights[:, :, -1, :].mean(axis=1)
            for i in range(b):
                if not done[i]:
                    attn[i].append(cross[i])
            nxt = np.where(done, PAD_ID, nxt)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == EOS_ID
    tokens, maps, truncated = [], [], []
    for i in range(b):
        row = seqs[i].tolist()
        if EOS_ID in row:
            row = row[: row.index(EOS_ID) + 1]
            truncated.append(False)
        else:
            row = [t for t in row if t != PAD_ID]
            truncated.append(True)
        tokens.append(row)
        maps.append(np.array(attn[i]))
    return GreedyResult(tokens, maps, truncated)
