"""Joint training loop, loss traces and binary checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .errors import ContractError, FormatError, NumericError
from .losses import caption_loss, caption_nll, total_loss  # noqa: F401 - public surface
from .model import Batch, CaptionModel
from .optim import AdamState, adam_step, clip_global_norm
from .scenes import PAD_ID, Vocab, build_vocab
from .encoder import correlation_stats

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DIRLCKPT"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<IQ")


class TrainingAborted(RuntimeError):
    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict
    adam: AdamState
    iteration: int
    vocab: Vocab
    in_channels: int
    positions: int
    version: int = CKPT_VERSION
    trace: list = field(default_factory=list, compare=False)

    def model(self) -> CaptionModel:
        m = CaptionModel(self.config, self.vocab, self.in_channels, self.positions)
        m.load_arrays(self.params)
        return m


# ------------------------------------------------------------- checkpoints


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors, blobs, offset = [], [], 0
    groups = (("param", ckpt.params), ("m", ckpt.adam.m), ("v", ckpt.adam.v))
    for kind, arrays in groups:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            tensors.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = json.dumps({
        "config": ckpt.config.to_dict(),
        "iteration": ckpt.iteration,
        "adam_t": ckpt.adam.t,
        "vocab": ckpt.vocab.itos,
        "in_channels": ckpt.in_channels,
        "positions": ckpt.positions,
        "tensors": tensors,
        "payload_bytes": offset,
    }, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(_PREFIX.pack(CKPT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic", offset=0)
    start = len(CKPT_MAGIC)
    if len(raw) < start + _PREFIX.size:
        raise FormatError(f"{path}: truncated checkpoint header", offset=len(raw))
    version, hlen = _PREFIX.unpack_from(raw, start)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}", offset=start)
    hstart = start + _PREFIX.size
    if len(raw) < hstart + hlen:
        raise FormatError(f"{path}: truncated checkpoint header", offset=len(raw))
    try:
        header = json.loads(raw[hstart: hstart + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise FormatError(f"{path}: corrupt checkpoint header", offset=hstart) from None
    pstart = hstart + hlen
    if len(raw) != pstart + header["payload_bytes"]:
        raise FormatError(f"{path}: truncated checkpoint payload", offset=len(raw))
    groups = {"param": {}, "m": {}, "v": {}}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pstart + t["offset"])
        groups[t["kind"]][t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    return Checkpoint(
        config=TrainConfig.from_dict(header["config"]),
        params=groups["param"],
        adam=AdamState(groups["m"], groups["v"], header["adam_t"]),
        iteration=header["iteration"],
        vocab=Vocab(list(header["vocab"])),
        in_channels=header["in_channels"],
        positions=header["positions"],
    )


# ------------------------------------------------------------------- data


class PairStore:
    """Dataset stacked into arrays once; batches are index selections."""

    def __init__(self, samples, vocab: Vocab):
        if not samples:
            raise ContractError("training needs a nonempty dataset")
        self.before = np.stack([s.before.values for s in samples])
        self.after = np.stack([s.after.values for s in samples])
        encoded = [vocab.encode(s.caption) for s in samples]
        self.tokens = np.full((len(samples), max(map(len, encoded))), PAD_ID, dtype=np.int64)
        for i, e in enumerate(encoded):
            self.tokens[i, : len(e)] = e

    def __len__(self):
        return len(self.tokens)

    def batch(self, idx) -> Batch:
        tokens = self.tokens[idx]
        width = int((tokens != PAD_ID).sum(axis=1).max())
        return Batch(self.before[idx], self.after[idx], tokens[:, :width])


def roll_pair(batch: Batch, rng) -> Batch:
    """Roll each pair's before and after grids by one shared random cyclic
    offset. Captions and the relative before/after shift are unchanged."""
    g_h, g_w = batch.before.shape[1:3]
    before, after = np.empty_like(batch.before), np.empty_like(batch.after)
    for i, (dr, dc) in enumerate(zip(rng.integers(0, g_h, len(before)), rng.integers(0, g_w, len(before)))):
        before[i] = np.roll(batch.before[i], (dr, dc), axis=(0, 1))
        after[i] = np.roll(batch.after[i], (dr, dc), axis=(0, 1))
    return Batch(before, after, batch.tokens)


def batch_indices(n: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Deterministic epoch-shuffled batch for a given iteration (drop-last)."""
    b = min(batch_size, n)
    per_epoch = n // b
    epoch, j = divmod(iteration, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[j * b: (j + 1) * b]


# ------------------------------------------------------------------- train


def _snapshot(model, adam, iteration, vocab, trace) -> Checkpoint:
    return Checkpoint(
        config=model.config,
        params=model.state_arrays(),
        adam=AdamState({k: v.copy() for k, v in adam.m.items()},
                       {k: v.copy() for k, v in adam.v.items()}, adam.t),
        iteration=iteration,
        vocab=vocab,
        in_channels=model.in_channels,
        positions=model.positions,
        trace=list(trace),
    )


def train(
    config: TrainConfig,
    samples,
    vocab: Optional[Vocab] = None,
    resume: Optional[Checkpoint] = None,
    out_dir=None,
    trace_path=None,
    callback: Optional[Callable[[dict], None]] = None,
) -> Checkpoint:
    """Run Adam on the joint objective from ``resume.iteration`` (or 0) to
    ``config.max_iters``. Batches, dropout masks and initial parameters are
    pure functions of (seed, iteration), so resuming reproduces the trace."""
    config = config.validate()
    if resume is not None:
        vocab = resume.vocab
    vocab = vocab or build_vocab(samples)
    store = PairStore(samples, vocab)
    g, w, c = store.before.shape[1:]
    if resume is not None:
        model = resume.model()
        adam = AdamState({k: v.copy() for k, v in resume.adam.m.items()},
                         {k: v.copy() for k, v in resume.adam.v.items()}, resume.adam.t)
        start = resume.iteration
    else:
        model = CaptionModel(config, vocab, c, g * w)
        adam = AdamState()
        start = 0
    if config.ccr and config.lambda_c > 0 and min(config.batch_size, len(store)) < 2:
        log.warning("batch size below 2: the contrastive term is skipped")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trace_fh = open(trace_path, "a" if resume is not None else "w") if trace_path else None
    trace = []
    try:
        for it in range(start, config.max_iters):
            batch = store.batch(batch_indices(len(store), config.batch_size, config.seed, it))
            if config.roll_augment:
                batch = roll_pair(batch, np.random.default_rng([config.seed, it, 2]))
            drop_rng = np.random.default_rng([config.seed, it, 1]) if config.dropout > 0 else None
            model.zero_grad()
            try:
                res = model.forward(batch, drop_rng)
                ad.backward(res.total)
                grads = model.grads()
                if config.clip_norm > 0:
                    clip_global_norm(grads, config.clip_norm)
                adam_step(model.params, grads, adam, config.lr)
            except NumericError as exc:
                ckpt = _snapshot(model, adam, it, vocab, trace)
                if out is not None:
                    save_checkpoint(ckpt, out / "last_good.ckpt")
                raise TrainingAborted(f"non-finite value at iteration {it}: {exc}", ckpt) from exc
            diag, offdiag = correlation_stats(res.corr)
            rec = {
                "iteration": it,
                "L_cap": res.l_cap.item(),
                "L_dirl": res.l_dirl.item() if res.l_dirl is not None else 0.0,
                "L_ccr": res.l_ccr.item() if res.l_ccr is not None else 0.0,
                "total": res.total.item(),
                "diag_mean": diag,
                "offdiag_mean": offdiag,
            }
            trace.append(rec)
            if trace_fh:
                trace_fh.write(json.dumps(rec) + "\n")
            if callback:
                callback(rec)
            if out is not None and config.ckpt_every and (it + 1) % config.ckpt_every == 0:
                save_checkpoint(_snapshot(model, adam, it + 1, vocab, trace), out / "latest.ckpt")
    finally:
        if trace_fh:
            trace_fh.close()
    ckpt = _snapshot(model, adam, max(start, config.max_iters), vocab, trace)
    if out is not None:
        save_checkpoint(ckpt, out / "final.ckpt")
    return ckpt
