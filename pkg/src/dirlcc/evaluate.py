"""Held-out evaluation and distractor-magnitude sweeps."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .metrics import AttentionMap, bleu4, exact_match, pointing_game
from .model import CaptionModel, make_batch
from .scenes import CHANGE_TYPES, PAD_ID, DistractorRange, generate_dataset, strip_sentinels

SWEEP_SEED = 90_000
SWEEP_COUNT = 200


@dataclass
class EvalReport:
    bleu4: float
    exact_match: float
    token_accuracy: float
    pointing: float
    n: int
    by_change: dict = field(default_factory=dict)
    by_magnitude: dict = field(default_factory=dict)
    # reserved for externally computed metrics
    meteor: float | None = None
    rouge_l: float | None = None
    cider: float | None = None
    spice: float | None = None
    magnitude: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def generate_captions(model: CaptionModel, samples, batch_size: int = 100):
    """Greedy captions (word lists) and attention maps for each sample."""
    words, maps = [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i: i + batch_size]
        before = np.stack([s.before.values for s in chunk])
        after = np.stack([s.after.values for s in chunk])
        res = model.caption(before, after)
        h, w = before.shape[1:3]
        for toks, att in zip(res.tokens, res.attention):
            ws = model.vocab.decode(toks)
            words.append(ws)
            maps.append(AttentionMap.from_weights(ws[1:], att, h, w))
    return words, maps


def teacher_forced_accuracy(model: CaptionModel, samples, batch_size: int = 100) -> float:
    correct = total = 0
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = make_batch(samples[i: i + batch_size], model.vocab)
            out = model.forward(batch)
            targets = batch.tokens[:, 1:]
            mask = targets != PAD_ID
            pred = out.logits.data.argmax(axis=-1)
            correct += int(((pred == targets) & mask).sum())
            total += int(mask.sum())
    return correct / total


def _summary(cands, refs, hits):
    return {
        "bleu4": bleu4(cands, refs),
        "exact_match": exact_match(cands, refs),
        "pointing": float(np.mean(hits)) if hits else None,
        "n": len(cands),
    }


def evaluate(model: CaptionModel, samples, batch_size: int = 100) -> EvalReport:
    cands, maps = generate_captions(model, samples, batch_size)
    refs = [list(s.caption) for s in samples]
    groups = defaultdict(lambda: ([], [], []))
    mags = defaultdict(lambda: ([], [], []))
    hits = []
    for s, c, r, m in zip(samples, cands, refs, maps):
        cells = s.change_cells()
        hit = pointing_game(m, cells) if cells else None
        if hit is not None:
            hits.append(hit)
        for table, key in ((groups, s.change.change_type), (mags, s.distractor.magnitude)):
            table[key][0].append(c)
            table[key][1].append(r)
            if hit is not None:
                table[key][2].append(hit)
    return EvalReport(
        bleu4=bleu4(cands, refs),
        exact_match=exact_match(cands, refs),
        token_accuracy=teacher_forced_accuracy(model, samples, batch_size),
        pointing=float(np.mean(hits)) if hits else 0.0,
        n=len(samples),
        by_change={k: _summary(*groups[k]) for k in CHANGE_TYPES if k in groups},
        by_magnitude={int(k): _summary(*mags[k]) for k in sorted(mags)},
    )


def sweep_dataset(magnitude: int, count: int = SWEEP_COUNT, seed: int = SWEEP_SEED,
                  grid_size: int = 6, channels: int = 32):
    return generate_dataset(count, seed + magnitude, distractors=DistractorRange.for_magnitude(magnitude),
                            grid_size=grid_size, channels=channels)


def distractor_sweep(model: CaptionModel, magnitudes, count: int = SWEEP_COUNT,
                     seed: int = SWEEP_SEED) -> list:
    """One report per magnitude on freshly generated test sets (fixed seeds)."""
    g = int(round(np.sqrt(model.positions)))
    reports = []
    for k in magnitudes:
        data = sweep_dataset(int(k), count, seed, g, model.in_channels)
        rep = evaluate(model, data)
        rep.magnitude = int(k)
        reports.append(rep)
    return reports
