"""Caption metrics, the pointing game and attention-map export."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError
from .scenes import strip_sentinels


def _ngrams(words, n):
    return Counter(tuple(words[i: i + n]) for i in range(len(words) - n + 1))


def bleu4(candidates: Sequence, references: Sequence) -> float:
    """Corpus BLEU-4: clipped n-gram precisions (n = 1..4) pooled over the
    corpus, uniform geometric mean, brevity penalty, no smoothing.

    ``references[i]`` is either one token list or a list of token lists.
    Sentinel tokens are stripped before counting.
    """
    if not candidates:
        raise ContractError("bleu4 needs at least one candidate")
    if len(candidates) != len(references):
        raise ContractError("candidate and reference counts differ")
    matched = [0] * 4
    total = [0] * 4
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        if refs and isinstance(refs[0], str):
            refs = [refs]
        if not refs:
            raise ContractError("every candidate needs a reference")
        cand = strip_sentinels(cand)
        refs = [strip_sentinels(r) for r in refs]
        cand_len += len(cand)
        # closest reference length, ties to the shorter one
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            counts = _ngrams(cand, n)
            best = Counter()
            for r in refs:
                best |= _ngrams(r, n)
            matched[n - 1] += sum(min(c, best[g]) for g, c in counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / 4
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p)


def exact_match(candidates: Sequence, references: Sequence) -> float:
    if len(candidates) != len(references):
        raise ContractError("candidate and reference counts differ")
    if not candidates:
        return 0.0
    hits = sum(strip_sentinels(c) == strip_sentinels(r) for c, r in zip(candidates, references))
    return hits / len(candidates)


@dataclass
class AttentionMap:
    tokens: list  # generated words
    maps: np.ndarray  # (n_tokens, H, W)
    aggregate: np.ndarray  # (H, W)

    @classmethod
    def from_weights(cls, words: Sequence[str], weights: np.ndarray, height: int, width: int):
        """``weights`` is (n_generated, HW); the aggregate averages content tokens."""
        maps = np.asarray(weights, dtype=np.float64).reshape(-1, height, width)
        content = [i for i, w in enumerate(words) if w not in ("<eos>", "<pad>")]
        pick = maps[content] if content else maps
        agg = pick.mean(axis=0) if len(pick) else np.full((height, width), 1.0 / (height * width))
        return cls(list(words), maps, agg)


def neighborhood(cell, height, width):
    r, c = cell
    return {((r + dr) % height, (c + dc) % width) for dr in (-1, 0, 1) for dc in (-1, 0, 1)}


def pointing_game(attn, change_cells) -> bool:
    """Hit iff the aggregate argmax (lowest flat index on ties) lies in a
    changed cell or its cyclic 8-neighbourhood."""
    if not change_cells:
        raise ContractError("pointing game needs at least one changed cell")
    agg = attn.aggregate if isinstance(attn, AttentionMap) else np.asarray(attn)
    h, w = agg.shape
    peak = divmod(int(np.argmax(agg)), w)
    allowed = set()
    for cell in change_cells:
        allowed |= neighborhood(tuple(cell), h, w)
    return peak in allowed


def write_pgm(values: np.ndarray, path) -> None:
    """8-bit binary graymap, max-normalised (all-zero input stays black)."""
    v = np.asarray(values, dtype=np.float64)
    peak = v.max()
    img = np.zeros(v.shape, dtype=np.uint8) if peak <= 0 else np.round(255 * np.clip(v, 0, None) / peak).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a P5 graymap")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    body = raw[len(raw) - w * h:]
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def export_attention(attn: AttentionMap, out_dir) -> list:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, (tok, m) in enumerate(zip(attn.tokens, attn.maps)):
            safe = tok.strip("<>") or "tok"
            p = out / f"{i}_{safe}.pgm"
            write_pgm(m, p)
            paths.append(p)
        p = out / "aggregate.pgm"
        write_pgm(attn.aggregate, p)
        paths.append(p)
    except OSError as exc:
        raise OSError(f"cannot write attention maps to {out}: {exc}") from exc
    return paths
