"""Binary feature files and newline-delimited JSON dataset manifests.

Feature file layout, little-endian::

    b"DIRLFEAT"  u32 version=1  u32 H  u32 W  u32 C  float32[H*W*C]  (H, W, C row-major)
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import FormatError
from .scenes import (
    BOS,
    EOS,
    DistractorConfig,
    FeatureGrid,
    PairSample,
    _change_to_dict,
    change_from_dict,
    strip_sentinels,
)

MAGIC = b"DIRLFEAT"
VERSION = 1
_HEADER = struct.Struct("<IIII")
HEADER_SIZE = len(MAGIC) + _HEADER.size
MAX_ELEMENTS = 1 << 28
MANIFEST = "manifest.jsonl"


def write_features(grid: FeatureGrid, path) -> None:
    h, w, c = grid.values.shape
    payload = grid.values.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(VERSION, h, w, c))
        fh.write(payload.tobytes(order="C"))


def read_features(path) -> FeatureGrid:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic", offset=0)
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    version, h, w, c = _HEADER.unpack_from(raw, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=len(MAGIC))
    if 0 in (h, w, c) or h * w * c > MAX_ELEMENTS:
        raise FormatError(f"{path}: bad dimensions {h}x{w}x{c}", offset=len(MAGIC) + 4)
    expected = HEADER_SIZE + 4 * h * w * c
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload, expected {expected} bytes", offset=len(raw))
    if len(raw) > expected:
        raise FormatError(f"{path}: trailing bytes after payload", offset=expected)
    vals = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=HEADER_SIZE)
    if not np.isfinite(vals).all():
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise FormatError(f"{path}: non-finite feature value", offset=HEADER_SIZE + 4 * bad)
    return FeatureGrid(vals.reshape(h, w, c).astype(np.float64))


def save_dataset(samples, out_dir) -> Path:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        before = f"features/{i:06d}_before.feat"
        after = f"features/{i:06d}_after.feat"
        write_features(s.before, out / before)
        write_features(s.after, out / after)
        lines.append(json.dumps({
            "seed": s.seed,
            "change_type": s.change.change_type,
            "caption": " ".join(strip_sentinels(s.caption)),
            "before_path": before,
            "after_path": after,
            "change_cells": [list(c) for c in s.change_cells()],
            "distractor": asdict(s.distractor),
            "change": _change_to_dict(s.change),
        }))
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, out / MANIFEST)
    return out / MANIFEST


def load_dataset(data_dir) -> list:
    root = Path(data_dir)
    path = root / MANIFEST
    if not path.exists():
        raise FormatError(f"{path}: manifest not found")
    samples = []
    offset = 0
    for line in path.read_text().splitlines(keepends=True):
        start = offset
        offset += len(line.encode())
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            dist = rec["distractor"]
            dist["shift"] = tuple(dist["shift"])
            samples.append(PairSample(
                before=read_features(root / rec["before_path"]),
                after=read_features(root / rec["after_path"]),
                caption=(BOS, *rec["caption"].split(), EOS),
                change=change_from_dict(rec["change"]),
                distractor=DistractorConfig(**dist),
                seed=rec["seed"],
            ))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: bad manifest record ({exc})", offset=start) from None
    if not samples:
        raise FormatError(f"{path}: empty manifest")
    return samples
