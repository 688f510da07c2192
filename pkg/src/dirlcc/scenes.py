"""Synthetic before/after scene pairs rendered straight to feature grids.

A scene is a G x G grid whose cells hold at most one object described by a
(shape, color, size) triple. One semantic change turns the before scene into
the after scene; distractors (cyclic shift, gain, feature noise) are then
applied to the rendered after features only, so they never reach the caption.
"""
from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, GenerationError

SHAPES = ("cube", "sphere", "cylinder")
COLORS = ("red", "green", "blue", "yellow", "gray", "brown")
SIZES = ("small", "large")
CHANGE_TYPES = ("color", "add", "drop", "move", "none")

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

DEFAULT_GRID = 6
DEFAULT_CHANNELS = 32
MIN_MOVE_DISTANCE = 2


@dataclass(frozen=True)
class Obj:
    shape: str
    color: str
    size: str

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in COLORS or self.size not in SIZES:
            raise ContractError(f"unknown object attributes {self}")


Cell = tuple  # (row, col)


@dataclass(frozen=True)
class Scene:
    grid_size: int
    cells: tuple  # G rows of G Optional[Obj]

    @classmethod
    def from_objects(cls, grid_size: int, objects: dict) -> "Scene":
        rows = [[None] * grid_size for _ in range(grid_size)]
        for (r, c), obj in objects.items():
            rows[r][c] = obj
        return cls(grid_size, tuple(tuple(row) for row in rows))

    def objects(self) -> dict:
        return {
            (r, c): obj
            for r, row in enumerate(self.cells)
            for c, obj in enumerate(row)
            if obj is not None
        }

    def empty_cells(self) -> list:
        return [
            (r, c)
            for r, row in enumerate(self.cells)
            for c, obj in enumerate(row)
            if obj is None
        ]

    def with_cells(self, updates: dict) -> "Scene":
        objs = self.objects()
        for cell, obj in updates.items():
            if obj is None:
                objs.pop(cell, None)
            else:
                objs[cell] = obj
        return Scene.from_objects(self.grid_size, objs)


@dataclass(frozen=True)
class ChangeRecord:
    change_type: str
    before_cell: Optional[tuple] = None
    after_cell: Optional[tuple] = None
    before_obj: Optional[Obj] = None
    after_obj: Optional[Obj] = None

    def __post_init__(self):
        if self.change_type not in CHANGE_TYPES:
            raise ContractError(f"unknown change type {self.change_type!r}")
        if self.change_type == "none" and (self.before_cell or self.after_cell):
            raise ContractError("a 'none' change carries no cells")
        if self.change_type == "move" and self.before_cell == self.after_cell:
            raise ContractError("a move must change the cell")


@dataclass(frozen=True)
class DistractorConfig:
    shift: tuple = (0, 0)
    gain: float = 1.0
    noise_sigma: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        shift = self.shift
        if isinstance(shift, (int, np.integer)):
            shift = (int(shift), int(shift))
        object.__setattr__(self, "shift", tuple(int(s) for s in shift))
        if len(self.shift) != 2:
            raise ContractError(f"shift needs one offset per axis, got {self.shift}")

    def validate(self, grid_size: int, strict: bool = True) -> None:
        """``strict`` enforces the sampled gain range; the renderer itself only
        needs a positive gain."""
        if not self.gain > 0:
            raise ContractError(f"gain must be positive, got {self.gain}")
        if strict and not 0.5 <= self.gain <= 1.5:
            raise ContractError(f"gain {self.gain} outside [0.5, 1.5]")
        if any(abs(s) > grid_size / 2 for s in self.shift):
            raise ContractError(f"shift {self.shift} exceeds half the grid {grid_size}")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")

    @property
    def magnitude(self) -> int:
        return max(abs(s) for s in self.shift)


@dataclass
class FeatureGrid:
    values: np.ndarray  # (H, W, C)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ContractError(f"feature grid must be H x W x C, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ContractError("feature grid holds non-finite values")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    def __eq__(self, other):
        return isinstance(other, FeatureGrid) and np.array_equal(self.values, other.values)


@dataclass
class PairSample:
    before: FeatureGrid
    after: FeatureGrid
    caption: tuple  # words including BOS/EOS
    change: ChangeRecord
    distractor: DistractorConfig
    seed: int
    before_scene: Optional[Scene] = field(default=None, compare=False, repr=False)
    after_scene: Optional[Scene] = field(default=None, compare=False, repr=False)

    def change_cells(self) -> list:
        """Changed cells in displayed grid coordinates (after cells follow the shift)."""
        g = self.before.height
        cells = []
        if self.change.before_cell is not None:
            cells.append(tuple(self.change.before_cell))
        if self.change.after_cell is not None:
            r, c = self.change.after_cell
            dr, dc = self.distractor.shift
            shifted = ((r + dr) % g, (c + dc) % g)
            if shifted not in cells:
                cells.append(shifted)
        return cells

    def to_bytes(self) -> bytes:
        meta = {
            "caption": list(self.caption),
            "change": _change_to_dict(self.change),
            "distractor": asdict(self.distractor),
            "seed": self.seed,
        }
        head = json.dumps(meta, sort_keys=True).encode()
        return (
            head
            + self.before.values.astype("<f8").tobytes()
            + self.after.values.astype("<f8").tobytes()
        )

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _change_to_dict(change: ChangeRecord) -> dict:
    d = asdict(change)
    for k in ("before_cell", "after_cell"):
        if d[k] is not None:
            d[k] = list(d[k])
    return d


def change_from_dict(d: dict) -> ChangeRecord:
    objs = {k: (Obj(**d[k]) if d.get(k) else None) for k in ("before_obj", "after_obj")}
    cells = {k: (tuple(d[k]) if d.get(k) is not None else None) for k in ("before_cell", "after_cell")}
    return ChangeRecord(d["change_type"], **cells, **objs)


# ---------------------------------------------------------------- rendering


class Codebook:
    """Fixed random projection of one-hot attribute codes to feature vectors."""

    def __init__(self, channels: int = DEFAULT_CHANNELS, seed: int = 0):
        rng = np.random.default_rng([seed, channels])
        n_attr = len(SHAPES) + len(COLORS) + len(SIZES)
        proj = rng.normal(0.0, 1.0, size=(n_attr, channels))
        self.projection = proj.astype(np.float32).astype(np.float64)
        # constant background keeps empty cells away from zero norm
        bg = 0.5 * rng.normal(0.0, 1.0, size=channels)
        self.background = bg.astype(np.float32).astype(np.float64)
        self.channels = channels

    def encode(self, obj: Obj) -> np.ndarray:
        code = np.zeros(self.projection.shape[0])
        code[SHAPES.index(obj.shape)] = 1.0
        code[len(SHAPES) + COLORS.index(obj.color)] = 1.0
        code[len(SHAPES) + len(COLORS) + SIZES.index(obj.size)] = 1.0
        return code @ self.projection


@functools.lru_cache(maxsize=16)
def get_codebook(channels: int = DEFAULT_CHANNELS, seed: int = 0) -> Codebook:
    return Codebook(channels, seed)


def render_features(
    scene: Scene,
    distractor: Optional[DistractorConfig] = None,
    codebook: Optional[Codebook] = None,
) -> FeatureGrid:
    distractor = distractor or DistractorConfig()
    distractor.validate(scene.grid_size, strict=False)
    codebook = codebook or get_codebook()
    g = scene.grid_size
    vals = np.tile(codebook.background, (g, g, 1))
    for (r, c), obj in scene.objects().items():
        vals[r, c] = codebook.encode(obj)
    vals = vals.astype(np.float32).astype(np.float64)
    vals = np.roll(vals, shift=tuple(distractor.shift), axis=(0, 1))
    vals = vals * distractor.gain
    if distractor.noise_sigma > 0:
        rng = np.random.default_rng(distractor.noise_seed)
        vals = vals + rng.normal(0.0, distractor.noise_sigma, size=vals.shape)
    # float32-representable values make the on-disk format lossless
    return FeatureGrid(vals.astype(np.float32).astype(np.float64))


# ----------------------------------------------------------------- captions


def caption_of(change: ChangeRecord) -> tuple:
    t = change.change_type
    if t == "none":
        words = ["no", "change", "was", "made"]
    elif t == "color":
        o, n = change.before_obj, change.after_obj
        words = ["the", o.size, o.shape, "changed", "to", n.color]
    else:
        o = change.before_obj if t in ("drop", "move") else change.after_obj
        tail = {"add": ["was", "added"], "drop": ["was", "removed"], "move": ["moved"]}[t]
        words = ["the", o.size, o.color, o.shape, *tail]
    return (BOS, *words, EOS)


def all_captions() -> list:
    """Every caption the template grammar can produce."""
    out = []
    for size in SIZES:
        for color in COLORS:
            for shape in SHAPES:
                obj = Obj(shape, color, size)
                for t in ("add", "drop", "move"):
                    cell = {"add": (None, (0, 0)), "drop": ((0, 0), None), "move": ((0, 0), (1, 1))}[t]
                    out.append(caption_of(ChangeRecord(t, *cell, before_obj=obj, after_obj=obj)))
                for new in COLORS:
                    if new != color:
                        out.append(caption_of(ChangeRecord(
                            "color", (0, 0), (0, 0), obj, Obj(shape, new, size))))
    out.append(caption_of(ChangeRecord("none")))
    return out


@dataclass
class Vocab:
    itos: list = field(default_factory=lambda: list(RESERVED))

    def __post_init__(self):
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def encode(self, words: Iterable[str]) -> list:
        return [self.stoi.get(w, UNK_ID) for w in words]

    def decode(self, ids: Iterable[int]) -> list:
        return [self.itos[i] for i in ids]


def build_vocab(captions: Sequence) -> Vocab:
    """Sorted content words after the four reserved tokens."""
    captions = [c.caption if isinstance(c, PairSample) else c for c in captions]
    if not captions:
        raise ContractError("cannot build a vocabulary from an empty dataset")
    words = sorted({w for cap in captions for w in cap if w not in RESERVED})
    return Vocab(list(RESERVED) + words)


def strip_sentinels(words: Sequence[str]) -> list:
    return [w for w in words if w not in RESERVED]


# --------------------------------------------------------------- generation


def _cyclic_distance(a, b, g):
    return max(min(abs(a[i] - b[i]), g - abs(a[i] - b[i])) for i in range(2))


def random_object(rng) -> Obj:
    return Obj(
        SHAPES[rng.integers(len(SHAPES))],
        COLORS[rng.integers(len(COLORS))],
        SIZES[rng.integers(len(SIZES))],
    )


def random_scene(rng, grid_size: int, n_objects=(3, 6)) -> Scene:
    lo, hi = n_objects
    hi = min(hi, grid_size * grid_size)
    n = int(rng.integers(max(lo, 1), hi + 1))
    flat = rng.choice(grid_size * grid_size, size=n, replace=False)
    objs = {(int(i) // grid_size, int(i) % grid_size): random_object(rng) for i in flat}
    return Scene.from_objects(grid_size, objs)


def apply_change(scene: Scene, change_type: str, rng, shift=(0, 0)) -> tuple:
    """Return (after_scene, ChangeRecord) for one semantic change.

    A move lands at least MIN_MOVE_DISTANCE cells (cyclic Chebyshev) from its
    source both in scene coordinates and after the viewpoint ``shift``, so the
    displacement is never confusable with the shift itself.
    """
    if change_type not in CHANGE_TYPES:
        raise ContractError(f"unknown change type {change_type!r}")
    objs = scene.objects()
    cells = sorted(objs)
    empty = scene.empty_cells()
    g = scene.grid_size
    if change_type == "none":
        return scene, ChangeRecord("none")
    if change_type == "add":
        if not empty:
            raise GenerationError("cannot add an object to a full grid")
        cell = empty[rng.integers(len(empty))]
        obj = random_object(rng)
        return scene.with_cells({cell: obj}), ChangeRecord("add", None, cell, None, obj)
    if not cells:
        raise GenerationError(f"cannot apply {change_type!r} to an empty grid")
    src = cells[rng.integers(len(cells))]
    obj = objs[src]
    if change_type == "drop":
        return scene.with_cells({src: None}), ChangeRecord("drop", src, None, obj, None)
    if change_type == "color":
        choices = [c for c in COLORS if c != obj.color]
        new = Obj(obj.shape, choices[rng.integers(len(choices))], obj.size)
        return scene.with_cells({src: new}), ChangeRecord("color", src, src, obj, new)
    # move
    if not empty:
        raise GenerationError("cannot move an object on a full grid")
    dr, dc = shift
    far = [
        c for c in empty
        if _cyclic_distance(c, src, g) >= MIN_MOVE_DISTANCE
        and _cyclic_distance(((c[0] + dr) % g, (c[1] + dc) % g), src, g) >= MIN_MOVE_DISTANCE
    ]
    pool = far or empty
    dst = pool[rng.integers(len(pool))]
    return scene.with_cells({src: None, dst: obj}), ChangeRecord("move", src, dst, obj, obj)


def generate_pair(
    seed: int,
    grid_size: int = DEFAULT_GRID,
    change_type: str = "none",
    distractor: Optional[DistractorConfig] = None,
    channels: int = DEFAULT_CHANNELS,
    codebook_seed: int = 0,
    n_objects=(3, 6),
) -> PairSample:
    if grid_size < 3:
        raise ContractError("grid_size must be >= 3")
    distractor = distractor or DistractorConfig()
    distractor.validate(grid_size)
    rng = np.random.default_rng(seed)
    before = random_scene(rng, grid_size, n_objects)
    after, change = apply_change(before, change_type, rng, distractor.shift)
    book = get_codebook(channels, codebook_seed)
    return PairSample(
        before=render_features(before, DistractorConfig(), book),
        after=render_features(after, distractor, book),
        caption=caption_of(change),
        change=change,
        distractor=distractor,
        seed=seed,
        before_scene=before,
        after_scene=after,
    )


@dataclass(frozen=True)
class DistractorRange:
    """Per-pair distractor sampling bounds."""

    max_shift: int = 0
    gain_lo: float = 1.0
    gain_hi: float = 1.0
    noise_sigma: float = 0.0

    @classmethod
    def for_magnitude(cls, k: int, noise_sigma: float = 0.05) -> "DistractorRange":
        """Magnitude k: shift <= k, gain in [1 - 0.2k, 1 + 0.25k] clipped to [0.5, 1.5]."""
        if k == 0:
            return cls()
        return cls(k, max(0.5, 1 - 0.2 * k), min(1.5, 1 + 0.25 * k), noise_sigma)

    def sample(self, rng) -> DistractorConfig:
        s = self.max_shift
        shift = tuple(int(v) for v in rng.integers(-s, s + 1, size=2)) if s else (0, 0)
        gain = float(np.exp(rng.uniform(np.log(self.gain_lo), np.log(self.gain_hi))))
        gain = min(max(gain, self.gain_lo), self.gain_hi)
        return DistractorConfig(shift, gain, self.noise_sigma, int(rng.integers(2**31)))


MODERATE = DistractorRange(1, 0.8, 1.25, 0.05)
HIGH = DistractorRange(2, 0.6, 1.5, 0.05)


def generate_dataset(
    count: int,
    seed: int,
    change_mix: Sequence[str] = CHANGE_TYPES,
    distractors: DistractorRange = MODERATE,
    grid_size: int = DEFAULT_GRID,
    channels: int = DEFAULT_CHANNELS,
) -> list:
    """Pair i cycles through ``change_mix``; all randomness derives from (seed, i)."""
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        cfg = distractors.sample(rng)
        pair_seed = int(rng.integers(2**62))
        out.append(generate_pair(pair_seed, grid_size, change_mix[i % len(change_mix)], cfg, channels))
    return out
