"""Training configuration, named presets and the key=value config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ContractError


@dataclass
class TrainConfig:
    d_model: int = 512
    word_dim: int = 300
    heads: int = 8
    layers: int = 2
    alpha: float = 0.003
    lambda_d: float = 0.03
    lambda_c: float = 0.05
    tau: float = 0.5
    batch_size: int = 32
    lr: float = 1e-3
    max_iters: int = 2000
    seed: int = 0
    mlp: bool = True
    dirl: bool = True
    ccr: bool = True
    subtraction: bool = False
    tied_attention: bool = True
    corr_mode: str = "flatten"
    cosine_sim: bool = False
    caption_sum: bool = False
    dropout: float = 0.0
    pos_init: float = 0.02  # std of the visual positional table at init
    roll_augment: bool = False
    clip_norm: float = 0.0
    max_len: int = 12
    ckpt_every: int = 0

    def validate(self) -> "TrainConfig":
        if self.lr <= 0 or self.tau <= 0:
            raise ContractError("lr and tau must be positive")
        if self.lambda_d < 0 or self.lambda_c < 0 or self.alpha < 0:
            raise ContractError("alpha, lambda_d and lambda_c must be >= 0")
        if self.d_model % self.heads:
            raise ContractError(f"heads={self.heads} must divide d_model={self.d_model}")
        if self.batch_size < 1 or self.max_iters < 0 or self.layers < 1:
            raise ContractError("batch_size and layers must be >= 1, max_iters >= 0")
        if self.pos_init < 0:
            raise ContractError("pos_init must be >= 0")
        if self.corr_mode not in ("flatten", "pool"):
            raise ContractError(f"corr_mode must be 'flatten' or 'pool', got {self.corr_mode!r}")
        if not 0 <= self.dropout < 1:
            raise ContractError("dropout must lie in [0, 1)")
        return self

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return apply_overrides(cls(), d)


PRESETS = {
    "clevr-change": dict(batch_size=128, lr=2e-4, lambda_d=0.5, lambda_c=0.3, max_iters=10000),
    "clevr-dc": dict(batch_size=128, lr=2e-4, lambda_d=0.03, lambda_c=0.05, max_iters=10000),
    "spot": dict(batch_size=64, lr=1e-4, lambda_d=0.5, lambda_c=0.004, max_iters=10000),
    "ier": dict(batch_size=16, lr=1e-4, lambda_d=0.001, lambda_c=0.05, max_iters=10000),
    "synthetic": dict(
        batch_size=32, lr=1e-3, lambda_d=0.03, lambda_c=0.05,
        d_model=32, word_dim=32, heads=8, layers=2, dropout=0.1, max_iters=8000,
    ),
}
# same model on a shorter budget, for the 4-variant x 3-seed ablation
PRESETS["synthetic-ablation"] = dict(PRESETS["synthetic"], max_iters=3000)


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return apply_overrides(TrainConfig(), {**PRESETS[name], **overrides})


def _coerce(kind, raw):
    if not isinstance(raw, str):
        return kind(raw)
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw.strip())


def apply_overrides(cfg: TrainConfig, values: dict) -> TrainConfig:
    types = {f.name: type(f.default) for f in fields(TrainConfig)}
    updates = {}
    for key, raw in values.items():
        if key == "preset":
            continue
        if key not in types:
            raise ContractError(f"unknown config key {key!r}")
        try:
            updates[key] = _coerce(types[key], raw)
        except ValueError as exc:
            raise ContractError(f"bad value for {key}: {exc}") from None
    return dataclasses.replace(cfg, **updates).validate()


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    """Read a key=value file; a ``preset`` key selects the base bundle."""
    values = parse_config_text(Path(path).read_text())
    base = preset(values["preset"]) if "preset" in values else TrainConfig()
    return apply_overrides(base, {**values, **(overrides or {})})


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
