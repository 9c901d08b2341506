"""Run configuration: a TOML file of (possibly dotted) keys plus CLI overrides."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..numerics import resolve_dtype
from ..optimizers import OptimizerSpec
from ..reader import ReaderBudget, ToyStackParams
from ..ttt import TttLayerParams

DEFAULT_MATCHED_NORM = 0.1386  # per-step update norm for the matched-norm statistics
DEFAULT_FPS = 1.0

U64_MAX = 2**64 - 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TttSettings:
    """Slow-weight initialization of the TTT layer (not trained here)."""

    heads: int = 2
    hidden: int = 256
    base_lr: float = 0.01
    theta_noise: float = 0.02
    ln_gain: float = 0.25
    init_std: float = 0.02
    lr_w_scale: float = 0.0
    gate_b: float = 0.0
    activation: str = "gelu"


@dataclass(frozen=True)
class StreamConfig:
    dim: int = 64
    tokens_per_frame: int = 16
    audio_per_frame: int = 0
    frame_rate: float = DEFAULT_FPS  # metadata only
    batch_size: int = 32
    memory_budget: int = 256
    frames: int = 64
    seed: int = 0
    precision: str = "f64"
    token_std: float = 1.0
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    reader_chunk: int = 64
    reader_avg_tokens: int = 64
    stack_layers: int = 4
    stack_heads: int = 4
    stack_vocab: int = 128
    ttt: TttSettings = field(default_factory=TttSettings)

    def __post_init__(self):
        for name in ("dim", "tokens_per_frame", "batch_size", "memory_budget", "reader_chunk",
                     "reader_avg_tokens", "stack_layers", "stack_heads", "stack_vocab"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.frames < 0 or self.audio_per_frame < 0:
            raise ConfigError("frames and audio_per_frame must be >= 0")
        if not 0 <= self.seed <= U64_MAX:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if self.dim % self.ttt.heads or self.dim % self.stack_heads:
            raise ConfigError("dim must be divisible by the TTT and stack head counts")

    @property
    def dtype(self) -> np.dtype:
        return resolve_dtype(self.precision)

    def layer(self, seed: int | None = None) -> TttLayerParams:
        t = self.ttt
        return TttLayerParams.near_identity(
            self.dim, t.heads, t.hidden, base_lr=t.base_lr, theta_noise=t.theta_noise,
            lr_w_scale=t.lr_w_scale, gate_b=t.gate_b, ln_gain=t.ln_gain,
            seed=self.seed if seed is None else seed, activation=t.activation,
            init_std=t.init_std, dtype=self.dtype)

    def stack(self, dim: int | None = None) -> ToyStackParams:
        return ToyStackParams.random(self.stack_layers, self.stack_heads, dim or self.dim,
                                     vocab=self.stack_vocab, seed=self.seed)

    def reader_budget(self, memory_len: int, avg_tokens: int | None = None) -> ReaderBudget:
        return ReaderBudget(min(self.reader_chunk, memory_len),
                            min(avg_tokens or self.reader_avg_tokens, memory_len),
                            memory_len, self.stack_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = asdict(self.optimizer)
        return d


# file key -> (section, attribute)
_KEYS = {
    "dim": (None, "dim"),
    "tokens_per_frame": (None, "tokens_per_frame"),
    "audio_per_frame": (None, "audio_per_frame"),
    "frame_rate": (None, "frame_rate"),
    "batch_size": (None, "batch_size"),
    "memory_budget": (None, "memory_budget"),
    "frames": (None, "frames"),
    "seed": (None, "seed"),
    "precision": (None, "precision"),
    "token_std": (None, "token_std"),
    "reader.chunk": (None, "reader_chunk"),
    "reader.avg_tokens": (None, "reader_avg_tokens"),
    "stack.layers": (None, "stack_layers"),
    "stack.heads": (None, "stack_heads"),
    "stack.vocab": (None, "stack_vocab"),
}
_KEYS.update({f"optimizer.{f.name}": ("optimizer", f.name) for f in fields(OptimizerSpec)})
_KEYS.update({f"ttt.{f.name}": ("ttt", f.name) for f in fields(TttSettings)})


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_from_mapping(data: dict, base: StreamConfig | None = None) -> StreamConfig:
    flat = _flatten(data)
    unknown = sorted(set(flat) - set(_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    top, sub = {}, {"optimizer": {}, "ttt": {}}
    for key, value in flat.items():
        section, attr = _KEYS[key]
        (sub[section] if section else top)[attr] = value
    base = base or StreamConfig()
    try:
        opt = replace(base.optimizer, **sub["optimizer"])
        ttt = replace(base.ttt, **sub["ttt"])
        return replace(base, optimizer=opt, ttt=ttt, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, seed: int | None = None, precision: str | None = None) -> StreamConfig:
    data = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
    cfg = config_from_mapping(data)
    over = {}
    if seed is not None:
        over["seed"] = seed
    if precision is not None:
        over["precision"] = precision
    return replace(cfg, **over) if over else cfg


def parse_optimizer(label: str, base: OptimizerSpec | None = None) -> OptimizerSpec:
    """'sgd', 'muon', 'hf', 'hf-mlp-3', 'hf-ln-2' ... Other fields come from ``base``."""
    base = base or OptimizerSpec()
    parts = label.strip().lower().split("-")
    kind = parts[0]
    if kind not in ("sgd", "muon", "hf"):
        raise ConfigError(f"unknown optimizer {label!r}")
    changes = {"kind": kind}
    if kind == "hf":
        if len(parts) > 1:
            changes["curvature"] = parts[1]
        if len(parts) > 2:
            changes["cg_iters"] = int(parts[2])
        if len(parts) > 3:
            raise ConfigError(f"bad optimizer label {label!r}")
    elif len(parts) > 1:
        raise ConfigError(f"bad optimizer label {label!r}")
    try:
        return replace(base, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
