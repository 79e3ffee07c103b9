"""Training configuration and its flat ``key = value`` text format.

Lines are ``key = value``; ``#`` starts a comment.  Lists are comma
separated.  Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import enum
import typing
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


class Mode(str, enum.Enum):
    GRPO = "GRPO"
    GRPO_EXTRA = "GRPO+Extra"
    LTE = "LTE"


@dataclass(frozen=True)
class TrainConfig:
    # algorithm
    mode: Mode = Mode.LTE
    seed: int = 0
    steps: int = 300
    batch_size: int = 32
    group_size: int = 8
    lr: float = 5e-4
    clip_eps: float = 0.2
    kl_coef: float = 0.001
    entropy_coef: float = 0.0
    shaping_gamma: float = 0.1
    kl_offpolicy: bool = False
    entropy_offpolicy: bool = False
    inner_epochs: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # rollouts
    temperature: float = 1.0
    max_len: int = 64
    # tasks
    modulus: int = 10
    difficulties: tuple[int, ...] = (1, 2, 3)
    difficulty_weights: tuple[float, ...] = (0.4, 0.3, 0.3)
    train_pool: int = 256
    data_seed: int = 0
    # policy
    window: int = 32
    embed: int = 8
    hidden: int = 128
    init: str = "pretrained"
    init_scale: float = 1.0
    pretrain_steps: int = 3000
    pretrain_batch: int = 64
    pretrain_lr: float = 1e-2
    pretrain_hint_prob: float = 0.7
    pretrain_think_mean: float = 1.0
    pretrain_noise: float = 0.3
    # evaluation and output
    eval_every: int = 50
    eval_k: int = 4
    eval_temperature: float = 0.6
    eval_top_k: int = 0
    eval_top_p: float = 1.0
    eval_per_tier: int = 50
    eval_max_len: int = 64
    checkpoint_every: int = 0
    ema_alpha: float = 0.1
    backend: str = "auto"

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", Mode(self.mode))
        except ValueError:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {[m.value for m in Mode]}") from None
        positive = ["steps", "batch_size", "lr", "temperature", "max_len", "modulus", "train_pool",
                    "window", "embed", "hidden", "inner_epochs", "eval_k", "eval_temperature",
                    "eval_per_tier", "eval_max_len", "shaping_gamma"]
        for name in positive:
            v = getattr(self, name)
            if name == "steps":
                if v < 0:
                    raise ConfigError("steps must be >= 0")
            elif not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ConfigError("clip_eps must lie in (0, 1)")
        for name in ("kl_coef", "entropy_coef", "eval_every", "checkpoint_every",
                     "pretrain_steps", "eval_top_k", "pretrain_think_mean"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.modulus < 2:
            raise ConfigError("modulus must be >= 2")
        if len(self.difficulties) != len(self.difficulty_weights) or not self.difficulties:
            raise ConfigError("difficulties and difficulty_weights must have equal, non-zero length")
        if any(d < 1 for d in self.difficulties) or any(w < 0 for w in self.difficulty_weights):
            raise ConfigError("difficulties must be >= 1 and weights >= 0")
        if sum(self.difficulty_weights) <= 0:
            raise ConfigError("difficulty weights must not all be zero")
        if self.init not in ("pretrained", "random"):
            raise ConfigError("init must be 'pretrained' or 'random'")
        if self.backend not in ("auto", "cython", "python"):
            raise ConfigError("backend must be auto, cython or python")
        if not 0 < self.eval_top_p <= 1:
            raise ConfigError("eval_top_p must lie in (0, 1]")
        if not 0 <= self.pretrain_noise < 1:
            raise ConfigError("pretrain_noise must lie in [0, 1)")
        if not 0 <= self.pretrain_hint_prob <= 1:
            raise ConfigError("pretrain_hint_prob must lie in [0, 1]")
        if not 0 < self.ema_alpha <= 1:
            raise ConfigError("ema_alpha must lie in (0, 1]")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @property
    def kernel_backend(self):
        return None if self.backend == "auto" else self.backend


# LLM-scale values from the reference training setup, kept for documentation parity.
REFERENCE_PRESET = {
    "lr": 1e-6,
    "steps": 300,
    "batch_size": 128,
    "kl_coef": 0.001,
    "clip_eps": 0.2,
    "temperature": 1.0,
    "group_size": 8,
    "max_len": 16384,
}


def _field_types() -> dict:
    return typing.get_type_hints(TrainConfig)


def _parse_value(key: str, raw: str, tp):
    raw = raw.strip()
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is Mode:
            return Mode(raw)
        if tp is str:
            return raw
        origin = typing.get_origin(tp)
        if origin is tuple:
            (elem, _) = typing.get_args(tp)
            return tuple(elem(x.strip()) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"unsupported type for {key}")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, enum.Enum):
        return str(v.value)
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_overrides(pairs: dict) -> dict:
    types = _field_types()
    out = {}
    for key, raw in pairs.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = raw if not isinstance(raw, str) else _parse_value(key, raw, types[key])
    return out


def parse_config_text(text: str) -> dict:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return parse_overrides(pairs)


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = parse_config_text(p.read_text())
    values.update(parse_overrides(overrides or {}))
    return TrainConfig(**values)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def config_dict(cfg: TrainConfig) -> dict:
    return {f.name: format_value(getattr(cfg, f.name)) for f in fields(cfg)}
