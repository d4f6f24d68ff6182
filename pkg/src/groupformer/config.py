"""Configuration records and the flat ``key = value`` config file format.

Every config dataclass validates itself on construction. :class:`RunConfig`
bundles them under one flat key namespace so a single text file (plus
command-line overrides) can drive the whole pipeline.
"""

from __future__ import annotations

import dataclasses
import os
import zlib
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Iterable, Mapping, Optional

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value or unknown key."""


class DataError(ValueError):
    """Input data violates a format or range contract."""


class NumericAbort(RuntimeError):
    """A computation produced non-finite values and was stopped."""

    def __init__(self, message: str, payload: Any = None):
        super().__init__(message)
        self.payload = payload


@dataclass(frozen=True)
class DomainConfig:
    L: float = 300.0
    Wd: float = 20.0
    max_slots: int = 10
    hist_len: int = 20
    pred_len: int = 10
    stride: int = 1
    dt: float = 0.2
    len_cap: float = 20.0
    wid_cap: float = 4.0

    def __post_init__(self):
        if not (self.L > 0 and self.Wd > 0 and self.dt > 0):
            raise ConfigError("L, Wd and dt must be positive")
        if self.max_slots < 1:
            raise ConfigError("max_slots must be >= 1")
        if self.hist_len < 2:
            raise ConfigError("hist_len must be >= 2")
        if self.pred_len < 1:
            raise ConfigError("pred_len must be >= 1")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if not (self.len_cap > 0 and self.wid_cap > 0):
            raise ConfigError("len_cap and wid_cap must be positive")

    @property
    def n_frames(self) -> int:
        return self.hist_len + self.pred_len

    @property
    def raw_dt(self) -> float:
        """Seconds between raw frames."""
        return self.dt / self.stride

    @property
    def window_raw_frames(self) -> int:
        return self.n_frames * self.stride


@dataclass(frozen=True)
class SynConfig:
    lanes: int = 3
    lane_width: float = 3.5
    road_len: float = 3000.0
    dt_raw: float = 0.2
    v_free: float = 25.0
    min_gap: float = 2.0
    reaction: float = 1.0
    spawn_rate: float = 0.12
    lane_change_prob: float = 0.05
    speed_spread: float = 0.35
    seed: int = 0

    def __post_init__(self):
        positive = ("lanes", "lane_width", "road_len", "dt_raw", "v_free", "min_gap", "reaction")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.spawn_rate < 0:
            raise ConfigError("spawn_rate must be >= 0")
        if not 0.0 <= self.lane_change_prob <= 1.0:
            raise ConfigError("lane_change_prob must be in [0, 1]")
        if not 0.0 <= self.speed_spread < 1.0:
            raise ConfigError("speed_spread must be in [0, 1)")


@dataclass(frozen=True)
class NoiseConfig:
    mask_rate: float = 0.15
    span_lambda: float = 3.0
    p_mask: float = 0.5
    p_swap: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_rate < 1.0:
            raise ConfigError("mask_rate must be in [0, 1)")
        if not self.span_lambda > 0:
            raise ConfigError("span_lambda must be positive")
        for name in ("p_mask", "p_swap"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc: int = 2
    n_dec: int = 2
    d_ff: int = 0  # 0 means 2 * d_model
    max_slots: int = 10
    hist_len: int = 20
    pred_len: int = 10
    dropout: float = 0.0
    paper_cross_wiring: bool = False
    residual_output: bool = True

    def __post_init__(self):
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 2 * self.d_model)
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError("d_model must be a positive multiple of n_heads")
        if self.n_enc < 0 or self.n_dec < 1 or self.d_ff < 1:
            raise ConfigError("need n_enc >= 0, n_dec >= 1, d_ff >= 1")
        if self.max_slots < 1 or self.hist_len < 1 or self.pred_len < 1:
            raise ConfigError("max_slots, hist_len and pred_len must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def token_dim(self) -> int:
        return 4 * self.max_slots

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    warmup_steps: int = 4000
    total_steps: int = 404000
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 1.0
    aux_denoise_loss: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("need 0 <= warmup_steps < total_steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")


@dataclass(frozen=True)
class PresenceRule:
    eps_w: float = 0.05
    eps_h: float = 0.05

    def __post_init__(self):
        if not (0 < self.eps_w < 1 and 0 < self.eps_h < 1):
            raise ConfigError("presence thresholds must lie in (0, 1)")


def rng_stream(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for one named purpose derived from a root seed."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(purpose.encode())])


def stream_seed(seed: int, purpose: str) -> int:
    return int(rng_stream(seed, purpose).integers(0, 2**31 - 1))


# Flat key namespace. Keys shared by several records (max_slots, hist_len,
# pred_len, seed) appear once and are fanned out by RunConfig.
_SECTIONS = {
    "domain": DomainConfig,
    "syn": SynConfig,
    "noise": NoiseConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "presence": PresenceRule,
}

_EXTRA_DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "duration": 600.0,
    "test_frac": 0.2,
    "loops": 20,
    "ft_steps": 1000,
    "ft_warmup_steps": 100,
    "ft_base_lr": 1e-4,
    "max_train_samples": 0,
    "figures": False,
    "site": "synthetic",
}


def _all_defaults() -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for cls in _SECTIONS.values():
        for f in fields(cls):
            if f.name not in out:
                out[f.name] = f.default
    out.update(_EXTRA_DEFAULTS)
    return out


VALID_KEYS = tuple(sorted(_all_defaults()))
SEED_ENV = "GROUPFORMER_SEED"


def _coerce(key: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    return text


def parse_config_text(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class RunConfig:
    """Merged, flat view of every component config."""

    values: Mapping[str, Any] = field(default_factory=_all_defaults)

    @classmethod
    def build(
        cls,
        file_values: Optional[Mapping[str, Any]] = None,
        overrides: Optional[Mapping[str, Any]] = None,
        env: Optional[Mapping[str, str]] = None,
        seed: Optional[int] = None,
    ) -> "RunConfig":
        """Layer defaults < file < env seed < flag overrides < ``--seed``."""
        defaults = _all_defaults()
        merged = dict(defaults)
        env_layer = {}
        if env and env.get(SEED_ENV):
            env_layer = {"seed": env[SEED_ENV]}
        for layer in (file_values or {}, env_layer, overrides or {}):
            unknown = sorted(set(layer) - set(defaults))
            if unknown:
                raise ConfigError(
                    f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(VALID_KEYS)}"
                )
            for key, raw in layer.items():
                merged[key] = _coerce(key, raw, defaults[key])
        if seed is not None:
            merged["seed"] = int(seed)
        run = cls(values=merged)
        run.validate()
        return run

    @classmethod
    def from_file(cls, path: Optional[str], overrides=None, seed=None) -> "RunConfig":
        file_values = {}
        if path:
            with open(path, encoding="utf-8") as fh:
                file_values = parse_config_text(fh.read())
        return cls.build(file_values, overrides, env=os.environ, seed=seed)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def _section(self, cls):
        kwargs = {f.name: self.values[f.name] for f in fields(cls)}
        return cls(**kwargs)

    def validate(self) -> None:
        for cls in _SECTIONS.values():
            try:
                self._section(cls)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc)) from None

    @property
    def domain(self) -> DomainConfig:
        return self._section(DomainConfig)

    @property
    def syn(self) -> SynConfig:
        return dataclasses.replace(self._section(SynConfig), seed=stream_seed(self["seed"], "data"))

    @property
    def noise(self) -> NoiseConfig:
        return dataclasses.replace(self._section(NoiseConfig), seed=stream_seed(self["seed"], "noise"))

    @property
    def model(self) -> ModelConfig:
        return self._section(ModelConfig)

    @property
    def train(self) -> TrainConfig:
        return self._section(TrainConfig)

    @property
    def presence(self) -> PresenceRule:
        return self._section(PresenceRule)

    def to_text(self, keys: Optional[Iterable[str]] = None) -> str:
        keys = sorted(keys) if keys is not None else sorted(self.values)
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in keys)

    def as_dict(self) -> Dict[str, Any]:
        return dict(sorted(self.values.items()))


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
