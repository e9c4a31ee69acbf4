"""Run configuration: one YAML document with explicit seeds for every stochastic stage.

Every section maps onto a dataclass; unknown keys, wrong types and out-of-range values
raise :class:`ConfigError` before any work starts.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ragdp.envs import ENVS

NOISE_MIXED = "mixed"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_episodes: int = 200
    seed: int = 0
    # a jitter scale, or "mixed": 2/3 clean episodes and 1/3 at mixed_noise
    noise_level: float | str = 0.0
    mixed_noise: float = 0.3

    def validate(self) -> None:
        if self.n_episodes < 1:
            raise ConfigError("data.n_episodes must be >= 1")
        if self.seed < 0:
            raise ConfigError("data.seed must be >= 0")
        if isinstance(self.noise_level, str):
            if self.noise_level != NOISE_MIXED:
                raise ConfigError(f"data.noise_level must be a number or {NOISE_MIXED!r}")
        elif self.noise_level < 0:
            raise ConfigError("data.noise_level must be >= 0")


@dataclass(frozen=True)
class Horizons:
    T_o: int = 2
    T_p: int = 16
    T_a: int = 8

    def validate(self) -> None:
        if min(self.T_o, self.T_p, self.T_a) < 1:
            raise ConfigError("horizons must be positive")
        if self.T_a > self.T_p:
            raise ConfigError(f"horizons.T_a ({self.T_a}) cannot exceed T_p ({self.T_p})")


@dataclass(frozen=True)
class VpModel:
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2

    def validate(self) -> None:
        if self.T < 1:
            raise ConfigError("models.vp.T must be >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("models.vp needs 0 < beta_start <= beta_end < 1")


@dataclass(frozen=True)
class VeModel:
    T: int = 40
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0

    def validate(self) -> None:
        if self.T < 1:
            raise ConfigError("models.ve.T must be >= 1")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("models.ve needs 0 < sigma_min < sigma_max")
        if self.rho <= 0:
            raise ConfigError("models.ve.rho must be positive")


@dataclass(frozen=True)
class Models:
    vp: VpModel | None = field(default_factory=VpModel)
    ve: VeModel | None = field(default_factory=VeModel)

    def validate(self) -> None:
        if self.vp is None and self.ve is None:
            raise ConfigError("models needs at least one of vp, ve")
        for m in (self.vp, self.ve):
            if m is not None:
                m.validate()

    def kinds(self) -> list[str]:
        return [k for k in ("vp", "ve") if getattr(self, k) is not None]


@dataclass(frozen=True)
class NetworkConfig:
    hidden: tuple[int, ...] = (256, 256, 256)
    embed_dim: int = 32
    init_head_scale: float = 0.1

    def validate(self) -> None:
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("network.hidden must list positive widths")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ConfigError("network.embed_dim must be even and >= 2")


@dataclass(frozen=True)
class TrainSection:
    seeds: tuple[int, ...] = (0, 1, 2)
    epochs: int = 60
    batch_size: int = 256
    learning_rate: float = 1e-3
    grad_clip: float = 1.0

    def validate(self) -> None:
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("train.seeds must be a non-empty list of distinct seeds")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ConfigError("train.epochs, batch_size, learning_rate and grad_clip must be positive")


@dataclass(frozen=True)
class EvalSection:
    n_seeds: int = 56
    seed_start: int = 1_000_000_000
    max_steps: int = 300
    policy_seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        if self.n_seeds < 1 or self.max_steps < 1 or self.workers < 1:
            raise ConfigError("eval.n_seeds, max_steps and workers must be >= 1")
        if self.seed_start < 0:
            raise ConfigError("eval.seed_start must be >= 0")

    def seeds(self) -> list[int]:
        return list(range(self.seed_start, self.seed_start + self.n_seeds))


@dataclass(frozen=True)
class SweepSection:
    vp_ancestral_steps: tuple[int, ...] = (25, 10, 5)
    vp_fast_steps: tuple[int, ...] = (25, 10, 5)
    ragdp_vp_r: tuple[float, ...] = (0.75, 0.9, 0.95)
    ragdp_vp_samplers: tuple[str, ...] = ("vp-ancestral",)
    ve_steps: tuple[int, ...] = (10, 4, 2)
    ragdp_ve_r: tuple[float, ...] = (0.5, 0.75, 0.875, 0.9, 0.95)

    def validate(self, models: Models) -> None:
        for name in ("ragdp_vp_r", "ragdp_ve_r"):
            if any(not 0.0 <= r <= 1.0 for r in getattr(self, name)):
                raise ConfigError(f"sweep.{name} values must lie in [0, 1]")
        for s in self.ragdp_vp_samplers:
            if s not in ("vp-ancestral", "vp-fast"):
                raise ConfigError(f"sweep.ragdp_vp_samplers: unknown sampler {s!r}")
        if models.vp is not None:
            for name in ("vp_ancestral_steps", "vp_fast_steps"):
                if any(not 1 <= s <= models.vp.T for s in getattr(self, name)):
                    raise ConfigError(f"sweep.{name} values must lie in [1, {models.vp.T}]")
        if models.ve is not None:
            if any(not 1 <= s <= models.ve.T for s in self.ve_steps):
                raise ConfigError(f"sweep.ve_steps values must lie in [1, {models.ve.T}]")
            if any(r == 1.0 for r in self.ragdp_ve_r):
                raise ConfigError("sweep.ragdp_ve_r cannot contain 1: RAGDP-VE always denoises")


@dataclass(frozen=True)
class RunConfig:
    task: str = "point_reach"
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    horizons: Horizons = field(default_factory=Horizons)
    models: Models = field(default_factory=Models)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def validate(self) -> "RunConfig":
        if self.task not in ENVS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {sorted(ENVS)}")
        self.data.validate()
        self.horizons.validate()
        self.models.validate()
        self.network.validate()
        self.train.validate()
        self.eval.validate()
        self.sweep.validate(self.models)
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    """Check ``value`` against the annotation ``tp`` and convert lists to tuples."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(arg, value, where)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if len(errors) == 1 else f"{where}: invalid value {value!r}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported annotation {tp!r}")


def _build(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(map(str, unknown))}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in raw.items()}
    return cls(**kwargs)


def from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "").validate()


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return from_dict(raw or {})


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
