"""Experiment configuration and its flat ``key = value`` file format.

Keys are dotted paths into :class:`ExperimentConfig`, e.g.::

    method = rt-hcp
    training_budget = 200000
    plant.dt = 0.02
    plant.params.m_p = 0.024
    delay.steps = 2
    cem.population = 500

Blank lines and ``#`` comments are ignored. Every key is optional; unknown
keys and malformed values are errors that name the offending line.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..pendulum import A_MAX, PhysicalParams, PlantConfig

METHODS = ("rt-hcp", "rt-mpc-baseline", "td3")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DelaySettings:
    mode: str = "fixed"            # fixed | measured
    steps: int = 2                 # latency d in ticks (fixed mode)
    H_e: int = 0                   # 0 = derive from the delay
    budget_check: bool = True
    ms_per_horizon_step: float = 7.2   # inference-time model used by the horizon ablation
    measure_trials: int = 20


@dataclass(frozen=True)
class CemSettings:
    iterations: int = 3
    population: int = 500
    policy_candidates: int = 50
    elite_count: int = 50
    horizon: int = 5
    baseline_horizon: int = 15
    init_std: float = 0.5 * A_MAX
    min_std: float = 0.05 * A_MAX
    policy_noise: float = 0.1 * A_MAX
    gamma: float = 0.99
    terminal_penalty: float = 1.0


@dataclass(frozen=True)
class AgentSettings:
    gamma: float = 0.99
    tau: float = 0.005
    policy_noise: float = 0.2 * A_MAX
    noise_clip: float = 0.5 * A_MAX
    policy_delay: int = 2
    hidden: int = 64
    hidden_layers: int = 2
    lr: float = 1e-3
    batch_size: int = 256
    exploration_std: float = 0.1 * A_MAX
    random_steps: int = 5000       # uniform-random warm-up, model-free method only
    updates_before_imagination: int = 200
    updates_after_imagination: int = 200
    real_fraction: float = 0.5
    imagination_rollouts: int = 64
    imagination_horizon: int = 10
    im_capacity: int = 100_000


@dataclass(frozen=True)
class ModelSettings:
    hidden: int = 16
    hidden_layers: int = 3
    lr: float = 1e-3
    batch_size: int = 256
    epochs_per_phase: int = 5
    max_batches: int = 50
    prior_substeps: int = 1        # RK4 steps per tick inside the residual prior
    real_capacity: int = 200_000


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "rt-hcp"
    seed: int = 0
    training_budget: int = 200_000
    offline_period: int = 500
    eval_every: int = 10_000
    eval_episodes: int = 10
    episode_steps: int = 500
    stop_after_successes: int = 0  # 0 = always spend the whole budget
    plant: PlantConfig = field(default_factory=PlantConfig)
    delay: DelaySettings = field(default_factory=DelaySettings)
    cem: CemSettings = field(default_factory=CemSettings)
    agent: AgentSettings = field(default_factory=AgentSettings)
    model: ModelSettings = field(default_factory=ModelSettings)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.training_budget < 0:
            raise ConfigError("training_budget must be >= 0")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.offline_period < 1 or self.eval_every < 1 or self.episode_steps < 1:
            raise ConfigError("offline_period, eval_every and episode_steps must be >= 1")
        if self.delay.mode not in ("fixed", "measured"):
            raise ConfigError(f"delay.mode must be fixed or measured, got {self.delay.mode!r}")


# -- flat key/value mapping ---------------------------------------------------

def _flatten(obj, prefix: str = "") -> dict[str, object]:
    out: dict[str, object] = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _schema() -> dict[str, type]:
    return {k: type(v) for k, v in _flatten(ExperimentConfig()).items()}


def _coerce(raw: str, kind: type, where: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw.replace("_", ""))
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind.__name__}") from None


def _build(cls, values: dict[str, object], prefix: str = ""):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        default = getattr(cls(), f.name)
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), values, key + ".")
        elif key in values:
            kwargs[f.name] = values[key]
    return cls(**kwargs)


def config_from_mapping(values: dict[str, object]) -> ExperimentConfig:
    schema = _schema()
    unknown = sorted(set(values) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    try:
        return _build(ExperimentConfig, values)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    schema = _schema()
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in schema:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[key] = _coerce(raw, schema[key], where)
    try:
        return config_from_mapping(values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config_text(text, str(path))


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, v in _flatten(cfg).items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: ExperimentConfig, **values) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-key overrides, e.g. ``**{"cem.horizon": 15}``."""
    flat = _flatten(cfg)
    flat.update(values)
    return config_from_mapping(flat)


__all__ = [
    "AgentSettings", "CemSettings", "ConfigError", "DelaySettings", "ExperimentConfig",
    "METHODS", "ModelSettings", "PhysicalParams", "PlantConfig", "parse_config",
    "parse_config_text", "serialize_config", "with_overrides",
]
