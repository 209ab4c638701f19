"""Configuration, training orchestration, experiment suites and the CLI."""

from .config import ConfigError, ExperimentConfig, parse_config, serialize_config, with_overrides
from .experiments import ablate_horizon, bench_inference, predict_rollout
from .train import RunReport, TrainingDiverged, train

__all__ = [
    "ConfigError", "ExperimentConfig", "RunReport", "TrainingDiverged", "ablate_horizon",
    "bench_inference", "parse_config", "predict_rollout", "serialize_config", "train",
    "with_overrides",
]
