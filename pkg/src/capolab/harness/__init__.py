"""Experiment orchestration: configs, training loops, sweeps and summaries."""
from capolab.harness.config import ConfigError, ExperimentConfig, ValueConfig, load_config
from capolab.harness.runner import RunRecord, SeedRecord, evaluate, run_experiment, run_seed
from capolab.harness.summary import mean_se, summarize

__all__ = [
    "ConfigError", "ExperimentConfig", "ValueConfig", "load_config", "RunRecord", "SeedRecord",
    "evaluate", "run_experiment", "run_seed", "mean_se", "summarize",
]
