"""Training harness: configs, datasets, levels, memory reports and the CLI."""

from .config import ConfigError, TrainConfig, load_config, parse_config
from .data import DataError, Dataset, load_dataset
from .levels import apply_level, level_policy
from .memory import MemoryReport, memory_report
from .models import build_model
from .sweep import compare_levels, run_bits_sweep
from .train import MetricsLog, make_run, train

__all__ = [
    "ConfigError", "TrainConfig", "load_config", "parse_config",
    "DataError", "Dataset", "load_dataset",
    "apply_level", "level_policy",
    "MemoryReport", "memory_report",
    "build_model",
    "compare_levels", "run_bits_sweep",
    "MetricsLog", "make_run", "train",
]
