"""Continual offline RL with Decision Transformers: MH-DT, LoRA-DT and regularization baselines."""

from .config import RunConfig, load_config, parse_config
from .dt_core import ConfigError, DTConfig, DTModel, WindowBatch, rollout
from .lora_dt import LoRADT, memory_footprint
from .metrics import PerformanceMatrix, all_metrics
from .mh_dt import MHDT
from .runner import train_run, write_run

__all__ = [
    "ConfigError",
    "DTConfig",
    "DTModel",
    "LoRADT",
    "MHDT",
    "PerformanceMatrix",
    "RunConfig",
    "WindowBatch",
    "all_metrics",
    "load_config",
    "memory_footprint",
    "parse_config",
    "rollout",
    "train_run",
    "write_run",
]
