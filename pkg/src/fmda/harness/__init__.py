"""Experiment harness: configuration, protocols, file formats, CLI."""

from .config import ExperimentConfig, emit_config_template, load_experiment_config
from .experiments import (
    Assimilator,
    CycleRecord,
    FlowAssimilator,
    InterpAssimilator,
    OIAssimilator,
    run_cycling,
    run_noise_sweep,
    run_single_step,
)
from .report import read_records_csv, summarize, write_report
from .trajio import load_trajectory, save_trajectory

__all__ = [
    "Assimilator",
    "CycleRecord",
    "ExperimentConfig",
    "FlowAssimilator",
    "InterpAssimilator",
    "OIAssimilator",
    "emit_config_template",
    "load_experiment_config",
    "load_trajectory",
    "read_records_csv",
    "run_cycling",
    "run_noise_sweep",
    "run_single_step",
    "save_trajectory",
    "summarize",
    "write_report",
]
