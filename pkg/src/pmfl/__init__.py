"""Simulator for federated, meta-federated and partial meta-federated learning."""

from __future__ import annotations

from .autodiff import BACKEND
from .data import TaskDataset, TaskFamilySpec, build_silos, generate_task_family, load_csv, split
from .errors import (
    ConfigError,
    DataError,
    EvaluationError,
    ParseError,
    PartitionError,
    PMFLError,
    ProtocolError,
    SplitError,
    StateError,
)
from .experiment import ComparisonTable, ExperimentConfig, emit_outputs, run_client_count_ablation, run_experiment
from .metrics import EvalReport, confusion_at, rates, roc_auc, youden_optimal
from .model import ModelSpec, PartitionMask, init_params, partition_mask

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ComparisonTable",
    "ConfigError",
    "DataError",
    "EvalReport",
    "EvaluationError",
    "ExperimentConfig",
    "ModelSpec",
    "PMFLError",
    "ParseError",
    "PartitionError",
    "PartitionMask",
    "ProtocolError",
    "SplitError",
    "StateError",
    "TaskDataset",
    "TaskFamilySpec",
    "build_silos",
    "confusion_at",
    "emit_outputs",
    "generate_task_family",
    "init_params",
    "load_csv",
    "partition_mask",
    "rates",
    "roc_auc",
    "run_client_count_ablation",
    "run_experiment",
    "split",
    "youden_optimal",
]
