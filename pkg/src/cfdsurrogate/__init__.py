"""Data-parallel LSTM surrogate for transient flow fields, built on numpy."""

from .bench import BenchTable, bench, layout_delta_matrix, speedup_table
from .checkpoint import CheckpointFormatError
from .collective import Layout, LinkCostModel, WorkerGroup, rendezvous, ring_allreduce, simulate_allreduce_time
from .datagen import ComponentScaler, Dataset, build_dataset, normalize, read_dataset, write_dataset
from .estimator import Seq2SeqSurrogate
from .launch import WorkerFailure, launch
from .metrics import MetricsReport, hist_r2, pearson, report, rmse, spearman
from .model import ModelDims, backward, forward, init_params
from .optim import AdamState, adam_step, mae_loss
from .training import TrainConfig, TrainingLog, evaluate, run_training

__version__ = "0.1.0"

__all__ = [
    "BenchTable",
    "bench",
    "layout_delta_matrix",
    "speedup_table",
    "CheckpointFormatError",
    "Layout",
    "LinkCostModel",
    "WorkerGroup",
    "rendezvous",
    "ring_allreduce",
    "simulate_allreduce_time",
    "ComponentScaler",
    "Dataset",
    "build_dataset",
    "normalize",
    "read_dataset",
    "write_dataset",
    "Seq2SeqSurrogate",
    "WorkerFailure",
    "launch",
    "MetricsReport",
    "hist_r2",
    "pearson",
    "report",
    "rmse",
    "spearman",
    "ModelDims",
    "backward",
    "forward",
    "init_params",
    "AdamState",
    "adam_step",
    "mae_loss",
    "TrainConfig",
    "TrainingLog",
    "evaluate",
    "run_training",
]
