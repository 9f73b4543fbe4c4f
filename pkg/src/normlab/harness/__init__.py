"""Datasets, training loop, experiments and CLI."""

from .config import NormSpec, StatDiffConfig, SweepConfig, SyntheticSpec, TrainConfig, from_dict, load_config
from .data import Cifar10Set, load_cifar10, synthetic_dataset
from .experiments import SweepResult, run_singularity_sweep, run_statdiff_trace
from .train import FixedStats, RunResult, build_model, sample_fixed_stats, train
