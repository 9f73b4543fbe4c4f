"""The fixed-statistics accuracy sweep and the StatDiff trace."""

import csv
import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import spearmanr

from ..diagnostics import StatDiffReport, dump_json, summary_dict, write_statdiff_csv
from .config import NormSpec, StatDiffConfig, SweepConfig, TrainConfig, to_dict
from .data import Cifar10Set
from .train import RunResult, fmt, load_data, train, write_run

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("sigma_mu", "sigma_sigma", "seed", "accuracy", "failed", "distance")


@dataclass(frozen=True)
class SweepResult:
    sigma_mu: float
    sigma_sigma: float
    seed: int
    accuracy: float
    failed: bool
    diverged: bool = False

    @property
    def distance(self) -> float:
        return math.hypot(self.sigma_mu, self.sigma_sigma)


def cell_config(base: TrainConfig, sigma_mu: float, sigma_sigma: float, seed: int) -> TrainConfig:
    norm = dataclasses.replace(base.norm, kind="fixed", sigma_mu=sigma_mu, sigma_sigma=sigma_sigma)
    return dataclasses.replace(base, model="plain4", norm=norm, seed=seed)


_worker_data: Optional[Tuple[Cifar10Set, Cifar10Set]] = None


def _init_worker(base: TrainConfig):
    global _worker_data
    _worker_data = load_data(base)


def _run_cell(args) -> SweepResult:
    cfg, threshold, data = args
    run = train(cfg, data=data if data is not None else _worker_data)
    acc = run.final_test_acc
    return SweepResult(cfg.norm.sigma_mu, cfg.norm.sigma_sigma, cfg.seed, acc, acc < threshold, run.diverged)


def run_singularity_sweep(cfg: SweepConfig, out_dir=None,
                          data: Optional[Tuple[Cifar10Set, Cifar10Set]] = None) -> List[SweepResult]:
    """Train the 4-layer net once per (sigma_mu, sigma_sigma, seed) with frozen target statistics.

    A diverged run counts as accuracy 0 and therefore as a failure. Results
    come back sorted by (sigma_mu, sigma_sigma, seed) whatever the worker
    count.
    """
    cells = [cell_config(cfg.base, m, s, seed)
             for m in cfg.sigma_mu_grid for s in cfg.sigma_sigma_grid for seed in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers, initializer=_init_worker if data is None else None,
                                 initargs=(cfg.base,) if data is None else ()) as pool:
            results = list(pool.map(_run_cell, [(c, cfg.threshold, data) for c in cells]))
    else:
        data = data if data is not None else load_data(cfg.base)
        results = []
        for c in cells:
            r = _run_cell((c, cfg.threshold, data))
            log.info("cell sigma_mu=%g sigma_sigma=%g seed=%d acc=%.4f", r.sigma_mu, r.sigma_sigma, r.seed, r.accuracy)
            results.append(r)
    results.sort(key=lambda r: (r.sigma_mu, r.sigma_sigma, r.seed))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(out / "sweep.csv", results)
        dump_json(out / "summary.json", {"config": to_dict(cfg), **sweep_summary(results, cfg.threshold)})
    return results


def write_sweep_csv(path, results: List[SweepResult]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in results:
            w.writerow([fmt(r.sigma_mu), fmt(r.sigma_sigma), r.seed, fmt(r.accuracy), int(r.failed), fmt(r.distance)])


def cell_means(results: List[SweepResult]) -> Dict[Tuple[float, float], float]:
    groups: Dict[Tuple[float, float], List[float]] = {}
    for r in results:
        groups.setdefault((r.sigma_mu, r.sigma_sigma), []).append(r.accuracy)
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


def sweep_summary(results: List[SweepResult], threshold: float) -> dict:
    means = cell_means(results)
    keys = list(means)
    dist = [math.hypot(*k) for k in keys]
    acc = [means[k] for k in keys]
    rho = float(spearmanr(dist, acc).statistic) if len(keys) > 2 and np.ptp(acc) > 0 else float("nan")
    return {
        "threshold": threshold,
        "cells": [{"sigma_mu": k[0], "sigma_sigma": k[1], "mean_accuracy": means[k]} for k in keys],
        "failures": sum(r.failed for r in results),
        "spearman_accuracy_vs_distance": rho,
    }


def run_statdiff_trace(cfg: StatDiffConfig, out_dir=None, data: Optional[Tuple[Cifar10Set, Cifar10Set]] = None,
                       extra: Optional[List[NormSpec]] = None) -> Dict[str, RunResult]:
    """Train once per normalizer with channel statistics recorded after every normalized conv.

    Returns runs keyed by normalizer label (``gn``, ``ln+ws`` ...). ``extra``
    adds configurations such as a BN control. Each run writes its own
    ``statdiff.csv`` under ``out_dir/<label>/``.
    """
    data = data if data is not None else load_data(cfg.base)
    runs: Dict[str, RunResult] = {}
    for spec in list(cfg.normalizers) + list(extra or []):
        run_cfg = dataclasses.replace(cfg.base, norm=spec, record_statdiff=True)
        run = train(run_cfg, data=data)
        runs[spec.label] = run
        log.info("trace %s: final mean statdiff %.4f", spec.label,
                 run.statdiff[-1].mean_over_groups if run.statdiff else float("nan"))
        if out_dir is not None:
            write_run(run, Path(out_dir) / spec.label)
    if out_dir is not None:
        dump_json(Path(out_dir) / "summary.json",
                  {label: summary_dict(run.statdiff) for label, run in runs.items()})
    return runs


def epoch_means(reports: List[StatDiffReport], over: str = "groups") -> np.ndarray:
    if over == "groups":
        return np.array([r.mean_over_groups for r in reports])
    return np.array([r.mean_over_layers for r in reports])
