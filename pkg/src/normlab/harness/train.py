"""Model construction and the training loop."""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from ..diagnostics import StatDiffReport, StatRecorder, dump_json, summary_dict, write_statdiff_csv
from ..errors import DivergedRun
from ..layers import softmax_xent
from ..models import miniresnet, plain4
from ..module import Module
from ..norm import BCNLarge, BCNMicro, BatchNorm2d, ChannelNorm, FixedStatNorm, default_groups
from ..optim import SGD, cosine_lr
from .config import NormSpec, TrainConfig, to_dict
from .data import Cifar10Set, iterate_batches, load_cifar10, synthetic_dataset

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("epoch", "train_err", "test_err")


@dataclass
class FixedStats:
    mu_hat: np.ndarray
    sigma_hat: np.ndarray


def sample_fixed_stats(channels: int, sigma_mu: float, sigma_sigma: float, seed=None) -> FixedStats:
    """Target mean ~ N(0, sigma_mu) and target std = exp(N(0, sigma_sigma)) per channel.

    ``seed`` may be an int or a ``numpy.random.Generator``. Both sigmas are
    standard deviations; zero gives exactly mean 0 and std 1.
    """
    if sigma_mu < 0 or sigma_sigma < 0:
        raise ValueError("sigma_mu and sigma_sigma must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mu_hat = rng.normal(0.0, sigma_mu, size=channels)
    sigma_hat = np.exp(rng.normal(0.0, sigma_sigma, size=channels))
    return FixedStats(mu_hat, sigma_hat)


def norm_factory(spec: NormSpec, rng: Optional[np.random.Generator] = None) -> Optional[Callable[[int], Module]]:
    """Build-one-normalizer callable for the model builders; ``None`` for no normalization."""
    if spec.kind == "none":
        return None
    rng = rng if rng is not None else np.random.default_rng(0)

    def make(c: int) -> Module:
        g = spec.groups or default_groups(c)
        if spec.kind == "bn":
            return BatchNorm2d(c, spec.eps, spec.momentum)
        if spec.kind == "ln":
            return ChannelNorm(c, 1, spec.eps)
        if spec.kind == "gn":
            return ChannelNorm(c, g, spec.eps)
        if spec.kind == "in":
            return ChannelNorm(c, c, spec.eps)
        if spec.kind == "fixed":
            fs = sample_fixed_stats(c, spec.sigma_mu, spec.sigma_sigma, rng)
            return FixedStatNorm(c, fs.mu_hat, fs.sigma_hat, spec.eps, spec.momentum)
        if spec.kind == "bcn-large":
            return BCNLarge(c, g, spec.eps, spec.momentum)
        if spec.kind == "bcn-micro":
            return BCNMicro(c, g, spec.eps, rate=spec.update_rate if spec.update_rate is not None else 0.1)
        raise ValueError(spec.kind)

    return make


def _seeds(seed: int):
    init, fixed, order = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(fixed), np.random.default_rng(order)


def build_model(cfg: TrainConfig, num_classes: int = 10, in_channels: int = 3) -> Module:
    init_rng, fixed_rng, _ = _seeds(cfg.seed)
    factory = norm_factory(cfg.norm, fixed_rng)
    if cfg.model == "plain4":
        return plain4(factory, cfg.width, num_classes, in_channels, ws=cfg.norm.use_ws, rng=init_rng)
    return miniresnet(cfg.depth, factory, num_classes, in_channels, ws=cfg.norm.use_ws, rng=init_rng)


def load_data(cfg: TrainConfig) -> Tuple[Cifar10Set, Cifar10Set]:
    if cfg.dataset == "synthetic":
        train, test = synthetic_dataset(cfg.synthetic)
    else:
        train, test = load_cifar10(cfg.data_dir)
    return train.subset(cfg.train_limit), test.subset(cfg.test_limit)


def evaluate(model: Module, data: Cifar10Set, batch_size: int = 500) -> float:
    """Accuracy in eval mode."""
    was = model.training
    model.eval()
    correct = 0
    try:
        for xb, yb in iterate_batches(data, batch_size):
            correct += int(np.sum(model(xb).argmax(axis=1) == yb))
    finally:
        model.train(was)
    return correct / max(len(data), 1)


@dataclass
class EpochLog:
    epoch: int
    train_err: float
    test_err: float
    loss: float


@dataclass
class RunResult:
    config: TrainConfig
    model: Module
    curves: List[EpochLog] = field(default_factory=list)
    statdiff: List[StatDiffReport] = field(default_factory=list)
    diverged: bool = False
    error: Optional[str] = None
    num_classes: int = 10
    in_channels: int = 3

    @property
    def final_test_acc(self) -> float:
        if self.diverged or not self.curves:
            return 0.0
        return 1.0 - self.curves[-1].test_err

    @property
    def final_train_acc(self) -> float:
        if self.diverged or not self.curves:
            return 0.0
        return 1.0 - self.curves[-1].train_err


def _micro_layers(model: Module) -> List[BCNMicro]:
    return [m for m in model.modules() if isinstance(m, BCNMicro)]


def train(cfg: TrainConfig, out_dir=None, data: Optional[Tuple[Cifar10Set, Cifar10Set]] = None) -> RunResult:
    """Train ``cfg`` to completion; deterministic for a fixed seed.

    A non-finite loss stops the run and marks it diverged instead of raising.
    When ``out_dir`` is given, ``curves.csv``, ``summary.json`` and
    ``checkpoint.npz`` (plus ``statdiff.csv`` when recording) are written.
    """
    train_set, test_set = data if data is not None else load_data(cfg)
    model = build_model(cfg, train_set.num_classes, train_set.images.shape[1])
    _, _, order_rng = _seeds(cfg.seed)
    opt = SGD(model.parameters(), cfg.sgd)
    micro = _micro_layers(model)
    recorder = StatRecorder(model, cfg.record_momentum, cfg.record_tap) if cfg.record_statdiff else None
    result = RunResult(cfg, model, num_classes=train_set.num_classes, in_channels=train_set.images.shape[1])

    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    step = 0
    model.train()
    try:
        for epoch in range(1, cfg.epochs + 1):
            wrong, seen, loss_sum = 0, 0, 0.0
            for xb, yb in iterate_batches(train_set, cfg.batch_size, order_rng, cfg.augment):
                lr = cosine_lr(cfg.sgd.lr, step, total) if cfg.schedule == "cosine" else cfg.sgd.lr
                step += 1
                if cfg.batch_size > 1 and len(yb) < 2:
                    continue
                opt.lr = lr
                if cfg.norm.update_rate is None:
                    for m in micro:
                        m.rate = min(lr, 1.0)
                logits = model(xb)
                loss, dlogits = softmax_xent(logits, yb)
                if not math.isfinite(loss):
                    raise DivergedRun(f"non-finite loss at epoch {epoch}, step {step}")
                opt.zero_grad()
                model.backward(dlogits)
                opt.step()
                wrong += int(np.sum(logits.argmax(axis=1) != yb))
                seen += len(yb)
                loss_sum += loss * len(yb)
            test_err = 1.0 - evaluate(model, test_set, cfg.eval_batch_size) if len(test_set) else float("nan")
            entry = EpochLog(epoch, wrong / max(seen, 1), test_err, loss_sum / max(seen, 1))
            result.curves.append(entry)
            if recorder is not None:
                result.statdiff.append(recorder.report(epoch))
            log.info("epoch %d train_err %.4f test_err %.4f loss %.4f", epoch, entry.train_err, test_err, entry.loss)
    except DivergedRun as exc:
        result.diverged = True
        result.error = str(exc)
        log.warning("run diverged: %s", exc)
    finally:
        if recorder is not None:
            recorder.detach()

    if out_dir is not None:
        write_run(result, out_dir)
    return result


def fmt(v: float) -> str:
    return f"{v:.9g}"


def write_curves(path, curves: List[EpochLog]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for e in curves:
            w.writerow([e.epoch, fmt(e.train_err), fmt(e.test_err)])


def save_checkpoint(path, model: Module, cfg: TrainConfig, num_classes: int, in_channels: int):
    state = model.state_dict()
    np.savez(path, __config__=np.array(json.dumps(to_dict(cfg))),
             __shape__=np.array([num_classes, in_channels]), **state)


def load_checkpoint(path) -> Tuple[Module, TrainConfig, int, int]:
    """Rebuild a model from a checkpoint; returns ``(model, config, num_classes, in_channels)``."""
    from .config import from_dict

    with np.load(path) as z:
        cfg = from_dict(TrainConfig, json.loads(str(z["__config__"])))
        num_classes, in_channels = (int(v) for v in z["__shape__"])
        state = {k: z[k] for k in z.files if not k.startswith("__")}
    model = build_model(cfg, num_classes, in_channels)
    model.load_state_dict(state)
    return model, cfg, num_classes, in_channels


def write_run(result: RunResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_curves(out / "curves.csv", result.curves)
    summary = {
        "config": to_dict(result.config),
        "diverged": result.diverged,
        "error": result.error,
        "final_train_acc": result.final_train_acc,
        "final_test_acc": result.final_test_acc,
        "loss": [e.loss for e in result.curves],
    }
    if result.statdiff:
        write_statdiff_csv(out / "statdiff.csv", result.statdiff)
        summary["statdiff"] = summary_dict(result.statdiff)
    dump_json(out / "summary.json", summary)
    save_checkpoint(out / "checkpoint.npz", result.model, result.config, result.num_classes, result.in_channels)
