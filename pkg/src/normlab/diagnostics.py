"""Distance-to-singularity diagnostics.

Per-channel running statistics recorded during training, the within-group
statistical difference built on them, and a probe for channels that never
activate.
"""

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateGroup, InvalidInput, InvalidShape
from .module import Module
from .norm import BatchNorm2d, BCNLarge, BCNMicro, ChannelNorm
from .tensor import as_tensor4

RECORD_MOMENTUM = 0.01


@dataclass
class ChannelStatRecord:
    """Bias-corrected EMA of per-channel batch mean and variance.

    Raw averages start at zero; reads divide by ``1 - (1 - momentum)**count``
    so early values are not dragged toward zero.
    """

    layer: str
    channels: int
    momentum: float = RECORD_MOMENTUM
    count: int = 0
    raw_mean: np.ndarray = None
    raw_var: np.ndarray = None

    def __post_init__(self):
        if not 0 < self.momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        if self.raw_mean is None:
            self.raw_mean = np.zeros(self.channels)
        if self.raw_var is None:
            self.raw_var = np.zeros(self.channels)

    def _correction(self) -> float:
        return 1.0 - (1.0 - self.momentum) ** self.count if self.count else 1.0

    @property
    def mean(self) -> np.ndarray:
        return self.raw_mean / self._correction()

    @property
    def var(self) -> np.ndarray:
        return np.maximum(self.raw_var / self._correction(), 0.0)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)


def record_stats(rec: ChannelStatRecord, x) -> ChannelStatRecord:
    x = as_tensor4(x)
    if x.shape[1] != rec.channels:
        raise InvalidShape(f"record {rec.layer!r} tracks {rec.channels} channels, got {x.shape[1]}")
    m = rec.momentum
    rec.raw_mean = (1 - m) * rec.raw_mean + m * x.mean(axis=(0, 2, 3))
    rec.raw_var = (1 - m) * rec.raw_var + m * x.var(axis=(0, 2, 3))
    rec.count += 1
    return rec


def statdiff(group_means, group_stds) -> float:
    """Std of the channel means over the mean of the channel stds (population moments)."""
    mu = np.asarray(group_means, dtype=np.float64)
    sd = np.asarray(group_stds, dtype=np.float64)
    if mu.shape != sd.shape or mu.ndim != 1 or mu.size == 0:
        raise InvalidShape("means and stds must be non-empty vectors of equal length")
    denom = sd.mean()
    if not denom > 0:
        raise DegenerateGroup("mean of channel stds is zero")
    # centre on the first mean so equal means give exactly 0 (E[mu^2] - E[mu]^2 cancels badly)
    d = mu - mu[0]
    return float(np.sqrt(np.mean(np.square(d - d.mean()))) / denom)


@dataclass
class StatDiffReport:
    epoch: int
    per_group: Dict[str, List[float]]
    per_layer: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.per_layer:
            self.per_layer = {k: float(np.mean(v)) for k, v in self.per_group.items()}

    @property
    def mean_over_groups(self) -> float:
        """Average over every group of every layer."""
        vals = [s for v in self.per_group.values() for s in v]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def mean_over_layers(self) -> float:
        return float(np.mean(list(self.per_layer.values()))) if self.per_layer else 0.0

    @property
    def std_over_layers(self) -> float:
        return float(np.std(list(self.per_layer.values()))) if self.per_layer else 0.0

    def rows(self) -> Iterable[Tuple[int, str, int, float]]:
        for layer, values in self.per_group.items():
            for g, v in enumerate(values):
                yield self.epoch, layer, g, v


def statdiff_report(records: Sequence[ChannelStatRecord], groups: Dict[str, int], epoch: int = 0) -> StatDiffReport:
    per_group = {}
    for rec in records:
        g = groups[rec.layer]
        if g < 1 or rec.channels % g:
            raise InvalidShape(f"{g} groups do not divide {rec.channels} channels in layer {rec.layer!r}")
        size = rec.channels // g
        mean, std = rec.mean, rec.std
        vals = []
        for k in range(g):
            sl = slice(k * size, (k + 1) * size)
            try:
                vals.append(statdiff(mean[sl], std[sl]))
            except DegenerateGroup as exc:
                raise DegenerateGroup(f"layer {rec.layer!r}, group {k}: {exc}") from exc
        per_group[rec.layer] = vals
    return StatDiffReport(epoch, per_group)


NORM_TYPES = (BatchNorm2d, ChannelNorm, BCNLarge, BCNMicro)


def _grouping(norm: Module) -> int:
    if isinstance(norm, ChannelNorm):
        return norm.groups
    if isinstance(norm, (BCNLarge, BCNMicro)):
        return norm.cn.groups
    # batch-normalized channels all share one target, so compare them all at once
    return 1


def find_norm_layers(model: Module) -> List[Tuple[str, Module]]:
    """Top-level normalizers of ``model`` (not the BN/CN stages inside a BCN)."""
    found, inside = [], set()
    for name, m in model.named_modules():
        if any(name.startswith(p + ".") for p in inside):
            continue
        if isinstance(m, NORM_TYPES):
            found.append((name, m))
            inside.add(name)
    return found


class StatRecorder:
    """Attaches a :class:`ChannelStatRecord` to every normalizer in a model.

    ``tap="post"`` records the standardized tensor just before the
    normalizer's final affine step; ``tap="pre"`` records the normalizer
    input, i.e. the raw convolution output. Recording happens only while
    the recorder is enabled and the model is in training mode.
    """

    def __init__(self, model: Module, momentum: float = RECORD_MOMENTUM, tap: str = "post"):
        if tap not in ("pre", "post"):
            raise ValueError("tap must be 'pre' or 'post'")
        self.tap = tap
        self.enabled = True
        self.records: Dict[str, ChannelStatRecord] = {}
        self.groups: Dict[str, int] = {}
        self._handles = []
        for name, norm in find_norm_layers(model):
            channels = norm.cn.channels if isinstance(norm, (BCNLarge, BCNMicro)) else norm.channels
            self.records[name] = ChannelStatRecord(name, channels, momentum)
            self.groups[name] = _grouping(norm)
            self._handles.append((norm, norm.register_hook(self._make_hook(name))))

    def _make_hook(self, name):
        def hook(module, inp, out):
            if self.enabled and module.training:
                record_stats(self.records[name], inp if self.tap == "pre" else module.pre_affine)
        return hook

    def report(self, epoch: int) -> StatDiffReport:
        return statdiff_report(list(self.records.values()), self.groups, epoch)

    def detach(self):
        for module, fn in self._handles:
            module.remove_hook(fn)
        self._handles.clear()


@dataclass
class EliminationReport:
    max_activation: Dict[str, np.ndarray]
    threshold: float = 0.0

    @property
    def deactivated(self) -> Dict[str, np.ndarray]:
        return {k: v < self.threshold for k, v in self.max_activation.items()}

    @property
    def fraction(self) -> Dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.deactivated.items()}

    def with_threshold(self, tau: float) -> "EliminationReport":
        return EliminationReport(self.max_activation, tau)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "layers": {
                k: {
                    "deactivated_fraction": self.fraction[k],
                    "deactivated_channels": np.flatnonzero(self.deactivated[k]).tolist(),
                    "max_activation": [float(v) for v in self.max_activation[k]],
                }
                for k in self.max_activation
            },
        }


def elimination_probe(model: Module, batches: Iterable[np.ndarray], threshold: float = 0.0) -> EliminationReport:
    """Largest post-normalization (pre-ReLU) value of every channel over a pass in eval mode.

    A channel whose maximum stays below ``threshold`` (0 by default) never
    gets past the following ReLU.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    norms = find_norm_layers(model)
    if not norms:
        raise InvalidInput("model has no normalization layers to probe")
    maxima: Dict[str, Optional[np.ndarray]] = {name: None for name, _ in norms}
    handles = []

    def make_hook(name):
        def hook(module, inp, out):
            m = out.max(axis=(0, 2, 3))
            maxima[name] = m if maxima[name] is None else np.maximum(maxima[name], m)
        return hook

    for name, norm in norms:
        handles.append((norm, norm.register_hook(make_hook(name))))
    was_training = model.training
    model.eval()
    seen = 0
    try:
        for xb in batches:
            model(xb)
            seen += 1
    finally:
        for norm, fn in handles:
            norm.remove_hook(fn)
        model.train(was_training)
    if seen == 0:
        raise InvalidInput("elimination probe needs at least one batch")
    return EliminationReport({k: v for k, v in maxima.items()}, threshold)


STATDIFF_COLUMNS = ("epoch", "layer", "group", "statdiff")


def write_statdiff_csv(path, reports: Iterable[StatDiffReport]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATDIFF_COLUMNS)
        for rep in reports:
            for epoch, layer, group, value in rep.rows():
                w.writerow([epoch, layer, group, f"{value:.9g}"])


def summary_dict(reports: Sequence[StatDiffReport]) -> dict:
    return {
        "epochs": [
            {
                "epoch": r.epoch,
                "mean_over_groups": r.mean_over_groups,
                "mean_over_layers": r.mean_over_layers,
                "std_over_layers": r.std_over_layers,
                "per_layer": r.per_layer,
            }
            for r in reports
        ]
    }


def dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
