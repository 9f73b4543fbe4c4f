"""Run configurations, loaded from JSON with unknown keys rejected."""

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from typing import List, Optional

from ..norm import DEFAULT_EPS, DEFAULT_MOMENTUM
from ..optim import SgdConfig

NORM_KINDS = ("none", "bn", "ln", "gn", "in", "fixed", "bcn-large", "bcn-micro")
MODELS = ("plain4", "miniresnet")


class ConfigError(ValueError):
    pass


@dataclass
class NormSpec:
    kind: str = "bn"
    # None: on for the BCN kinds, off otherwise
    ws: Optional[bool] = None
    groups: Optional[int] = None
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM
    # None means: follow the optimizer's current learning rate
    update_rate: Optional[float] = None
    # only read by kind == "fixed"
    sigma_mu: float = 0.0
    sigma_sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ConfigError(f"unknown normalizer {self.kind!r}; expected one of {NORM_KINDS}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.groups is not None and self.groups < 1:
            raise ConfigError("groups must be positive")
        if self.sigma_mu < 0 or self.sigma_sigma < 0:
            raise ConfigError("sigma_mu and sigma_sigma must be non-negative")
        if self.update_rate is not None and not 0 <= self.update_rate <= 1:
            raise ConfigError("update_rate must lie in [0, 1]")

    @property
    def use_ws(self) -> bool:
        return self.kind.startswith("bcn") if self.ws is None else self.ws

    @property
    def label(self) -> str:
        return self.kind + ("+ws" if self.use_ws else "")


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    train_per_class: int = 20
    test_per_class: int = 10
    image_size: int = 32
    snr: float = 4.0
    seed: int = 0


@dataclass
class TrainConfig:
    model: str = "plain4"
    depth: int = 3
    width: int = 32
    norm: NormSpec = field(default_factory=NormSpec)
    epochs: int = 30
    batch_size: int = 128
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(lr=0.1, momentum=0.9, weight_decay=5e-4))
    schedule: str = "cosine"
    seed: int = 0
    augment: bool = True
    # "cifar10" reads the binary distribution from data_dir (or $NORMLAB_DATA)
    dataset: str = "cifar10"
    data_dir: Optional[str] = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    eval_batch_size: int = 500
    record_statdiff: bool = False
    record_momentum: float = 0.01
    # "post": standardized output before the affine step; "pre": raw conv output
    record_tap: str = "post"

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("schedule must be 'cosine' or 'constant'")
        if self.dataset not in ("cifar10", "synthetic"):
            raise ConfigError("dataset must be 'cifar10' or 'synthetic'")
        if self.record_tap not in ("pre", "post"):
            raise ConfigError("record_tap must be 'pre' or 'post'")


@dataclass
class SweepConfig:
    base: TrainConfig = field(default_factory=TrainConfig)
    sigma_mu_grid: List[float] = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0])
    sigma_sigma_grid: List[float] = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    threshold: float = 0.70
    workers: int = 1

    def __post_init__(self):
        if not self.sigma_mu_grid or not self.sigma_sigma_grid or not self.seeds:
            raise ConfigError("sweep grids and seed list must be non-empty")
        if any(v < 0 for v in self.sigma_mu_grid + self.sigma_sigma_grid):
            raise ConfigError("sweep grid values must be non-negative")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")


@dataclass
class StatDiffConfig:
    base: TrainConfig = field(default_factory=lambda: TrainConfig(model="miniresnet"))
    normalizers: List[NormSpec] = field(default_factory=lambda: [
        NormSpec("gn"), NormSpec("ln"), NormSpec("gn", ws=True), NormSpec("ln", ws=True),
    ])


def _build(tp, value, path):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        names = {f.name: f for f in dataclasses.fields(tp)}
        unknown = set(value) - set(names)
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
        hints = typing.get_type_hints(tp)
        kwargs = {k: _build(hints[k], v, f"{path}.{k}") for k, v in value.items()}
        try:
            return tp(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if value is None else _build(args[0], value, path)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        (item,) = typing.get_args(tp)
        return [_build(item, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp in (int, str, bool) and type(value) is tp:
        return value
    raise ConfigError(f"{path}: expected {getattr(tp, '__name__', tp)}, got {value!r}")


def from_dict(cls, data: dict):
    return _build(cls, data, cls.__name__)


def load_config(cls, path):
    with open(path, encoding="utf-8") as fh:
        return from_dict(cls, json.load(fh))


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
