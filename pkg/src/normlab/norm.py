"""Normalization transforms.

Every normalizer is a :class:`~normlab.module.Module` with an explicit
backward pass. Each one exposes ``pre_affine``, the standardized tensor from
its most recent forward call, which diagnostics read.

=============  ==========================================================
``bn``         :class:`BatchNorm2d`, statistics over (B, H, W) per channel
``ln/gn/in``   :class:`ChannelNorm` with 1, G or C groups
``fixed``      :class:`FixedStatNorm`, BN re-targeted to frozen mean/std
``bcn-large``  :class:`BCNLarge`, channel norm applied to a BN output
``bcn-micro``  :class:`BCNMicro`, running-estimate batch stage + channel norm
=============  ==========================================================
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DegenerateBatch, DegenerateGroup, DegenerateRow, InvalidShape
from .module import Module, Parameter
from .tensor import as_tensor4, group_reshape, group_unreshape, reduce_stats

DEFAULT_EPS = 1e-5
DEFAULT_WS_EPS = 1e-10
DEFAULT_MOMENTUM = 0.1

BN_AXES = (0, 2, 3)
GROUP_AXES = (2, 3, 4)


def default_groups(channels: int) -> int:
    """``min(32, C // 4)`` floored at 1, lowered until it divides ``C``."""
    g = max(1, min(32, channels // 4))
    while channels % g:
        g -= 1
    return g


def _standardize(x, axes, eps):
    mean = x.mean(axis=axes, keepdims=True)
    xc = x - mean
    var = np.square(xc).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return xc * inv_std, inv_std, mean, var


def _standardize_backward(dxhat, xhat, inv_std, axes):
    # mean and variance both depend on x, hence the two correction terms
    return inv_std * (
        dxhat
        - dxhat.mean(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
    )


class Affine(Module):
    """``z = gamma * y + beta`` per channel, or per channel group when ``groups`` is set."""

    def __init__(self, channels: int, groups: Optional[int] = None):
        super().__init__()
        self.channels = channels
        self.groups = groups
        size = channels if groups is None else groups
        self.gamma = Parameter(np.ones(size))
        self.beta = Parameter(np.zeros(size))
        self._y = None

    def _check(self, y):
        if y.ndim != 4 or y.shape[1] != self.channels:
            raise InvalidShape(f"affine over {self.channels} channels got shape {y.shape}")

    def _view(self, y):
        if self.groups is None:
            return y, (slice(None), None, None), (0, 2, 3)
        return group_reshape(y, self.groups), (slice(None), None, None, None), (0, 2, 3, 4)

    def forward(self, y):
        self._check(y)
        self._y = y
        v, idx, _ = self._view(y)
        z = v * self.gamma.data[idx] + self.beta.data[idx]
        return z.reshape(y.shape)

    def backward(self, grad):
        v, idx, axes = self._view(self._y)
        g = grad.reshape(v.shape)
        self.gamma.grad += (g * v).sum(axis=axes)
        self.beta.grad += g.sum(axis=axes)
        return (g * self.gamma.data[idx]).reshape(grad.shape)


class BatchNorm2d(Module):
    """Per-channel standardization with batch statistics and an EMA for eval mode.

    Training requires at least two samples in the batch: with one sample the
    "batch" statistics are just that sample's spatial statistics.
    """

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = DEFAULT_EPS, momentum: float = DEFAULT_MOMENTUM):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.affine = Affine(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.pre_affine = None
        self._cache = None

    def _normalize(self, x):
        x = as_tensor4(x)
        if x.shape[1] != self.channels:
            raise InvalidShape(f"expected {self.channels} channels, got {x.shape[1]}")
        if self.training:
            b, _, h, w = x.shape
            if b < 2 or b * h * w < 2:
                raise DegenerateBatch(
                    f"batch statistics need at least 2 samples, got batch of shape {x.shape}"
                )
            mean, var = reduce_stats(x, "BHW")
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv_std
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean.ravel()
            self.running_var = (1 - m) * self.running_var + m * var.ravel()
        else:
            mean = self.running_mean.reshape(1, -1, 1, 1)
            inv_std = 1.0 / np.sqrt(self.running_var.reshape(1, -1, 1, 1) + self.eps)
            xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, self.training)
        return xhat

    def _normalize_backward(self, dxhat):
        xhat, inv_std, training = self._cache
        if training:
            return _standardize_backward(dxhat, xhat, inv_std, BN_AXES)
        return dxhat * inv_std

    def forward(self, x):
        xhat = self._normalize(x)
        self.pre_affine = xhat
        return self.affine(xhat)

    def backward(self, grad):
        return self._normalize_backward(self.affine.backward(grad))


class FixedStatNorm(BatchNorm2d):
    """Batch normalization re-targeted to a frozen per-channel mean and std.

    ``y = gamma * (sigma_hat * (x - mu) / sigma + mu_hat) + beta``. With
    ``mu_hat = 0`` and ``sigma_hat = 1`` this is bit-for-bit :class:`BatchNorm2d`.
    """

    _buffer_names = BatchNorm2d._buffer_names + ("mu_hat", "sigma_hat")

    def __init__(self, channels: int, mu_hat=None, sigma_hat=None, eps: float = DEFAULT_EPS,
                 momentum: float = DEFAULT_MOMENTUM):
        super().__init__(channels, eps=eps, momentum=momentum)
        self.mu_hat = np.zeros(channels) if mu_hat is None else np.array(mu_hat, dtype=np.float64)
        self.sigma_hat = np.ones(channels) if sigma_hat is None else np.array(sigma_hat, dtype=np.float64)
        if self.mu_hat.shape != (channels,) or self.sigma_hat.shape != (channels,):
            raise InvalidShape("fixed statistics must be per-channel vectors")
        if np.any(self.sigma_hat <= 0):
            raise ValueError("sigma_hat must be strictly positive")

    def forward(self, x):
        xhat = self._normalize(x)
        t = self.sigma_hat.reshape(1, -1, 1, 1) * xhat + self.mu_hat.reshape(1, -1, 1, 1)
        self.pre_affine = t
        return self.affine(t)

    def backward(self, grad):
        dt = self.affine.backward(grad)
        return self._normalize_backward(dt * self.sigma_hat.reshape(1, -1, 1, 1))


class ChannelNorm(Module):
    """Group-wise standardization per sample: LN (``groups=1``), GN, IN (``groups=C``).

    ``affine="channel"`` learns one scale/shift per channel; ``"group"`` one
    per group, which is the form used as the second stage of BCN.
    """

    def __init__(self, channels: int, groups: int = 1, eps: float = DEFAULT_EPS, affine: str = "channel"):
        super().__init__()
        if groups < 1 or channels % groups:
            raise InvalidShape(f"{groups} groups do not divide {channels} channels")
        if affine not in ("channel", "group"):
            raise ValueError("affine must be 'channel' or 'group'")
        self.channels = channels
        self.groups = groups
        self.eps = eps
        self.affine = Affine(channels, groups=groups if affine == "group" else None)
        self.pre_affine = None
        self._cache = None

    def forward(self, x):
        x = as_tensor4(x)
        if x.shape[1] != self.channels:
            raise InvalidShape(f"expected {self.channels} channels, got {x.shape[1]}")
        per_group = (self.channels // self.groups) * x.shape[2] * x.shape[3]
        if per_group < 2:
            raise DegenerateGroup(f"each channel group holds {per_group} element(s); need at least 2")
        v = group_reshape(x, self.groups)
        xhat5, inv_std, _, _ = _standardize(v, GROUP_AXES, self.eps)
        self._cache = (xhat5, inv_std)
        xhat = group_unreshape(xhat5)
        self.pre_affine = xhat
        return self.affine(xhat)

    def backward(self, grad):
        xhat5, inv_std = self._cache
        dxhat = self.affine.backward(grad)
        dx5 = _standardize_backward(group_reshape(dxhat, self.groups), xhat5, inv_std, GROUP_AXES)
        return group_unreshape(dx5)


def layer_norm(channels: int, eps: float = DEFAULT_EPS) -> ChannelNorm:
    return ChannelNorm(channels, 1, eps)


def group_norm(channels: int, groups: Optional[int] = None, eps: float = DEFAULT_EPS) -> ChannelNorm:
    return ChannelNorm(channels, groups or default_groups(channels), eps)


def instance_norm(channels: int, eps: float = DEFAULT_EPS) -> ChannelNorm:
    return ChannelNorm(channels, channels, eps)


class BCNLarge(Module):
    """``CN(BN(x))``: batch statistics first, then grouped channel statistics."""

    def __init__(self, channels: int, groups: Optional[int] = None, eps: float = DEFAULT_EPS,
                 momentum: float = DEFAULT_MOMENTUM):
        super().__init__()
        self.bn = BatchNorm2d(channels, eps=eps, momentum=momentum)
        self.cn = ChannelNorm(channels, groups or default_groups(channels), eps, affine="group")

    @property
    def pre_affine(self):
        return self.cn.pre_affine

    def forward(self, x):
        return self.cn(self.bn(x))

    def backward(self, grad):
        return self.bn.backward(self.cn.backward(grad))


@dataclass
class EstimatorState:
    """Running per-channel mean/variance estimates for the micro-batch BCN batch stage."""

    mu_hat: np.ndarray
    sigma2_hat: np.ndarray
    rate: float = 0.1
    training: bool = True
    floor: float = DEFAULT_EPS

    @classmethod
    def initial(cls, channels: int, rate: float = 0.1, floor: float = DEFAULT_EPS) -> "EstimatorState":
        return cls(np.zeros(channels), np.ones(channels), rate=rate, floor=floor)


def estimator_update(x, e: EstimatorState) -> EstimatorState:
    """One running-estimate step, in place; returns ``e``.

    The observed variance is taken around the estimate *before* this step's
    mean update. Estimates never receive gradients.
    """
    x = as_tensor4(x)
    if x.shape[1] != e.mu_hat.shape[0]:
        raise InvalidShape(f"estimator tracks {e.mu_hat.shape[0]} channels, got {x.shape[1]}")
    if not 0 <= e.rate <= 1:
        raise ValueError(f"update rate must lie in [0, 1], got {e.rate}")
    mu_obs = x.mean(axis=BN_AXES)
    var_obs = np.square(x - e.mu_hat.reshape(1, -1, 1, 1)).mean(axis=BN_AXES)
    e.mu_hat = e.mu_hat + e.rate * (mu_obs - e.mu_hat)
    e.sigma2_hat = np.maximum(e.sigma2_hat + e.rate * (var_obs - e.sigma2_hat), e.floor)
    return e


def estimator_normalize(x, e: EstimatorState) -> np.ndarray:
    """``(x - mu_hat) / sqrt(sigma2_hat)`` with the estimates as constants."""
    x = as_tensor4(x)
    return (x - e.mu_hat.reshape(1, -1, 1, 1)) / np.sqrt(e.sigma2_hat).reshape(1, -1, 1, 1)


class BCNMicro(Module):
    """Batch-channel normalization driven by running estimates; works at batch size 1.

    In training mode each forward first advances the estimates, then
    normalizes with the updated values. In eval mode the estimates are
    frozen. The channel stage runs in both modes.
    """

    _buffer_names = ("mu_hat", "sigma2_hat")

    def __init__(self, channels: int, groups: Optional[int] = None, eps: float = DEFAULT_EPS,
                 rate: float = 0.1):
        super().__init__()
        self.estimator = EstimatorState.initial(channels, rate=rate, floor=eps)
        self.affine_b = Affine(channels)
        self.cn = ChannelNorm(channels, groups or default_groups(channels), eps, affine="group")
        self.update_estimates = True
        self._inv_std = None

    # checkpointing goes through these
    @property
    def mu_hat(self):
        return self.estimator.mu_hat

    @property
    def sigma2_hat(self):
        return self.estimator.sigma2_hat

    @property
    def rate(self):
        return self.estimator.rate

    @rate.setter
    def rate(self, value):
        self.estimator.rate = float(value)

    @property
    def pre_affine(self):
        return self.cn.pre_affine

    def forward(self, x):
        x = as_tensor4(x)
        self.estimator.training = self.training
        if self.training and self.update_estimates:
            estimator_update(x, self.estimator)
        self._inv_std = 1.0 / np.sqrt(self.estimator.sigma2_hat).reshape(1, -1, 1, 1)
        xb = estimator_normalize(x, self.estimator)
        return self.cn(self.affine_b(xb))

    def backward(self, grad):
        dxb = self.affine_b.backward(self.cn.backward(grad))
        return dxb * self._inv_std


# Weight standardization

def ws_forward(weight, eps: float = DEFAULT_WS_EPS) -> Tuple[np.ndarray, tuple]:
    """Standardize each output row of ``weight`` to zero sum and unit sum of squares."""
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim < 2:
        raise InvalidShape("weight needs an output axis and at least one fan-in axis")
    rows = w.reshape(w.shape[0], -1)
    if rows.shape[1] < 2:
        raise InvalidShape("weight standardization needs a fan-in of at least 2")
    centered = rows - rows.mean(axis=1, keepdims=True)
    sq = np.square(centered).sum(axis=1, keepdims=True)
    scale = np.square(rows).sum(axis=1, keepdims=True)
    tiny = (64 * np.finfo(np.float64).eps) ** 2
    bad = np.flatnonzero(sq.ravel() <= tiny * np.maximum(scale.ravel(), np.finfo(np.float64).tiny))
    if bad.size:
        raise DegenerateRow(f"output rows {bad.tolist()} are constant; nothing left after centering")
    norm = np.sqrt(sq + eps)
    what = centered / norm
    return what.reshape(w.shape), (what, norm, w.shape)


def ws_backward(grad, cache) -> np.ndarray:
    what, norm, shape = cache
    g = np.asarray(grad).reshape(what.shape)
    dcentered = (g - what * (g * what).sum(axis=1, keepdims=True)) / norm
    return (dcentered - dcentered.mean(axis=1, keepdims=True)).reshape(shape)


def ws_standardize(weight, eps: float = DEFAULT_WS_EPS) -> np.ndarray:
    return ws_forward(weight, eps)[0]


# Functional entry points over a configured normalizer instance.

def bn_forward(x, bn: BatchNorm2d):
    return bn(x)


def cn_forward(x, cn: ChannelNorm):
    return cn(x)


def affine_forward(y, a: Affine):
    return a(y)


def fixedstat_forward(x, f: FixedStatNorm):
    return f(x)


def bcn_large_forward(x, bn: BatchNorm2d, cn: ChannelNorm):
    return cn(bn(x))


def bcn_micro_forward(x, e: EstimatorState, affine_b: Affine, cn: ChannelNorm):
    if e.training:
        estimator_update(x, e)
    return cn(affine_b(estimator_normalize(x, e)))
