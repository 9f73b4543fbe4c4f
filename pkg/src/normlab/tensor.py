"""Rank-4 NCHW array helpers.

Feature maps are plain ``numpy.ndarray`` objects of shape ``(B, C, H, W)``
stored C-contiguous in float64. The functions here are the only place that
knows about axis names; everything above works through them.
"""

from typing import Iterable, Tuple, Union

import numpy as np

from .errors import DegenerateDivisor, InvalidGrouping, InvalidShape

DTYPE = np.float64
AXES = {"B": 0, "C": 1, "H": 2, "W": 3}


def as_tensor4(x, dtype=DTYPE) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise InvalidShape(f"expected a rank-4 (B, C, H, W) array, got shape {arr.shape}")
    return arr


def _axis_indices(axes: Iterable[Union[str, int]]) -> Tuple[int, ...]:
    out = []
    for a in axes:
        if isinstance(a, str):
            if a not in AXES:
                raise InvalidShape(f"unknown axis {a!r}")
            a = AXES[a]
        if not 0 <= a < 4:
            raise InvalidShape(f"axis {a} out of range for a rank-4 tensor")
        out.append(int(a))
    return tuple(sorted(set(out)))


def reduce_stats(x: np.ndarray, axes) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and population variance of ``x`` over ``axes``.

    ``axes`` may mix names ("B", "C", "H", "W") and integer indices. Results
    keep the reduced axes as length-1 dimensions so they broadcast back onto
    ``x``. Variance is the biased (divide-by-N) estimate, computed two-pass.
    """
    x = as_tensor4(x)
    if x.size == 0:
        raise InvalidShape(f"cannot reduce an empty tensor of shape {x.shape}")
    ax = _axis_indices(axes)
    if not ax:
        return x.copy(), np.zeros_like(x)
    mean = x.mean(axis=ax, keepdims=True)
    var = np.square(x - mean).mean(axis=ax, keepdims=True)
    return mean, var


def group_reshape(x: np.ndarray, groups: int) -> np.ndarray:
    """View ``x`` as ``(B, G, C/G, H, W)``; channel ``g*(C/G)+k`` lands at ``[:, g, k]``."""
    x = as_tensor4(x)
    b, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise InvalidGrouping(f"{groups} groups do not evenly divide {c} channels")
    return x.reshape(b, groups, c // groups, h, w)


def group_unreshape(v: np.ndarray) -> np.ndarray:
    if v.ndim != 5:
        raise InvalidShape(f"expected a grouped (B, G, C/G, H, W) view, got shape {v.shape}")
    b, g, k, h, w = v.shape
    return v.reshape(b, g * k, h, w)


def channel_vector(v, channels: int) -> np.ndarray:
    """Broadcastable ``(1, C, 1, 1)`` form of a length-C vector."""
    v = np.asarray(v, dtype=DTYPE)
    if v.shape != (channels,):
        raise InvalidShape(f"expected a per-channel vector of length {channels}, got shape {v.shape}")
    return v.reshape(1, channels, 1, 1)


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}


def elementwise(x: np.ndarray, y, op: str) -> np.ndarray:
    """Pointwise ``x <op> y`` where ``y`` is a same-shape tensor, a scalar or a per-channel vector."""
    x = as_tensor4(x)
    if op not in _OPS:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_OPS)}")
    y = np.asarray(y, dtype=DTYPE)
    if y.ndim == 0:
        pass
    elif y.ndim == 1:
        y = channel_vector(y, x.shape[1])
    elif y.shape != x.shape:
        raise InvalidShape(f"shape mismatch: {x.shape} vs {y.shape}")
    if op == "div" and np.any(np.abs(y) < np.finfo(DTYPE).eps):
        raise DegenerateDivisor("divisor magnitude below machine epsilon")
    return _OPS[op](x, y)
