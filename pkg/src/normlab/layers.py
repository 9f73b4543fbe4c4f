"""Differentiable layers: convolution, activation, pooling, linear head, loss."""

from typing import Callable, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidLabel, InvalidShape
from .module import Identity, Module, Parameter, Sequential
from .norm import DEFAULT_WS_EPS, ws_backward, ws_forward
from .tensor import as_tensor4

NormFactory = Callable[[int], Module]


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    """Zero-padded cross-correlation, optionally with standardized weights.

    With ``ws=True`` the stored weight is a raw parameter and every forward
    pass convolves with its standardized form; gradients flow back through
    the standardization to the raw weight.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = False, ws: bool = False,
                 ws_eps: float = DEFAULT_WS_EPS, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if kernel_size % 2 != 1:
            raise InvalidShape("kernel size must be odd")
        if in_channels < 1 or out_channels < 1 or stride < 1:
            raise InvalidShape("channel counts and stride must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.ws = ws
        self.ws_eps = ws_eps
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(kaiming_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self._cache = None

    def effective_weight(self) -> np.ndarray:
        if self.ws:
            return ws_forward(self.weight.data, self.ws_eps)[0]
        return self.weight.data

    def output_shape(self, h: int, w: int) -> Tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        x = as_tensor4(x)
        b, c, h, w = x.shape
        if c != self.in_channels:
            raise InvalidShape(f"conv expects {self.in_channels} input channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = self.output_shape(h, w)
        if ho < 1 or wo < 1:
            raise InvalidShape(f"input {h}x{w} too small for kernel {k}, stride {s}, padding {p}")
        if self.ws:
            weight, ws_cache = ws_forward(self.weight.data, self.ws_eps)
        else:
            weight, ws_cache = self.weight.data, None
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
        out = cols @ weight.reshape(self.out_channels, -1).T
        if self.bias is not None:
            out += self.bias.data
        self._cache = (cols, weight, ws_cache, x.shape, xp.shape, ho, wo)
        return np.ascontiguousarray(out.reshape(b, ho, wo, self.out_channels).transpose(0, 3, 1, 2))

    def backward(self, grad):
        cols, weight, ws_cache, xshape, pshape, ho, wo = self._cache
        b, c, h, w = xshape
        k, s, p = self.kernel_size, self.stride, self.padding
        g2 = grad.transpose(0, 2, 3, 1).reshape(b * ho * wo, self.out_channels)
        dweight = (g2.T @ cols).reshape(weight.shape)
        if self.ws:
            dweight = ws_backward(dweight, ws_cache)
        self.weight.grad += dweight
        if self.bias is not None:
            self.bias.grad += g2.sum(axis=0)
        dcols = (g2 @ weight.reshape(self.out_channels, -1)).reshape(b, ho, wo, c, k, k)
        dxp = np.zeros(pshape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p : p + h, p : p + w]
        return np.ascontiguousarray(dxp)


class ReLU(Module):
    """``max(x, 0)``; the gradient at exactly 0 is taken as 0."""

    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


class AvgPool2(Module):
    def __init__(self):
        super().__init__()

    def forward(self, x):
        x = as_tensor4(x)
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise InvalidShape(f"2x2 average pooling needs even spatial dims, got {h}x{w}")
        return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, grad):
        return np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) * 0.25


class GlobalAvgPool(Module):
    """Spatial mean, ``(B, C, H, W) -> (B, C)``."""

    def __init__(self):
        super().__init__()
        self._shape = None

    def forward(self, x):
        x = as_tensor4(x)
        if x.shape[2] * x.shape[3] < 1:
            raise InvalidShape("global pooling over an empty spatial extent")
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        b, c, h, w = self._shape
        return np.broadcast_to(grad[:, :, None, None] / (h * w), self._shape).copy()


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(kaiming_normal(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features))
        self._x = None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise InvalidShape(f"linear layer expects (B, {self.weight.shape[1]}), got {x.shape}")
        self._x = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, grad):
        self.weight.grad += grad.T @ self._x
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.data


def softmax_xent(logits, labels) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidShape(f"logits {logits.shape} and labels {labels.shape} disagree")
    b, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidLabel(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    return float(loss), dlogits / b


def _norm_or_identity(factory: Optional[NormFactory], channels: int) -> Module:
    return Identity() if factory is None else factory(channels)


class BasicBlock(Module):
    """Two 3x3 convolutions with normalization, added to a (possibly projected) skip path.

    ``relu(norm2(conv2(relu(norm1(conv1(x))))) + shortcut(x))``; the shortcut
    is a strided 1x1 convolution plus normalization whenever stride or width
    changes, otherwise the identity.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1,
                 norm: Optional[NormFactory] = None, ws: bool = False,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride=stride, ws=ws, rng=rng)
        self.norm1 = _norm_or_identity(norm, out_channels)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(out_channels, out_channels, 3, ws=ws, rng=rng)
        self.norm2 = _norm_or_identity(norm, out_channels)
        self.branch = Sequential(self.conv1, self.norm1, self.relu1, self.conv2, self.norm2)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Sequential(
                Conv2d(in_channels, out_channels, 1, stride=stride, padding=0, ws=ws, rng=rng),
                _norm_or_identity(norm, out_channels),
            )
        else:
            self.shortcut = Identity()
        self.out_relu = ReLU()

    def named_children(self):
        # branch already owns conv1..norm2; list each submodule once
        yield "branch", self.branch
        yield "shortcut", self.shortcut
        yield "out_relu", self.out_relu

    def forward(self, x):
        x = as_tensor4(x)
        main = self.branch(x)
        skip = self.shortcut(x)
        if main.shape != skip.shape:
            raise InvalidShape(f"residual branch {main.shape} and skip {skip.shape} disagree")
        return self.out_relu(main + skip)

    def backward(self, grad):
        g = self.out_relu.backward(grad)
        return self.branch.backward(g) + self.shortcut.backward(g)


def residual_block_forward(x, block: BasicBlock):
    return block(x)
