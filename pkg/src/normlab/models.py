"""Network builders for the two experiments."""

from typing import Optional

import numpy as np

from .layers import AvgPool2, BasicBlock, Conv2d, GlobalAvgPool, Linear, NormFactory, ReLU, _norm_or_identity
from .module import Sequential


def plain4(norm: Optional[NormFactory], width: int = 32, num_classes: int = 10, in_channels: int = 3,
           ws: bool = False, rng: Optional[np.random.Generator] = None) -> Sequential:
    """Four ``conv3x3 -> norm -> relu -> avgpool2`` stages, global pooling, linear head."""
    rng = rng if rng is not None else np.random.default_rng(0)
    layers = []
    c = in_channels
    for _ in range(4):
        layers += [Conv2d(c, width, 3, ws=ws, rng=rng), _norm_or_identity(norm, width), ReLU(), AvgPool2()]
        c = width
    layers += [GlobalAvgPool(), Linear(width, num_classes, rng=rng)]
    return Sequential(*layers)


def miniresnet(n: int, norm: Optional[NormFactory], num_classes: int = 10, in_channels: int = 3,
               widths=(16, 32, 64), ws: bool = False, rng: Optional[np.random.Generator] = None) -> Sequential:
    """CIFAR-style residual net: stem, three stages of ``n`` basic blocks, head (depth 6n+2)."""
    if n < 1:
        raise ValueError("need at least one block per stage")
    rng = rng if rng is not None else np.random.default_rng(0)
    layers = [Conv2d(in_channels, widths[0], 3, ws=ws, rng=rng), _norm_or_identity(norm, widths[0]), ReLU()]
    c = widths[0]
    for stage, width in enumerate(widths):
        for i in range(n):
            stride = 2 if stage > 0 and i == 0 else 1
            layers.append(BasicBlock(c, width, stride, norm=norm, ws=ws, rng=rng))
            c = width
    layers += [GlobalAvgPool(), Linear(c, num_classes, rng=rng)]
    return Sequential(*layers)
