"""Normalization layers, elimination-singularity diagnostics and a small NCHW training stack."""

from .errors import (
    CorruptDataset,
    DegenerateBatch,
    DegenerateDivisor,
    DegenerateGroup,
    DegenerateRow,
    DivergedRun,
    InvalidGrouping,
    InvalidInput,
    InvalidLabel,
    InvalidShape,
)
from .norm import (
    Affine,
    BatchNorm2d,
    BCNLarge,
    BCNMicro,
    ChannelNorm,
    EstimatorState,
    FixedStatNorm,
    estimator_update,
    ws_standardize,
)

__version__ = "0.1.0"
