"""Central finite-difference gradient checks and the full per-layer suite."""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .layers import AvgPool2, BasicBlock, Conv2d, GlobalAvgPool, Linear, ReLU, softmax_xent
from .module import Module
from .norm import Affine, BatchNorm2d, BCNLarge, BCNMicro, ChannelNorm, FixedStatNorm

FD_STEP = 1e-5
DENOM_FLOOR = 1e-8


@dataclass
class GradcheckReport:
    name: str
    seed: int
    max_rel_error: float
    tolerance: float
    checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return f"{status} {self.name:<14} seed={self.seed:<3} max_rel_err={self.max_rel_error:.3e} ({self.checked} entries)"


def relative_error(analytic, numeric, floor: float = DENOM_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def gradcheck(module: Module, x: np.ndarray, *, seed: int = 0, tol: float = 1e-4, h: float = FD_STEP,
              freeze: Optional[Callable[[Module], None]] = None, name: Optional[str] = None) -> GradcheckReport:
    """Compare ``module.backward`` against finite differences of ``sum(module(x) * R)``.

    ``R`` is a fixed random projection of the output. Input and all
    parameter gradients are checked. ``freeze`` runs after the analytic pass
    and before any perturbation, to pin state that forward would otherwise
    mutate.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    out = module(x)
    proj = rng.standard_normal(out.shape)
    module.zero_grad()
    analytic: Dict[str, np.ndarray] = {"input": module.backward(proj)}
    params = list(module.named_parameters())
    analytic.update({n: p.grad.copy() for n, p in params})
    if freeze is not None:
        freeze(module)

    def loss():
        return float(np.sum(module(x) * proj))

    worst, count = 0.0, 0
    worst = max(worst, relative_error(analytic["input"], numeric_grad(loss, x, h)))
    count += x.size
    for n, p in params:
        worst = max(worst, relative_error(analytic[n], numeric_grad(loss, p.data, h)))
        count += p.data.size
    return GradcheckReport(name or type(module).__name__, seed, worst, tol, count)


def gradcheck_function(f: Callable[[np.ndarray], Tuple[float, np.ndarray]], x: np.ndarray, *, seed: int = 0,
                       tol: float = 1e-4, h: float = FD_STEP, name: str = "function") -> GradcheckReport:
    """Check a function returning ``(value, dvalue/dx)``."""
    x = np.array(x, dtype=np.float64)
    _, analytic = f(x)
    numeric = numeric_grad(lambda: f(x)[0], x, h)
    return GradcheckReport(name, seed, relative_error(analytic, numeric), tol, x.size)


# The suite. Each builder returns (module, input, freeze).

def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _stop_estimates(m):
    m.update_estimates = False


def _randomize_affines(module: Module, rng):
    for sub in module.modules():
        if isinstance(sub, Affine):
            sub.gamma.data[...] = 1.0 + 0.3 * rng.standard_normal(sub.gamma.shape)
            sub.beta.data[...] = 0.3 * rng.standard_normal(sub.beta.shape)


def _case_conv(rng):
    return Conv2d(3, 4, 3, bias=True, rng=rng), rng.standard_normal((2, 3, 5, 5)), None


def _case_conv_strided(rng):
    return Conv2d(2, 3, 3, stride=2, bias=True, rng=rng), rng.standard_normal((2, 2, 6, 6)), None


def _case_ws_conv(rng):
    return Conv2d(3, 4, 3, ws=True, rng=rng), rng.standard_normal((2, 3, 4, 4)), None


def _case_relu(rng):
    return ReLU(), _away_from_zero(rng, (2, 3, 4, 4)), None


def _case_avgpool(rng):
    return AvgPool2(), rng.standard_normal((2, 3, 4, 4)), None


def _case_gap(rng):
    return GlobalAvgPool(), rng.standard_normal((2, 3, 4, 4)), None


def _case_linear(rng):
    return Linear(6, 4, rng=rng), rng.standard_normal((3, 6)), None


def _case_affine(rng):
    m = Affine(4)
    _randomize_affines(m, rng)
    return m, rng.standard_normal((2, 4, 3, 3)), None


def _case_bn(rng):
    m = BatchNorm2d(4)
    _randomize_affines(m, rng)
    return m, rng.standard_normal((3, 4, 3, 3)) * 2 + 1, None


def _cn(groups):
    def case(rng):
        m = ChannelNorm(4, groups)
        _randomize_affines(m, rng)
        return m, rng.standard_normal((2, 4, 3, 3)) * 2 + 1, None
    return case


def _case_fixed(rng):
    m = FixedStatNorm(4, mu_hat=rng.standard_normal(4), sigma_hat=np.exp(0.5 * rng.standard_normal(4)))
    _randomize_affines(m, rng)
    return m, rng.standard_normal((3, 4, 3, 3)) * 2 + 1, None


def _case_bcn_large(rng):
    m = BCNLarge(4, groups=2)
    _randomize_affines(m, rng)
    return m, rng.standard_normal((3, 4, 3, 3)) * 2 + 1, None


def _case_bcn_micro(rng):
    m = BCNMicro(4, groups=2, rate=0.5)
    _randomize_affines(m, rng)
    return m, rng.standard_normal((1, 4, 3, 3)) * 2 + 1, _stop_estimates


def _case_block(rng):
    m = BasicBlock(2, 4, stride=2, norm=lambda c: ChannelNorm(c, 2), rng=rng)
    _randomize_affines(m, rng)
    return m, rng.standard_normal((2, 2, 4, 4)), None


SUITE: Dict[str, Callable] = {
    "conv": _case_conv,
    "conv-stride2": _case_conv_strided,
    "ws-conv": _case_ws_conv,
    "relu": _case_relu,
    "avgpool2": _case_avgpool,
    "global-avgpool": _case_gap,
    "linear": _case_linear,
    "affine": _case_affine,
    "bn": _case_bn,
    "ln": _cn(1),
    "gn": _cn(2),
    "in": _cn(4),
    "fixed": _case_fixed,
    "bcn-large": _case_bcn_large,
    "bcn-micro": _case_bcn_micro,
    "basic-block": _case_block,
}


def _softmax_case(seed, tol):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 5, size=4)
    return gradcheck_function(lambda z: softmax_xent(z, labels), rng.standard_normal((4, 5)) * 2,
                              seed=seed, tol=tol, name="softmax-xent")


def run_suite(seeds: int = 10, tol: float = 1e-4, names: Optional[List[str]] = None) -> List[GradcheckReport]:
    reports = []
    selected = names or list(SUITE) + ["softmax-xent"]
    for name in selected:
        for seed in range(seeds):
            if name == "softmax-xent":
                reports.append(_softmax_case(seed, tol))
                continue
            rng = np.random.default_rng(1000 + seed)
            module, x, freeze = SUITE[name](rng)
            reports.append(gradcheck(module, x, seed=seed, tol=tol, freeze=freeze, name=name))
    return reports
