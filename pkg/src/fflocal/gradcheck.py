"""Central finite-difference checks for the autograd engine."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as _tensor
from .tensor import Tensor, grad

TOLERANCE = 1e-4
STEP = 1e-3


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    checked: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def _traced(fn: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    _tensor.relu_trace = []
    try:
        value = float(fn().data)
        return value, _tensor.relu_trace
    finally:
        _tensor.relu_trace = None


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numerical_gradient(
    fn: Callable[[], Tensor], param: Tensor, h: float = STEP, indices=None, return_valid: bool = False
):
    """Central differences of scalar ``fn()`` w.r.t. ``param``, perturbed in place.

    With ``return_valid`` also returns, per probed entry, whether no relu
    switched on or off across the ``+-h`` interval; where one did, the
    difference quotient straddles a kink and says nothing about the derivative.
    """
    out = np.zeros(param.data.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    valid = []
    _, base = _traced(fn) if return_valid else (None, None)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp, tp = _traced(fn)
        flat[i] = orig - h
        fm, tm = _traced(fn)
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2 * h)
        if return_valid:
            valid.append(_same_pattern(base, tp) and _same_pattern(base, tm))
    if return_valid:
        return out, np.array(valid, dtype=bool)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the larger of the two gradients' max magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = STEP,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[GradCheckResult]:
    """Compare backprop against central differences for each parameter.

    Parameters must be float64. With ``max_entries`` set, a random subset of
    each tensor's entries is probed (the analytic gradient is still computed
    in full). Probes whose step flips a relu are skipped and counted.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 parameters; {name} is {p.data.dtype}")
    analytic = grad(fn(), params)
    rng = rng or np.random.default_rng(0)
    results = []
    for name, p in params.items():
        size = p.data.size
        if max_entries is not None and size > max_entries:
            idx = np.sort(rng.choice(size, max_entries, replace=False))
        else:
            idx = np.arange(size)
        num, valid = numerical_gradient(fn, p, h, idx, return_valid=True)
        keep = idx[valid]
        a = analytic[name].reshape(-1)[keep]
        n = num.reshape(-1)[keep]
        results.append(GradCheckResult(name, relative_error(a, n), len(keep), len(idx) - len(keep)))
    return results
