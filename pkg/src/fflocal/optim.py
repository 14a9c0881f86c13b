from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor


@dataclass
class AdamState:
    """Moment estimates keyed by parameter name."""

    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected ADAM update, applied to ``params`` in place.

    Raises before touching anything if a gradient or an updated value would be
    non-finite, naming the offending tensor.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} does not match parameter {name} {p.shape}")
        m = state.first_moment.get(name)
        if m is not None and m.shape != p.shape:
            raise ShapeError(f"adam_step: moment {m.shape} does not match parameter {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: gradient of {name} is not finite")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    updates: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        m = b1 * (m if m is not None else 0.0) + (1 - b1) * g
        v = b2 * (v if v is not None else 0.0) + (1 - b2) * g * g
        step = state.alpha * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        new = p.data.astype(np.float64) - step
        if not np.all(np.isfinite(new)):
            raise NonFiniteError(f"adam_step: update of {name} is not finite")
        dtype = p.data.dtype
        updates[name] = (new.astype(dtype), m.astype(dtype), v.astype(dtype))

    for name, (new, m, v) in updates.items():
        params[name].data = new
        state.first_moment[name] = m
        state.second_moment[name] = v
    state.step_count = t
    return params, state
