"""Conditional flow matching: linear probability path, targets, loss and ODE sampling.

The functions here are array-agnostic: they accept numpy arrays or torch
tensors and only use arithmetic that both support.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import SamplerConfig
from .core import PairedSample, check_same_shape


class NonFiniteVelocity(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"velocity field returned non-finite values at step {step}")
        self.step = step


def sample_noise(shape, rng) -> np.ndarray:
    """Standard-normal source sample as float32."""
    return rng.standard_normal(tuple(shape), dtype=np.float32)


def interpolate(x0, x1, t):
    """Point on the straight path from ``x0`` (t=0) to ``x1`` (t=1).

    ``t`` may be a scalar or broadcastable array (e.g. shape ``(B, 1, 1, 1)``).
    The endpoints are returned bit-exactly.
    """
    check_same_shape(x0, x1, "path endpoints")
    if np.ndim(t) == 0:
        if t == 0:
            return x0 * 1
        if t == 1:
            return x1 * 1
    return (1 - t) * x0 + t * x1


def target_velocity(x0, x1):
    """Time derivative of :func:`interpolate`, constant along the path."""
    check_same_shape(x0, x1, "path endpoints")
    return x1 - x0


def cfm_loss(pred_v, target_v):
    """Mean squared error over all elements."""
    check_same_shape(pred_v, target_v, "prediction/target")
    return ((pred_v - target_v) ** 2).mean()


@dataclass
class PathPoint:
    x_t: np.ndarray
    t: float
    target_v: np.ndarray
    cond: np.ndarray


def make_training_point(sample: PairedSample, rng, t: float | None = None) -> PathPoint:
    """Draw ``t ~ U[0, 1]`` and a noise start, and build the regression target."""
    if t is None:
        t = float(rng.random())
    x0 = sample_noise(sample.high.shape, rng)
    x_t = interpolate(x0, sample.high, t)
    return PathPoint(
        x_t=np.asarray(x_t, dtype=np.float32),
        t=float(t),
        target_v=target_velocity(x0, sample.high).astype(np.float32),
        cond=sample.low,
    )


def _finite(x) -> bool:
    if hasattr(x, "isfinite"):
        return bool(x.isfinite().all())
    return bool(np.all(np.isfinite(x)))


VelocityField = Callable[[object, float, object], object]


def integrate(model: VelocityField, x0, cond, cfg: SamplerConfig | None = None):
    """Integrate ``dx/dt = model(x, t, cond)`` from t=0 to t=1 on a uniform grid.

    Euler: ``x <- x + dt * v(x, t_k)``. Midpoint: ``x <- x + dt * v(x + dt/2 *
    v(x, t_k), t_k + dt/2)``. Raises :class:`NonFiniteVelocity` with the step
    index if the model emits NaN or Inf.
    """
    cfg = cfg or SamplerConfig()
    cfg.validate()
    n = cfg.n_steps
    dt = 1.0 / n
    x = x0
    for k in range(n):
        t = k * dt
        v = model(x, t, cond)
        if not _finite(v):
            raise NonFiniteVelocity(k)
        if cfg.method == "midpoint":
            v = model(x + (0.5 * dt) * v, t + 0.5 * dt, cond)
            if not _finite(v):
                raise NonFiniteVelocity(k)
        x = x + v * dt
    return x
