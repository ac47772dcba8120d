"""Variance schedule, closed-form forward noising and the ancestral sampler.

Notation follows the per-step signal coefficient ``alpha_t`` and its running
product ``alpha_bar_t``; ``alpha_bar_0`` is 1 by convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .nn.tensor import DimensionError, NumericError

# Linear beta schedule endpoints at the reference length of 200 steps.
REFERENCE_T = 200
BETA_START = 5e-4
BETA_END = 0.1


@dataclass(frozen=True)
class NoiseSchedule:
    alpha: np.ndarray
    alpha_bar: np.ndarray
    # original step index fed to the noise predictor for each schedule step
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alpha)

    def alpha_bar_at(self, t: int) -> float:
        """``alpha_bar_t`` with ``alpha_bar_0 = 1``."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def sigma(self, t: int) -> float:
        """Posterior standard deviation of the step ``t -> t-1``; zero at ``t = 1``."""
        self._check(t)
        if t == 1:
            return 0.0
        a, ab, ab_prev = self.alpha[t - 1], self.alpha_bar[t - 1], self.alpha_bar[t - 2]
        return float(np.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - a)))

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise IndexError(f"step {t} outside 1..{self.T}")


class ScheduleError(ValueError):
    pass


def make_schedule(T: int = REFERENCE_T, beta_start: float | None = None,
                  beta_end: float | None = None) -> NoiseSchedule:
    """Linear-beta schedule, ``alpha_t = 1 - beta_t``.

    When the endpoints are omitted they default to the 200-step values scaled
    by ``200 / T`` (capped below 1), which keeps ``alpha_bar_T`` near 1e-5 for
    shorter chains.
    """
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    scale = REFERENCE_T / T
    if beta_start is None:
        beta_start = min(BETA_START * scale, 0.5)
    if beta_end is None:
        beta_end = min(BETA_END * scale, 0.999)
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - betas
    return NoiseSchedule(alpha, np.cumprod(alpha), np.arange(1, T + 1))


def respace(sched: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Ancestral schedule over ``steps`` evenly spaced steps of ``sched``.

    The kept steps share the original ``alpha_bar`` values; the per-step
    ``alpha`` is the ratio of consecutive kept products.
    """
    if not 1 <= steps <= sched.T:
        raise ScheduleError(f"steps must lie in 1..{sched.T}, got {steps}")
    if steps == sched.T:
        return sched
    keep = np.unique(np.round(np.linspace(1, sched.T, steps)).astype(int))
    ab = sched.alpha_bar[keep - 1]
    alpha = ab / np.concatenate([[1.0], ab[:-1]])
    return NoiseSchedule(alpha, ab, sched.timesteps[keep - 1])


def forward_diffuse(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`` for scalar ``t`` or per-sample ``t`` array."""
    if np.shape(eps) != np.shape(z0):
        raise DimensionError(f"eps shape {np.shape(eps)} != z0 shape {np.shape(z0)}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise IndexError(f"step {t} outside 1..{sched.T}")
    ab = sched.alpha_bar[t - 1]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (np.ndim(z0) - 1))
    dtype = np.result_type(z0, eps)
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(dtype)


def loss(eps_hat: np.ndarray, eps: np.ndarray) -> float:
    """Mean squared noise-prediction error."""
    if np.shape(eps_hat) != np.shape(eps):
        raise DimensionError(f"shape mismatch {np.shape(eps_hat)} vs {np.shape(eps)}")
    d = np.asarray(eps_hat, dtype=np.float64) - np.asarray(eps, dtype=np.float64)
    return float(np.mean(d * d))


def ddpm_step(z_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule,
              xi: np.ndarray | None) -> np.ndarray:
    sched._check(t)
    a = sched.alpha[t - 1]
    ab = sched.alpha_bar[t - 1]
    mean = (z_t - ((1.0 - a) / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a)
    if t == 1 or xi is None:
        return mean.astype(z_t.dtype)
    return (mean + sched.sigma(t) * xi).astype(z_t.dtype)


Predictor = Callable[[np.ndarray, int, Any], np.ndarray]


def sample(predictor: Predictor, conditions: Any, sched: NoiseSchedule,
           rng: np.random.Generator, shape, dtype=np.float64,
           callback: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Ancestral sampling from ``z_T ~ N(0, I)`` down to ``z_0``.

    ``predictor(z_t, t, conditions)`` receives the original (un-respaced)
    step index.  Raises :class:`NumericError` naming the step if the
    predictor returns non-finite values.
    """
    z = rng.standard_normal(shape).astype(dtype)
    for t in range(sched.T, 0, -1):
        eps_hat = np.asarray(predictor(z, int(sched.timesteps[t - 1]), conditions))
        if not np.all(np.isfinite(eps_hat)):
            raise NumericError(f"predictor returned non-finite values at step {t}")
        xi = rng.standard_normal(shape).astype(dtype) if t > 1 else None
        z = ddpm_step(z, t, eps_hat, sched, xi)
        if callback is not None:
            callback(t, z)
    return z


def analytic_gaussian_predictor(z_t: np.ndarray, t: int, s2: float, sched: NoiseSchedule) -> np.ndarray:
    """``E[eps | z_t]`` when ``z0 ~ N(0, s2 I)``: the optimal noise predictor."""
    ab = sched.alpha_bar_at(t)
    return np.sqrt(1.0 - ab) * z_t / (ab * s2 + 1.0 - ab)
