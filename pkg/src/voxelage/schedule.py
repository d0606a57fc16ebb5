"""Diffusion noise-schedule tables and the closed-form forward corruption step.

Timesteps are indexed 1..T in every public signature; the boundary convention
is alpha_bar[0] == 1 (a step-0 volume is the clean input). Tables are float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from voxelage.errors import DataError
from voxelage.volume import Volume


@dataclass
class NoiseSchedule:
    """Per-step beta/alpha tables; immutable after construction.

    ``posterior_var[t-1]`` is the fixed reverse-process variance
    beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t), zero at t=1.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise DataError(f"timestep {t} out of range 1..{self.T}")
        return t

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for t in 0..T, with the alpha_bar[0] = 1 convention."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[self.check_t(t) - 1])


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp from beta_start to beta_end inclusive over t = 1..T."""
    if T < 1:
        raise DataError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DataError(f"require 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - prev) / (1.0 - alpha_bar)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, posterior_var=posterior_var)


def q_sample(x0: Volume, t: int, eps: Volume, sched: NoiseSchedule) -> Volume:
    """Corrupt x0 to noise level t: sqrt(a_bar_t) * x0 + sqrt(1 - a_bar_t) * eps.

    The noise field is supplied by the caller, keeping randomness separate
    from the arithmetic.
    """
    t = sched.check_t(t)
    if eps.dims != x0.dims:
        raise DataError(f"eps dims {eps.dims} do not match x0 dims {x0.dims}")
    ab = float(sched.alpha_bar[t - 1])
    out = np.sqrt(ab) * x0.data.astype(np.float64) + np.sqrt(1.0 - ab) * eps.data
    return Volume(out.astype(np.float32), x0.spacing)


def posterior_coeffs(sched: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """Coefficients of the ancestral denoising step at t.

    Returns (coef_xt, coef_eps, sigma) such that
    x_{t-1} = coef_xt * (x_t - coef_eps * eps_hat) + sigma * z.
    sigma is the fixed sqrt(posterior variance); it is exactly 0 at t=1.
    """
    t = sched.check_t(t)
    coef_xt = 1.0 / np.sqrt(sched.alpha[t - 1])
    coef_eps = sched.beta[t - 1] / np.sqrt(1.0 - sched.alpha_bar[t - 1])
    sigma = np.sqrt(sched.posterior_var[t - 1])
    return float(coef_xt), float(coef_eps), float(sigma)
