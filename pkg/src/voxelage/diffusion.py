"""Training loop and conditional sampling for the aging diffusion model.

The clean baseline volume rides along as a second input channel at every
denoising step and is never noised; only the aged target is corrupted.

Randomness conventions (all numpy PCG64, reproducible across runs):
  * training epoch e shuffles pairs with SeedSequence([seed, 0, e]);
  * training step k draws its timestep and noise with SeedSequence([seed, 1, k]),
    so resuming from a checkpoint at step k replays the uninterrupted run;
  * validation pair j always uses SeedSequence([seed, 2, j]);
  * sampling draws x_T first, then one z per stochastic step from the call's
    own generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from voxelage.denoiser import (
    DenoiserParams,
    OptimizerState,
    UNetConfig,
    adam_step,
    init_denoiser,
    init_optimizer,
    loss_simple,
    to_tensors,
    unet_apply,
)
from voxelage.errors import DataError, NumericalError
from voxelage.schedule import NoiseSchedule, posterior_coeffs
from voxelage.volume import LabelVolume, Volume

_RANGE_TOL = 1e-5


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 1
    lr: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0  # optimizer steps between checkpoint callbacks; 0 = never
    val_every: int = 0  # optimizer steps between validation passes; 0 = never

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise DataError("steps must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise DataError("learning rate must be positive")
        if self.seed < 0:
            raise DataError("seed must be non-negative")


@dataclass
class TrainingPair:
    """One subject: baseline scan (conditioning) and its two-year-aged scan."""

    baseline: Volume
    aged: Volume
    baseline_labels: LabelVolume | None = None
    aged_labels: LabelVolume | None = None

    def __post_init__(self):
        if self.baseline.dims != self.aged.dims or self.baseline.spacing != self.aged.spacing:
            raise DataError("baseline and aged volumes must share dims and spacing")
        for vol in (self.baseline, self.aged):
            if np.abs(vol.data).max() > 1.0 + _RANGE_TOL:
                raise DataError("pair intensities must lie in [-1, 1]; normalize first")
        for lab in (self.baseline_labels, self.aged_labels):
            if lab is not None and lab.dims != self.baseline.dims:
                raise DataError("label dims must match the paired volumes")


def _check_conditioning(c: Volume, cfg: UNetConfig) -> None:
    cfg.check_dims(c.dims)
    if np.abs(c.data).max() > 1.0 + _RANGE_TOL:
        raise DataError("conditioning volume must lie in [-1, 1]; normalize first")


def _epoch_order(n_pairs: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0, epoch]))
    return rng.permutation(n_pairs)


def _mean_val_loss(
    params: DenoiserParams,
    ucfg: UNetConfig,
    val_pairs: list[TrainingPair],
    sched: NoiseSchedule,
    seed: int,
) -> float:
    total = 0.0
    for j, pair in enumerate(val_pairs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2, j]))
        t = int(rng.integers(1, sched.T + 1))
        eps = Volume(rng.standard_normal(pair.aged.dims, dtype=np.float32), pair.aged.spacing)
        loss, _ = loss_simple(params, ucfg, pair, t, eps, sched, with_grad=False)
        total += loss
    return total / len(val_pairs)


def train(
    pairs: list[TrainingPair],
    cfg: TrainConfig,
    ucfg: UNetConfig,
    sched: NoiseSchedule,
    rng_seed: int | None = None,
    init_params: DenoiserParams | None = None,
    init_opt: OptimizerState | None = None,
    start_step: int = 0,
    val_pairs: list[TrainingPair] | None = None,
    on_step=None,
) -> tuple[DenoiserParams, np.ndarray]:
    """Optimize the denoiser; returns final parameters and per-step losses.

    Each step draws a pair from the current epoch's shuffle, a timestep
    uniform on 1..T, and a standard-normal noise field, then applies one Adam
    update on the noise-prediction MSE. Deterministic given the seed;
    ``start_step``/``init_params``/``init_opt`` resume a checkpointed run on
    the identical trajectory. ``on_step(step, loss, params, opt, val_loss)``
    is invoked after every update (val_loss is None off-cadence).
    """
    if not pairs:
        raise DataError("need at least one training pair")
    seed = cfg.seed if rng_seed is None else int(rng_seed)
    if seed < 0:
        raise DataError("seed must be non-negative")
    params = init_params if init_params is not None else init_denoiser(ucfg)
    opt = init_opt if init_opt is not None else init_optimizer(params, lr=cfg.lr)

    draws_per_epoch = len(pairs)
    losses = []
    for step in range(start_step, cfg.steps):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1, step]))
        batch_losses = []
        grad_sum: dict[str, np.ndarray] | None = None
        for b in range(cfg.batch_size):
            draw = step * cfg.batch_size + b
            epoch, slot = divmod(draw, draws_per_epoch)
            pair = pairs[int(_epoch_order(draws_per_epoch, seed, epoch)[slot])]
            t = int(rng.integers(1, sched.T + 1))
            eps = Volume(rng.standard_normal(pair.aged.dims, dtype=np.float32), pair.aged.spacing)
            loss, grads = loss_simple(params, ucfg, pair, t, eps, sched)
            batch_losses.append(loss)
            if grad_sum is None:
                grad_sum = grads
            else:
                for k in grad_sum:
                    grad_sum[k] += grads[k]
        loss = float(np.mean(batch_losses))
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {step}")
        if cfg.batch_size > 1:
            for k in grad_sum:
                grad_sum[k] /= cfg.batch_size
        params, opt = adam_step(params, opt, grad_sum)
        losses.append(loss)
        if on_step is not None:
            val_loss = None
            if val_pairs and cfg.val_every and (step + 1) % cfg.val_every == 0:
                val_loss = _mean_val_loss(params, ucfg, val_pairs, sched, seed)
            on_step(step, loss, params, opt, val_loss)
    return params, np.asarray(losses, dtype=np.float64)


def sample(
    params: DenoiserParams,
    ucfg: UNetConfig,
    c: Volume,
    sched: NoiseSchedule,
    rng_seed: int,
    clamp: bool = True,
) -> Volume:
    """Ancestral sampling from pure noise, conditioned on the baseline c.

    Runs t = T..1; the t=1 step is noiseless (sigma is exactly 0 there). The
    final volume is clamped to [-1, 1] unless ``clamp`` is False (used by
    numerical replay tests). Deterministic given rng_seed.
    """
    _check_conditioning(c, ucfg)
    rng = np.random.default_rng(rng_seed)
    tensors = to_tensors(params)
    tdtype = torch.float64 if params.dtype == np.float64 else torch.float32
    c_t = torch.from_numpy(c.data).to(tdtype)[None, None]
    x = torch.from_numpy(rng.standard_normal(c.dims, dtype=np.float32)).to(tdtype)[None, None]
    for t in range(sched.T, 0, -1):
        eps_hat = unet_apply(tensors, ucfg, torch.cat([x, c_t], dim=1), t / sched.T)
        coef_xt, coef_eps, sigma = posterior_coeffs(sched, t)
        x = coef_xt * (x - coef_eps * eps_hat)
        if t > 1:
            z = torch.from_numpy(rng.standard_normal(c.dims, dtype=np.float32)).to(tdtype)
            x = x + sigma * z[None, None]
        if not torch.isfinite(x).all():
            raise NumericalError(f"non-finite volume after denoising step t={t}")
    out = x[0, 0].numpy().astype(np.float32)
    if clamp:
        np.clip(out, -1.0, 1.0, out=out)
    return Volume(out, c.spacing)


def ddim_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Evenly strided increasing timestep subsequence ending at T."""
    if not 1 <= n_steps <= T:
        raise DataError(f"n_steps must be in 1..{T}, got {n_steps}")
    return np.floor(np.linspace(1, T, n_steps) + 0.5).astype(np.int64)


def ddim_coeffs(sched: NoiseSchedule, taus: np.ndarray, eta: float):
    """Per-transition update coefficients for the strided sampler.

    For each tau (walked in decreasing order) the update is
    x_prev = coef_x * x + coef_eps * eps_hat + sigma * z, where the previous
    point is the preceding tau in the subsequence (0 for the last jump, with
    alpha_bar[0] = 1). With eta=1 and the full 1..T sequence these coincide
    with the ancestral coefficients; with eta=0 every sigma is 0.
    """
    if not 0.0 <= eta <= 1.0:
        raise DataError(f"eta must be in [0, 1], got {eta}")
    coeffs = []
    for i in range(len(taus) - 1, -1, -1):
        t = int(taus[i])
        prev = int(taus[i - 1]) if i > 0 else 0
        ab_t = sched.alpha_bar_at(t)
        ab_p = sched.alpha_bar_at(prev)
        sigma = eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)
        coef_x = np.sqrt(ab_p / ab_t)
        coef_eps = np.sqrt(max(1.0 - ab_p - sigma**2, 0.0)) - np.sqrt(ab_p * (1.0 - ab_t) / ab_t)
        coeffs.append((t, float(coef_x), float(coef_eps), float(sigma)))
    return coeffs


def ddim_sample(
    params: DenoiserParams,
    ucfg: UNetConfig,
    c: Volume,
    sched: NoiseSchedule,
    n_steps: int,
    eta: float = 0.0,
    rng_seed: int = 0,
    clamp: bool = True,
) -> Volume:
    """Accelerated sampling over an evenly strided timestep subsequence.

    eta=0 is the deterministic limit (no noise beyond x_T); eta=1 matches
    ancestral sampling's noise scale on the same subsequence.
    """
    _check_conditioning(c, ucfg)
    taus = ddim_timesteps(sched.T, n_steps)
    rng = np.random.default_rng(rng_seed)
    tensors = to_tensors(params)
    tdtype = torch.float64 if params.dtype == np.float64 else torch.float32
    c_t = torch.from_numpy(c.data).to(tdtype)[None, None]
    x = torch.from_numpy(rng.standard_normal(c.dims, dtype=np.float32)).to(tdtype)[None, None]
    for t, coef_x, coef_eps, sigma in ddim_coeffs(sched, taus, eta):
        eps_hat = unet_apply(tensors, ucfg, torch.cat([x, c_t], dim=1), t / sched.T)
        x = coef_x * x + coef_eps * eps_hat
        if sigma > 0.0:
            z = torch.from_numpy(rng.standard_normal(c.dims, dtype=np.float32)).to(tdtype)
            x = x + sigma * z[None, None]
        if not torch.isfinite(x).all():
            raise NumericalError(f"non-finite volume after denoising step t={t}")
    out = x[0, 0].numpy().astype(np.float32)
    if clamp:
        np.clip(out, -1.0, 1.0, out=out)
    return Volume(out, c.spacing)
