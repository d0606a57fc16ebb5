"""Stochastic-ensemble uncertainty maps and difference heatmaps.

Repeated sampling for one baseline gives an implicit ensemble; the voxelwise
variance across members highlights the regions the aging model changes most.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from voxelage.denoiser import DenoiserParams, UNetConfig
from voxelage.diffusion import sample
from voxelage.errors import DataError
from voxelage.schedule import NoiseSchedule
from voxelage.volume import Volume

_AXES = {"x": 0, "y": 1, "z": 2, 0: 0, 1: 1, 2: 2}
_AXIS_NAMES = {0: "x", 1: "y", 2: "z"}
_OVERLAY_ALPHA = 0.6
_OVERLAY_HUE = np.array([0.10, 0.35, 1.00], dtype=np.float64)  # single blue hue


@dataclass
class EnsembleResult:
    members: list[Volume]
    mean: Volume
    variance: Volume
    member_seeds: list[int]


def derive_member_seed(base_seed: int, index: int) -> int:
    """Stable per-member seed for ensemble sampling."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, np.uint64)[0])


def ensemble_sample(
    params: DenoiserParams,
    ucfg: UNetConfig,
    c: Volume,
    sched: NoiseSchedule,
    n: int = 10,
    base_seed: int = 0,
    member_seeds: list[int] | None = None,
    sample_fn=None,
) -> EnsembleResult:
    """Draw n independent aged samples for one baseline and reduce them.

    Member i samples with a seed derived from (base_seed, i); passing
    ``member_seeds`` overrides the derivation (test hook / reproduction).
    Variance uses the unbiased n-1 estimator. ``sample_fn(c, seed)`` replaces
    the ancestral sampler when provided (e.g. a strided sampler closure).
    """
    if n < 2:
        raise DataError(f"ensemble needs n >= 2 members, got {n}")
    if member_seeds is None:
        member_seeds = [derive_member_seed(base_seed, i) for i in range(n)]
    elif len(member_seeds) != n:
        raise DataError("member_seeds length must equal n")
    if sample_fn is None:
        sample_fn = lambda cond, seed: sample(params, ucfg, cond, sched, rng_seed=seed)
    members = [sample_fn(c, seed) for seed in member_seeds]

    stack = np.stack([m.data.astype(np.float64) for m in members])
    mean = stack.mean(axis=0)
    var = np.square(stack - mean).sum(axis=0) / (n - 1)
    return EnsembleResult(
        members=members,
        mean=Volume(mean.astype(np.float32), c.spacing),
        variance=Volume(var.astype(np.float32), c.spacing),
        member_seeds=list(member_seeds),
    )


def normalized_delta_map(gt: Volume, pred: Volume) -> Volume:
    """Absolute difference scaled by its maximum, so the output lies in [0, 1]."""
    if gt.dims != pred.dims:
        raise DataError(f"dims mismatch: {gt.dims} vs {pred.dims}")
    d = np.abs(gt.data.astype(np.float64) - pred.data.astype(np.float64))
    peak = d.max()
    if peak > 0:
        d /= peak
    return Volume(d.astype(np.float32), gt.spacing)


def _to_unit(arr: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        return (arr - lo) / (hi - lo), lo, hi
    return np.zeros_like(arr), lo, hi


def _slice2d(data: np.ndarray, axis: int, index: int) -> np.ndarray:
    # rows = the later remaining axis, columns = the earlier one
    return np.take(data, index, axis=axis).T


def export_heatmap_slices(base: Volume, overlay: Volume, axis, indices, out_dir) -> list[str]:
    """Write grayscale slices of ``base`` with ``overlay`` alpha-blended in blue.

    Both volumes are min/max scaled over their full extent first (recorded in
    a ``scale.txt`` sidecar) so slices share one color scale. Returns the
    written PNG paths; re-export with identical inputs is byte-identical.
    """
    if base.dims != overlay.dims:
        raise DataError(f"dims mismatch: {base.dims} vs {overlay.dims}")
    if axis not in _AXES:
        raise DataError(f"axis must be one of x/y/z or 0/1/2, got {axis!r}")
    ax = _AXES[axis]
    n_ax = base.dims[ax]
    indices = [int(i) for i in indices]
    for i in indices:
        if not 0 <= i < n_ax:
            raise DataError(f"slice index {i} out of range 0..{n_ax - 1}")
    os.makedirs(out_dir, exist_ok=True)

    gray, base_lo, base_hi = _to_unit(base.data.astype(np.float64))
    heat, ov_lo, ov_hi = _to_unit(overlay.data.astype(np.float64))
    paths = []
    for i in indices:
        g = _slice2d(gray, ax, i)
        o = _slice2d(heat, ax, i)
        a = _OVERLAY_ALPHA * o
        rgb = g[..., None] * (1.0 - a[..., None]) + _OVERLAY_HUE[None, None, :] * a[..., None]
        img = np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        path = os.path.join(out_dir, f"slice_{_AXIS_NAMES[ax]}{i:03d}.png")
        Image.fromarray(img, "RGB").save(path)
        paths.append(path)
    with open(os.path.join(out_dir, "scale.txt"), "w") as fh:
        fh.write(f"base_min = {base_lo!r}\nbase_max = {base_hi!r}\n")
        fh.write(f"overlay_min = {ov_lo!r}\noverlay_max = {ov_hi!r}\n")
    return paths
