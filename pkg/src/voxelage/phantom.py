"""Procedural paired (baseline, two-year-aged) brain phantoms.

Phantoms are compositions of axis-aligned ellipsoids on a centered grid, so
every structure volume has a closed form and rendered label maps come with
exact ground truth. Aging is a deterministic geometric transform (ventricle
growth, cortical thinning, slight global drift); across-subject variability
enters only through per-pair parameter jitter.

Containment and disjointness invariants use conservative bounding-box tests:
an ellipsoid's box corner is the maximum of any other ellipsoid's quadratic
form over the box, so corner-inside implies ellipsoid-inside.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from voxelage.diffusion import TrainingPair
from voxelage.errors import DataError
from voxelage.volume import (
    LABEL_BACKGROUND,
    LABEL_CORTICAL_GM,
    LABEL_SUBCORTICAL_GM,
    LABEL_VENTRICLE,
    LABEL_WM,
    LabelVolume,
    Volume,
)

_MAX_REDRAWS = 100


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and intensity model of one synthetic brain.

    All lengths in millimeters, in a frame centered on the grid. The two
    ventricles and each subcortical ellipsoid pair are mirrored in x via the
    sign of the stored center offsets.
    """

    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (4.0, 4.0, 4.0)
    brain_semiaxes: tuple[float, float, float] = (48.0, 57.0, 44.0)
    shell_thickness: float = 5.0
    ventricle_offset: tuple[float, float, float] = (9.0, 4.0, 9.0)
    ventricle_semiaxes: tuple[float, float, float] = (6.5, 15.0, 8.0)
    sgm_centers: tuple[tuple[float, float, float], ...] = ((14.0, -6.0, -12.0), (-14.0, -6.0, -12.0))
    sgm_semiaxes: tuple[tuple[float, float, float], ...] = ((11.0, 15.0, 9.0), (11.0, 15.0, 9.0))
    intensity_wm: float = 0.6
    intensity_gm: float = 0.2
    intensity_sgm: float = 0.35
    intensity_vv: float = -0.5
    intensity_bg: float = -1.0
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if len(self.sgm_centers) != len(self.sgm_semiaxes):
            raise DataError("sgm_centers and sgm_semiaxes must have equal length")
        if min(self.dims) < 1 or min(self.spacing) <= 0:
            raise DataError("dims must be positive and spacing strictly positive")
        for axes in (self.brain_semiaxes, self.ventricle_semiaxes, *self.sgm_semiaxes):
            if min(axes) <= 0:
                raise DataError(f"semi-axes must be positive, got {axes}")
        if not 0 < self.shell_thickness < min(self.brain_semiaxes):
            raise DataError("shell thickness must be positive and below the smallest brain semi-axis")
        for v in (self.intensity_wm, self.intensity_gm, self.intensity_sgm, self.intensity_vv, self.intensity_bg):
            if not -1.0 <= v <= 1.0:
                raise DataError("tissue intensities must lie in [-1, 1]")
        if self.noise_sigma < 0:
            raise DataError("noise sigma must be non-negative")
        wm_axes = self.wm_semiaxes
        for center, axes in self._inner_ellipsoids():
            corner = sum(((abs(c) + a) / w) ** 2 for c, a, w in zip(center, axes, wm_axes))
            if corner >= 1.0:
                raise DataError(
                    f"structure at {center} with semi-axes {axes} is not strictly inside the WM compartment"
                )
        inner = self._inner_ellipsoids()
        for i in range(len(inner)):
            for j in range(i + 1, len(inner)):
                (ci, ai), (cj, aj) = inner[i], inner[j]
                if all(abs(ci[k] - cj[k]) < ai[k] + aj[k] for k in range(3)):
                    raise DataError(f"structures at {ci} and {cj} overlap")

    @property
    def wm_semiaxes(self) -> tuple[float, float, float]:
        return tuple(a - self.shell_thickness for a in self.brain_semiaxes)

    def _inner_ellipsoids(self) -> list[tuple[tuple[float, float, float], tuple[float, float, float]]]:
        ox, oy, oz = self.ventricle_offset
        out = [((ox, oy, oz), self.ventricle_semiaxes), ((-ox, oy, oz), self.ventricle_semiaxes)]
        out += list(zip(self.sgm_centers, self.sgm_semiaxes))
        return out

    def tissue_means(self) -> dict[int, float]:
        return {
            LABEL_BACKGROUND: self.intensity_bg,
            LABEL_WM: self.intensity_wm,
            LABEL_CORTICAL_GM: self.intensity_gm,
            LABEL_SUBCORTICAL_GM: self.intensity_sgm,
            LABEL_VENTRICLE: self.intensity_vv,
        }


@dataclass(frozen=True)
class AgingSpec:
    """Two-year aging transform plus per-pair jitter ranges.

    growth scales the ventricle semi-axes by (1+g); thinning shaves the
    cortical shell in mm; drift rescales the whole brain. The *_jitter fields
    are half-widths of the uniform per-pair draws; the baseline jitters vary
    subject anatomy so volumetrics have across-subject spread.
    """

    growth: float = 0.10
    growth_jitter: float = 0.05
    thinning: float = 0.4
    thinning_jitter: float = 0.2
    drift: float = 0.005
    drift_jitter: float = 0.005
    brain_jitter: float = 0.05
    ventricle_jitter: float = 0.10
    sgm_jitter: float = 0.10
    shell_jitter: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.growth < 0 or self.thinning < 0:
            raise DataError("growth and thinning must be non-negative")
        for j in (self.growth_jitter, self.thinning_jitter, self.drift_jitter,
                  self.brain_jitter, self.ventricle_jitter, self.sgm_jitter, self.shell_jitter):
            if j < 0:
                raise DataError("jitter ranges must be non-negative")


def _grid_coords(dims, spacing):
    return [
        (np.arange(n, dtype=np.float64) - (n - 1) / 2.0) * s
        for n, s in zip(dims, spacing)
    ]


def _inside(x, y, z, center, axes):
    return (
        ((x[:, None, None] - center[0]) / axes[0]) ** 2
        + ((y[None, :, None] - center[1]) / axes[1]) ** 2
        + ((z[None, None, :] - center[2]) / axes[2]) ** 2
    ) <= 1.0


def render(spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    """Rasterize the phantom: exact labels plus a noisy intensity volume.

    Voxel labels resolve by priority ventricle > subcortical GM > WM >
    cortical shell > background; intensities are tissue means plus seeded
    Gaussian noise, clamped to [-1, 1].
    """
    x, y, z = _grid_coords(spec.dims, spec.spacing)
    labels = np.zeros(spec.dims, dtype=np.uint16)
    center = (0.0, 0.0, 0.0)
    labels[_inside(x, y, z, center, spec.brain_semiaxes)] = LABEL_CORTICAL_GM
    labels[_inside(x, y, z, center, spec.wm_semiaxes)] = LABEL_WM
    for c, a in zip(spec.sgm_centers, spec.sgm_semiaxes):
        labels[_inside(x, y, z, c, a)] = LABEL_SUBCORTICAL_GM
    ox, oy, oz = spec.ventricle_offset
    for c in ((ox, oy, oz), (-ox, oy, oz)):
        labels[_inside(x, y, z, c, spec.ventricle_semiaxes)] = LABEL_VENTRICLE

    means = spec.tissue_means()
    lut = np.array([means[k] for k in sorted(means)], dtype=np.float32)
    intensity = lut[labels]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        intensity = intensity + spec.noise_sigma * rng.standard_normal(spec.dims, dtype=np.float32)
        np.clip(intensity, -1.0, 1.0, out=intensity)
    return Volume(intensity.astype(np.float32), spec.spacing), LabelVolume(labels, spec.spacing)


def age_spec(spec: PhantomSpec, aging: AgingSpec) -> PhantomSpec:
    """Apply the deterministic aging transform to a phantom's geometry."""
    return _apply_aging(spec, aging.growth, aging.thinning, aging.drift)


def _apply_aging(spec: PhantomSpec, growth: float, thinning: float, drift: float) -> PhantomSpec:
    return replace(
        spec,
        ventricle_semiaxes=tuple(a * (1.0 + growth) for a in spec.ventricle_semiaxes),
        shell_thickness=spec.shell_thickness - thinning,
        brain_semiaxes=tuple(a * (1.0 + drift) for a in spec.brain_semiaxes),
    )


@dataclass(frozen=True)
class PairDraw:
    """Baseline/aged spec pair plus the jittered parameters that produced it."""

    baseline: PhantomSpec
    aged: PhantomSpec
    params: dict[str, float]


def draw_pair_specs(n: int, base_spec: PhantomSpec, aging: AgingSpec, seed: int | None = None) -> list[PairDraw]:
    """Draw n jittered subject geometries with their aged counterparts.

    Deterministic given the seed; pair i uses the substream
    SeedSequence([seed, i]), so disjoint dataset seeds give disjoint draws.
    Jitter combinations that violate geometry invariants are redrawn, up to a
    bounded retry count.
    """
    if n < 1:
        raise DataError("need n >= 1 pairs")
    seed = aging.seed if seed is None else int(seed)
    if seed < 0:
        raise DataError("seed must be non-negative")
    draws = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        for attempt in range(_MAX_REDRAWS):
            try:
                bj = rng.uniform(-aging.brain_jitter, aging.brain_jitter, size=3)
                sj = rng.uniform(-aging.shell_jitter, aging.shell_jitter)
                vj = rng.uniform(-aging.ventricle_jitter, aging.ventricle_jitter)
                gj = rng.uniform(-aging.sgm_jitter, aging.sgm_jitter)
                growth = aging.growth + rng.uniform(-aging.growth_jitter, aging.growth_jitter)
                thinning = aging.thinning + rng.uniform(-aging.thinning_jitter, aging.thinning_jitter)
                drift = aging.drift + rng.uniform(-aging.drift_jitter, aging.drift_jitter)
                seed_b, seed_a = (int(s) for s in rng.integers(0, 2**63 - 1, size=2))
                if growth < 0 or thinning < 0:
                    raise DataError("negative aging draw")
                baseline = replace(
                    base_spec,
                    brain_semiaxes=tuple(a * (1.0 + j) for a, j in zip(base_spec.brain_semiaxes, bj)),
                    shell_thickness=base_spec.shell_thickness * (1.0 + sj),
                    ventricle_semiaxes=tuple(a * (1.0 + vj) for a in base_spec.ventricle_semiaxes),
                    sgm_semiaxes=tuple(
                        tuple(a * (1.0 + gj) for a in axes) for axes in base_spec.sgm_semiaxes
                    ),
                    seed=seed_b,
                )
                aged = replace(_apply_aging(baseline, growth, thinning, drift), seed=seed_a)
                params = {
                    "brain_jitter_x": bj[0], "brain_jitter_y": bj[1], "brain_jitter_z": bj[2],
                    "shell_jitter": sj, "ventricle_jitter": vj, "sgm_jitter": gj,
                    "growth": growth, "thinning": thinning, "drift": drift,
                }
                draws.append(PairDraw(baseline=baseline, aged=aged, params=params))
                break
            except DataError:
                if attempt == _MAX_REDRAWS - 1:
                    raise DataError(
                        f"could not draw valid geometry for pair {i} after {_MAX_REDRAWS} attempts"
                    )
    return draws


def render_pair(draw: PairDraw) -> TrainingPair:
    vol_b, lab_b = render(draw.baseline)
    vol_a, lab_a = render(draw.aged)
    return TrainingPair(baseline=vol_b, aged=vol_a, baseline_labels=lab_b, aged_labels=lab_a)


def make_dataset(n: int, base_spec: PhantomSpec, aging: AgingSpec, seed: int | None = None) -> list[TrainingPair]:
    """Render n co-registered, labeled (baseline, aged) phantom pairs."""
    return [render_pair(d) for d in draw_pair_specs(n, base_spec, aging, seed)]


def _ellipsoid_volume(axes) -> float:
    return 4.0 / 3.0 * np.pi * axes[0] * axes[1] * axes[2]


def analytic_volumes(spec: PhantomSpec):
    """Closed-form structure volumes (mm^3) implied by the geometry."""
    from voxelage.volumetrics import StructureVolumes

    vv = 2.0 * _ellipsoid_volume(spec.ventricle_semiaxes)
    sgmv = sum(_ellipsoid_volume(a) for a in spec.sgm_semiaxes)
    wm_comp = _ellipsoid_volume(spec.wm_semiaxes)
    brain = _ellipsoid_volume(spec.brain_semiaxes)
    return StructureVolumes(wmv=wm_comp - vv - sgmv, gmv=brain - wm_comp, sgmv=sgmv, vv=vv)


_MANIFEST_PARAM_COLS = (
    "brain_jitter_x", "brain_jitter_y", "brain_jitter_z", "shell_jitter",
    "ventricle_jitter", "sgm_jitter", "growth", "thinning", "drift",
)


def write_dataset_files(draws: list[PairDraw], out_dir) -> str:
    """Render draws to SGV1 files plus a manifest CSV with analytic volumes.

    Returns the manifest path. Layout per pair i: pair{i:04d}_baseline.sgv,
    pair{i:04d}_aged.sgv and the matching *_labels.sgv files.
    """
    import csv
    import os

    from voxelage.volume import write_volume

    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.csv")
    header = ["pair_id", "baseline", "aged", "baseline_labels", "aged_labels"]
    header += [f"base_{s}_mm3" for s in ("wmv", "gmv", "sgmv", "vv")]
    header += [f"aged_{s}_mm3" for s in ("wmv", "gmv", "sgmv", "vv")]
    header += list(_MANIFEST_PARAM_COLS)
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, draw in enumerate(draws):
            pid = f"pair{i:04d}"
            names = {
                "baseline": f"{pid}_baseline.sgv",
                "aged": f"{pid}_aged.sgv",
                "baseline_labels": f"{pid}_baseline_labels.sgv",
                "aged_labels": f"{pid}_aged_labels.sgv",
            }
            pair = render_pair(draw)
            write_volume(pair.baseline, os.path.join(out_dir, names["baseline"]))
            write_volume(pair.aged, os.path.join(out_dir, names["aged"]))
            write_volume(pair.baseline_labels, os.path.join(out_dir, names["baseline_labels"]))
            write_volume(pair.aged_labels, os.path.join(out_dir, names["aged_labels"]))
            base_av = analytic_volumes(draw.baseline)
            aged_av = analytic_volumes(draw.aged)
            row = [pid, names["baseline"], names["aged"], names["baseline_labels"], names["aged_labels"]]
            row += [repr(getattr(base_av, s)) for s in ("wmv", "gmv", "sgmv", "vv")]
            row += [repr(getattr(aged_av, s)) for s in ("wmv", "gmv", "sgmv", "vv")]
            row += [repr(float(draw.params[k])) for k in _MANIFEST_PARAM_COLS]
            writer.writerow(row)
    return manifest_path


def read_dataset_files(data_dir) -> list[TrainingPair]:
    """Load the pairs a manifest points at (paths relative to the manifest)."""
    import csv
    import os

    from voxelage.volume import read_volume

    manifest_path = os.path.join(data_dir, "manifest.csv")
    if not os.path.exists(manifest_path):
        raise DataError(f"no manifest.csv in {data_dir}")
    pairs = []
    with open(manifest_path, newline="") as fh:
        for row in csv.DictReader(fh):
            pairs.append(
                TrainingPair(
                    baseline=read_volume(os.path.join(data_dir, row["baseline"])),
                    aged=read_volume(os.path.join(data_dir, row["aged"])),
                    baseline_labels=read_volume(os.path.join(data_dir, row["baseline_labels"])),
                    aged_labels=read_volume(os.path.join(data_dir, row["aged_labels"])),
                )
            )
    if not pairs:
        raise DataError(f"manifest {manifest_path} lists no pairs")
    return pairs


def classify_tissues(vol: Volume, spec: PhantomSpec | None = None) -> LabelVolume:
    """Label each voxel by the nearest tissue mean intensity.

    Desk-scale stand-in for segmenting a model-generated volume; ties resolve
    to the lowest label id.
    """
    means = (spec or PhantomSpec()).tissue_means()
    best_label = np.zeros(vol.dims, dtype=np.uint16)
    best_dist = np.full(vol.dims, np.inf, dtype=np.float32)
    for label in sorted(means):
        dist = np.abs(vol.data - np.float32(means[label]))
        closer = dist < best_dist
        best_label[closer] = label
        best_dist[closer] = dist[closer]
    return LabelVolume(best_label, vol.spacing)
