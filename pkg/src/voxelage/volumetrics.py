"""Structure volumes and agreement statistics between true and generated scans.

Volumes are reported both in mm^3 and in units of mm^3/10,000, the scale used
for thresholds and error tables. Statistics are computed in float64.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import stats as _scipy_stats

from voxelage.errors import DataError
from voxelage.volume import (
    LABEL_CORTICAL_GM,
    LABEL_SUBCORTICAL_GM,
    LABEL_VENTRICLE,
    LABEL_WM,
    LabelVolume,
)

UNITS_MM3 = 10_000.0  # reporting unit: mm^3 / 10,000
WMV_MIN_UNITS = 30.0  # ground-truth plausibility gates, in reporting units
SGMV_MIN_UNITS = 1.0

STRUCTURES = ("wmv", "gmv", "sgmv", "vv")
STRUCTURE_NAMES = {"wmv": "WMV", "gmv": "GMV", "sgmv": "sGMV", "vv": "VV"}


@dataclass(frozen=True)
class StructureVolumes:
    """White matter, cortical GM, subcortical GM, and ventricle volumes in mm^3."""

    wmv: float
    gmv: float
    sgmv: float
    vv: float

    def __post_init__(self):
        for name in STRUCTURES:
            if getattr(self, name) < 0:
                raise DataError(f"negative structure volume for {name}")

    @property
    def wmv_units(self) -> float:
        return self.wmv / UNITS_MM3

    @property
    def gmv_units(self) -> float:
        return self.gmv / UNITS_MM3

    @property
    def sgmv_units(self) -> float:
        return self.sgmv / UNITS_MM3

    @property
    def vv_units(self) -> float:
        return self.vv / UNITS_MM3

    def units(self, structure: str) -> float:
        return getattr(self, structure) / UNITS_MM3


def structure_volumes(labels: LabelVolume) -> StructureVolumes:
    """Voxel counts times voxel volume, per tissue structure."""
    counts = np.bincount(labels.data.ravel(), minlength=5)
    if len(counts) > 5:
        raise DataError(f"unknown label values up to {len(counts) - 1}")
    vox = labels.voxel_volume_mm3
    return StructureVolumes(
        wmv=float(counts[LABEL_WM]) * vox,
        gmv=float(counts[LABEL_CORTICAL_GM]) * vox,
        sgmv=float(counts[LABEL_SUBCORTICAL_GM]) * vox,
        vv=float(counts[LABEL_VENTRICLE]) * vox,
    )


def _as_series(xs, ys, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise DataError(f"series must be equal-length 1D, got {xs.shape} and {ys.shape}")
    if len(xs) < min_len:
        raise DataError(f"need at least {min_len} points, got {len(xs)}")
    return xs, ys


def pearson(xs, ys) -> tuple[float, float]:
    """Sample Pearson correlation with a two-sided t-distribution p-value."""
    xs, ys = _as_series(xs, ys, 3)
    xc = xs - xs.mean()
    yc = ys - ys.mean()
    sx = np.sqrt((xc * xc).sum())
    sy = np.sqrt((yc * yc).sum())
    if sx == 0.0 or sy == 0.0:
        raise DataError("pearson requires nonzero variance in both series")
    r = float(np.clip((xc * yc).sum() / (sx * sy), -1.0, 1.0))
    n = len(xs)
    if 1.0 - r * r <= 0.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    p = 2.0 * float(_scipy_stats.t.sf(abs(t), n - 2))
    return r, p


def mae(xs, ys) -> float:
    """Mean absolute error, in the caller's units."""
    xs, ys = _as_series(xs, ys, 1)
    return float(np.abs(xs - ys).mean())


def delta_percent(gt, pred, absolute: bool = False) -> float:
    """Mean per-case difference normalized by ground truth, in percent.

    Signed by default (matching the across-case cancellation a mean of signed
    deviations shows); set absolute=True for the magnitude-only variant.
    """
    gt, pred = _as_series(gt, pred, 1)
    if np.any(gt == 0.0):
        raise DataError("delta_percent requires nonzero ground-truth entries")
    rel = (pred - gt) / gt * 100.0
    return float(np.abs(rel).mean() if absolute else rel.mean())


@dataclass(frozen=True)
class BlandAltman:
    mean_diff: float
    loa_low: float
    loa_high: float
    points: tuple[tuple[float, float], ...]  # (per-case mean, per-case diff)


def bland_altman(gt, pred) -> BlandAltman:
    """Agreement statistics: mean difference and 1.96-SD limits of agreement.

    Differences are pred - gt; the SD uses the n-1 sample estimator.
    """
    gt, pred = _as_series(gt, pred, 2)
    diffs = pred - gt
    means = (pred + gt) / 2.0
    mean_diff = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    return BlandAltman(
        mean_diff=mean_diff,
        loa_low=mean_diff - 1.96 * sd,
        loa_high=mean_diff + 1.96 * sd,
        points=tuple(zip(means.tolist(), diffs.tolist())),
    )


def exclusion_filter(records):
    """Drop cases with implausible ground truth: WMV < 30 or sGMV < 1 units.

    ``records`` holds (gt StructureVolumes, pred StructureVolumes) tuples;
    returns (kept, dropped) where dropped entries are (record, reason).
    """
    kept, dropped = [], []
    for record in records:
        gt = record[0]
        reasons = []
        if gt.wmv_units < WMV_MIN_UNITS:
            reasons.append(f"WMV below {WMV_MIN_UNITS:g}")
        if gt.sgmv_units < SGMV_MIN_UNITS:
            reasons.append(f"sGMV below {SGMV_MIN_UNITS:g}")
        if reasons:
            dropped.append((record, "; ".join(reasons)))
        else:
            kept.append(record)
    return kept, dropped


@dataclass(frozen=True)
class StructureStats:
    pearson_r: float
    p_value: float
    mae_units: float
    delta_percent: float
    ba_mean: float
    ba_low: float
    ba_high: float


@dataclass
class VolumetricsReport:
    """Per-structure agreement statistics plus the per-case table behind them.

    All unit-bearing fields are in mm^3/10,000. ``per_case`` rows are
    (pair_id, structure, gt_units, pred_units) over the included cases.
    """

    structures: dict[str, StructureStats]
    n_included: int
    n_excluded: int
    excluded: list[tuple[str, str]]  # (pair_id, reason)
    per_case: list[tuple[str, str, float, float]]


def evaluate_report(pairs, pair_ids=None) -> VolumetricsReport:
    """Full evaluation over (gt LabelVolume, pred LabelVolume) pairs.

    Applies structure extraction, the ground-truth exclusion filter, and all
    four statistics per structure.
    """
    if not pairs:
        raise DataError("no pairs to evaluate")
    if pair_ids is None:
        pair_ids = [f"{i:04d}" for i in range(len(pairs))]
    records = [(structure_volumes(gt), structure_volumes(pred)) for gt, pred in pairs]
    flags = []
    excluded = []
    for pid, record in zip(pair_ids, records):
        kept_one, dropped_one = exclusion_filter([record])
        ok = bool(kept_one)
        flags.append(ok)
        if not ok:
            excluded.append((pid, dropped_one[0][1]))
    included = [(pid, rec) for pid, rec, ok in zip(pair_ids, records, flags) if ok]
    if not included:
        raise DataError("all records excluded by the plausibility filter")

    per_case = []
    stats = {}
    for structure in STRUCTURES:
        gt_series = np.array([rec[0].units(structure) for _, rec in included])
        pred_series = np.array([rec[1].units(structure) for _, rec in included])
        for (pid, _), g, p in zip(included, gt_series, pred_series):
            per_case.append((pid, structure, float(g), float(p)))
        r, p_value = pearson(gt_series, pred_series)
        ba = bland_altman(gt_series, pred_series)
        stats[structure] = StructureStats(
            pearson_r=r,
            p_value=p_value,
            mae_units=mae(gt_series, pred_series),
            delta_percent=delta_percent(gt_series, pred_series),
            ba_mean=ba.mean_diff,
            ba_low=ba.loa_low,
            ba_high=ba.loa_high,
        )
    return VolumetricsReport(
        structures=stats,
        n_included=len(included),
        n_excluded=len(excluded),
        excluded=excluded,
        per_case=per_case,
    )


def format_report_table(report: VolumetricsReport) -> str:
    """Human-readable table: structure, Pearson R, MAE (units), Delta %."""
    lines = [
        f"cases included: {report.n_included}   excluded: {report.n_excluded}",
        f"{'structure':<10} {'pearson_r':>10} {'p_value':>12} {'mae_units':>10} "
        f"{'delta_%':>9} {'ba_mean':>9} {'ba_low':>9} {'ba_high':>9}",
    ]
    for structure in STRUCTURES:
        s = report.structures[structure]
        lines.append(
            f"{STRUCTURE_NAMES[structure]:<10} {s.pearson_r:>10.4f} {s.p_value:>12.3e} "
            f"{s.mae_units:>10.4f} {s.delta_percent:>9.3f} {s.ba_mean:>9.4f} "
            f"{s.ba_low:>9.4f} {s.ba_high:>9.4f}"
        )
    return "\n".join(lines)


def report_to_dict(report: VolumetricsReport) -> dict:
    """JSON-ready dictionary form of the report."""
    return {
        "n_included": report.n_included,
        "n_excluded": report.n_excluded,
        "excluded": [{"pair_id": pid, "reason": reason} for pid, reason in report.excluded],
        "structures": {
            name: {
                "pearson_r": s.pearson_r,
                "p_value": s.p_value,
                "mae_units": s.mae_units,
                "delta_percent": s.delta_percent,
                "ba_mean": s.ba_mean,
                "ba_low": s.ba_low,
                "ba_high": s.ba_high,
            }
            for name, s in report.structures.items()
        },
    }


def write_per_case_csv(report: VolumetricsReport, path) -> None:
    """Raw per-case volumes (reporting units) for external plotting/recomputation."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_id", "structure", "gt_units", "pred_units"])
        for pid, structure, gt_u, pred_u in report.per_case:
            writer.writerow([pid, structure, repr(gt_u), repr(pred_u)])
