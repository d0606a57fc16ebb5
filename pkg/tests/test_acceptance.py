"""End-to-end acceptance gates.

Each criterion is one test; the conftest terminal-summary hook prints one
PASS/FAIL line per criterion after the run. Two session fixtures carry the
expensive work: a 2,000-step overfit run on a single 16^3 pair and the
desk-scale 32^3 experiment (200 training + 50 test subjects). Expect the
whole module to take on the order of an hour on one CPU core.
"""

import csv
import math
from types import SimpleNamespace

import mpmath
import numpy as np
import pytest

from voxelage import cli
from voxelage.denoiser import (
    Checkpoint,
    UNetConfig,
    init_denoiser,
    loss_simple,
    save_checkpoint,
)
from voxelage.diffusion import TrainConfig, ddim_sample, sample, train
from voxelage.errors import DataError
from voxelage.phantom import (
    AgingSpec,
    PhantomSpec,
    analytic_volumes,
    classify_tissues,
    draw_pair_specs,
    make_dataset,
    render,
    render_pair,
)
from voxelage.schedule import linear_schedule, q_sample
from voxelage.uncertainty import ensemble_sample, export_heatmap_slices
from voxelage.volume import LabelVolume, Volume, read_nifti, read_volume, write_volume
from voxelage.volumetrics import (
    STRUCTURES,
    bland_altman,
    delta_percent,
    evaluate_report,
    exclusion_filter,
    mae,
    pearson,
    structure_volumes,
    write_per_case_csv,
)

DESK_UNET = UNetConfig(base_channels=8, channel_mults=(1, 2, 4), time_embed_dim=32, groupnorm_groups=4, seed=0)
GRADCHECK_UNET = UNetConfig(base_channels=4, channel_mults=(1, 2), time_embed_dim=8, groupnorm_groups=2, seed=5)


def _pearson_r(a, b):
    return float(np.corrcoef(a.ravel().astype(np.float64), b.ravel().astype(np.float64))[0, 1])


# ---------------------------------------------------------------------------
# session fixtures: the two training runs
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def overfit_run():
    spec = PhantomSpec(dims=(16, 16, 16), spacing=(8.0, 8.0, 8.0))
    pairs = make_dataset(1, spec, AgingSpec(), seed=42)
    sched = linear_schedule(1000)
    tcfg = TrainConfig(steps=2000, seed=5, lr=1e-3)
    params, losses = train(pairs, tcfg, DESK_UNET, sched)
    return SimpleNamespace(spec=spec, pair=pairs[0], sched=sched, ucfg=DESK_UNET, params=params, losses=losses)


@pytest.fixture(scope="session")
def desk_run():
    spec = PhantomSpec()  # 32^3 at 4 mm
    aging = AgingSpec()  # growth 0.10 +- 0.05, thinning 0.4 +- 0.2 mm
    train_pairs = make_dataset(200, spec, aging, seed=1001)
    test_pairs = [render_pair(d) for d in draw_pair_specs(50, spec, aging, seed=1003)]
    sched = linear_schedule(1000)
    tcfg = TrainConfig(steps=12000, seed=11, lr=1e-3)
    params, losses = train(train_pairs, tcfg, DESK_UNET, sched)
    # one prediction per held-out subject; the strided sampler keeps the
    # evaluation pass tractable on one core (the step budget cap is 50k)
    predictions = [
        ddim_sample(params, DESK_UNET, pair.baseline, sched, 100, eta=0.0, rng_seed=9000 + i)
        for i, pair in enumerate(test_pairs)
    ]
    pred_labels = [classify_tissues(p, spec) for p in predictions]
    return SimpleNamespace(
        spec=spec,
        sched=sched,
        ucfg=DESK_UNET,
        params=params,
        losses=losses,
        test_pairs=test_pairs,
        predictions=predictions,
        pred_labels=pred_labels,
    )


# ---------------------------------------------------------------------------
# 1. schedule correctness
# ---------------------------------------------------------------------------


def test_criterion_01_schedule_correctness():
    sched = linear_schedule(1000)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    for table in (sched.beta, sched.alpha, sched.alpha_bar):
        assert np.isfinite(table).all()
        assert np.all(table > 0) and np.all(table <= 1.0)
    assert np.isfinite(sched.posterior_var).all()
    assert sched.posterior_var[0] == 0.0 and np.all(sched.posterior_var >= 0)
    prod = 1.0
    for b in sched.beta:
        prod *= 1.0 - float(b)
    assert abs(sched.alpha_bar[-1] - prod) <= 1e-12 * prod


# ---------------------------------------------------------------------------
# 2. forward-process Monte-Carlo statistics
# ---------------------------------------------------------------------------


def test_criterion_02_forward_process_statistics():
    sched = linear_schedule(1000)
    n = 100_000
    dims = (50, 50, 40)  # one independent draw per voxel
    rng = np.random.default_rng(2024)
    x0 = Volume(np.zeros(dims, dtype=np.float32))
    for t in (1, 500, 1000):
        eps = Volume(rng.standard_normal(dims).astype(np.float32))
        out = q_sample(x0, t, eps, sched)
        var = out.data.astype(np.float64).var(ddof=1)
        target = 1.0 - float(sched.alpha_bar[t - 1])
        se = target * math.sqrt(2.0 / (n - 1))
        assert abs(var - target) < 3 * se, f"t={t}: var {var} vs {target} (3se={3 * se})"


# ---------------------------------------------------------------------------
# 3. full gradient verification
# ---------------------------------------------------------------------------


def test_criterion_03_gradient_verification():
    rng = np.random.default_rng(42)
    params = init_denoiser(GRADCHECK_UNET, dtype=np.float64)
    for name in params.arrays:  # break zero/symmetric states, head included
        params.arrays[name] += 0.05 * rng.standard_normal(params.arrays[name].shape)
    sched = linear_schedule(50)
    dims = (8, 8, 8)
    c = Volume(rng.uniform(-1, 1, dims).astype(np.float32))
    x0 = Volume(rng.uniform(-1, 1, dims).astype(np.float32))
    eps = Volume(rng.standard_normal(dims).astype(np.float32))
    t = 17
    _, grads = loss_simple(params, GRADCHECK_UNET, (c, x0), t, eps, sched)

    h = 1e-5
    worst = 0.0
    for name, arr in params.arrays.items():
        flat = arr.ravel()
        fd = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = loss_simple(params, GRADCHECK_UNET, (c, x0), t, eps, sched, with_grad=False)
            flat[i] = orig - h
            lm, _ = loss_simple(params, GRADCHECK_UNET, (c, x0), t, eps, sched, with_grad=False)
            flat[i] = orig
            fd[i] = (lp - lm) / (2 * h)
        g = grads[name].ravel()
        rel = np.abs(g - fd).max() / max(np.abs(g).max(), np.abs(fd).max(), 1e-8)
        worst = max(worst, rel)
        assert rel < 1e-6, f"{name}: array relative error {rel:.3e}"
    assert worst < 1e-6


# ---------------------------------------------------------------------------
# 4. overfit sanity
# ---------------------------------------------------------------------------


def test_criterion_04_overfit_sanity(overfit_run):
    losses = overfit_run.losses
    lead, trail = losses[:100].mean(), losses[-100:].mean()
    assert trail < 0.1 * lead, f"trail/lead = {trail / lead:.3f}"

    untrained = init_denoiser(overfit_run.ucfg)
    aged = overfit_run.pair.aged.data
    s_trained = sample(overfit_run.params, overfit_run.ucfg, overfit_run.pair.baseline, overfit_run.sched, rng_seed=99)
    s_untrained = sample(untrained, overfit_run.ucfg, overfit_run.pair.baseline, overfit_run.sched, rng_seed=99)
    r_trained = _pearson_r(s_trained.data, aged)
    r_untrained = _pearson_r(s_untrained.data, aged)
    assert r_trained > r_untrained + 0.2, f"trained r={r_trained:.3f} untrained r={r_untrained:.3f}"


# ---------------------------------------------------------------------------
# 5. desk-scale volumetric analog
# ---------------------------------------------------------------------------


def test_criterion_05_desk_scale_analog(desk_run, tmp_path):
    gt_pred = [(pair.aged_labels, pl) for pair, pl in zip(desk_run.test_pairs, desk_run.pred_labels)]
    report = evaluate_report(gt_pred)
    assert report.n_included >= 30  # exclusion keeps the bulk of the cases

    # (a) ventricle-volume agreement across held-out subjects
    assert report.structures["vv"].pearson_r >= 0.6, report.structures["vv"]

    # (b) direction of the ventricle change, over all 50 cases
    correct = 0
    for pair, pl in zip(desk_run.test_pairs, desk_run.pred_labels):
        vv_pred = structure_volumes(pl).vv
        vv_base = structure_volumes(pair.baseline_labels).vv
        correct += vv_pred > vv_base
    assert correct >= 0.8 * len(desk_run.test_pairs), f"{correct}/{len(desk_run.test_pairs)}"

    # (c) every report statistic against an independent recomputation of the
    # emitted per-case CSV (explicit-loop formulas, mpmath p-value)
    csv_path = tmp_path / "per_case.csv"
    write_per_case_csv(report, csv_path)
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * report.n_included

    def rel_eq(a, b, tol=1e-9):
        assert abs(a - b) <= tol * max(abs(a), abs(b), 1e-30), (a, b)

    for structure in STRUCTURES:
        gt = [float(r["gt_units"]) for r in rows if r["structure"] == structure]
        pred = [float(r["pred_units"]) for r in rows if r["structure"] == structure]
        n = len(gt)
        assert n == report.n_included
        mg, mp_ = math.fsum(gt) / n, math.fsum(pred) / n
        num = math.fsum((g - mg) * (p - mp_) for g, p in zip(gt, pred))
        den = math.sqrt(math.fsum((g - mg) ** 2 for g in gt) * math.fsum((p - mp_) ** 2 for p in pred))
        r_oracle = num / den
        t_stat = abs(r_oracle) * math.sqrt((n - 2) / (1 - r_oracle**2))
        nu = n - 2
        p_oracle = float(mpmath.betainc(nu / 2, mpmath.mpf(1) / 2, 0, nu / (nu + t_stat**2), regularized=True))
        mae_oracle = math.fsum(abs(g - p) for g, p in zip(gt, pred)) / n
        delta_oracle = math.fsum((p - g) / g * 100.0 for g, p in zip(gt, pred)) / n
        diffs = [p - g for g, p in zip(gt, pred)]
        md = math.fsum(diffs) / n
        sd = math.sqrt(math.fsum((d - md) ** 2 for d in diffs) / (n - 1))
        stats = report.structures[structure]
        rel_eq(stats.pearson_r, r_oracle)
        rel_eq(stats.p_value, p_oracle, tol=1e-9)
        rel_eq(stats.mae_units, mae_oracle)
        rel_eq(stats.delta_percent, delta_oracle)
        rel_eq(stats.ba_mean, md)
        rel_eq(stats.ba_low, md - 1.96 * sd)
        rel_eq(stats.ba_high, md + 1.96 * sd)


# ---------------------------------------------------------------------------
# 6. stochasticity and determinism
# ---------------------------------------------------------------------------


def test_criterion_06_stochasticity_and_determinism(overfit_run, tmp_path):
    c = overfit_run.pair.baseline
    a = sample(overfit_run.params, overfit_run.ucfg, c, overfit_run.sched, rng_seed=1)
    b = sample(overfit_run.params, overfit_run.ucfg, c, overfit_run.sched, rng_seed=2)
    a2 = sample(overfit_run.params, overfit_run.ucfg, c, overfit_run.sched, rng_seed=1)
    assert np.abs(a.data - b.data).max() > 0.0
    assert np.array_equal(a.data, a2.data)

    # CLI file outputs: byte-identical for identical flags, different across seeds
    ckpt_path = tmp_path / "overfit.vxck"
    save_checkpoint(ckpt_path, Checkpoint(overfit_run.ucfg, (1000, 1e-4, 0.02), overfit_run.params, trained_steps=2000))
    base_path = tmp_path / "baseline.sgv"
    write_volume(c, base_path)
    outs = [tmp_path / f"aged{i}.sgv" for i in range(3)]
    for out, seed in zip(outs, (7, 7, 8)):
        code = cli.main([
            "sample", "--checkpoint", str(ckpt_path), "--baseline", str(base_path),
            "--out", str(out), "--seed", str(seed),
        ])
        assert code == 0
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert outs[0].read_bytes() != outs[2].read_bytes()


# ---------------------------------------------------------------------------
# 7. volumetrics oracle equivalence
# ---------------------------------------------------------------------------


def test_criterion_07_volumetrics_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        dims = tuple(int(d) for d in rng.integers(3, 13, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.5, 4.0, size=3))
        data = rng.integers(0, 5, dims).astype(np.uint16)
        sv = structure_volumes(LabelVolume(data, spacing))
        spacing = LabelVolume(data, spacing).spacing  # float32-coerced, as stored
        vox = spacing[0] * spacing[1] * spacing[2]
        counts = {k: 0 for k in range(5)}
        for x in range(dims[0]):
            for y in range(dims[1]):
                for z in range(dims[2]):
                    counts[int(data[x, y, z])] += 1
        assert sv.wmv == float(counts[1]) * vox
        assert sv.gmv == float(counts[2]) * vox
        assert sv.sgmv == float(counts[3]) * vox
        assert sv.vv == float(counts[4]) * vox

    # rendered phantom vs closed-form ellipsoid volumes at 1 mm, then 0.5 mm
    from dataclasses import replace

    from tests.test_phantom import COMPACT

    av = analytic_volumes(COMPACT)
    _, lab1 = render(COMPACT)
    half = replace(COMPACT, dims=(112, 120, 104), spacing=(0.5, 0.5, 0.5))
    _, lab2 = render(half)
    for s in STRUCTURES:
        err1 = abs(getattr(structure_volumes(lab1), s) - getattr(av, s)) / getattr(av, s)
        err2 = abs(getattr(structure_volumes(lab2), s) - getattr(av, s)) / getattr(av, s)
        assert err1 < 0.05, (s, err1)
        assert err2 < err1, (s, err1, err2)


# ---------------------------------------------------------------------------
# 8. statistics oracles
# ---------------------------------------------------------------------------


def test_criterion_08_statistics_oracles():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        n = int(rng.integers(5, 30))
        gt = rng.standard_normal(n) * rng.uniform(0.5, 3) + rng.uniform(-2, 2)
        pred = gt + rng.standard_normal(n) * rng.uniform(0.1, 2)

        r, p = pearson(gt, pred)
        mg, mp_ = math.fsum(gt) / n, math.fsum(pred) / n
        num = math.fsum((g - mg) * (q - mp_) for g, q in zip(gt, pred))
        den = math.sqrt(math.fsum((g - mg) ** 2 for g in gt) * math.fsum((q - mp_) ** 2 for q in pred))
        r_oracle = num / den
        assert abs(r - r_oracle) <= 1e-12 * max(abs(r), abs(r_oracle))
        # the p transform is verified at the implementation's own r: mapping
        # the oracle's r through t(r) amplifies its last-ulp difference past
        # any fixed relative tolerance as |r| -> 1, so that comparison would
        # test conditioning, not correctness
        t_stat = abs(r) * math.sqrt((n - 2) / (1 - r**2))
        nu = n - 2
        p_oracle = float(mpmath.betainc(nu / 2, mpmath.mpf(1) / 2, 0, nu / (nu + t_stat**2), regularized=True))
        assert abs(p - p_oracle) <= 1e-12 * max(abs(p), abs(p_oracle), 1e-300)

        m = mae(gt, pred)
        m_oracle = math.fsum(abs(g - q) for g, q in zip(gt, pred)) / n
        assert abs(m - m_oracle) <= 1e-12 * m_oracle

        safe_gt = np.where(np.abs(gt) < 1e-3, 1.0, gt)
        d = delta_percent(safe_gt, pred)
        d_oracle = math.fsum((q - g) / g * 100.0 for g, q in zip(safe_gt, pred)) / n
        assert abs(d - d_oracle) <= 1e-12 * max(abs(d), abs(d_oracle), 1e-30)

        ba = bland_altman(gt, pred)
        diffs = [q - g for g, q in zip(gt, pred)]
        md = math.fsum(diffs) / n
        sd = math.sqrt(math.fsum((x - md) ** 2 for x in diffs) / (n - 1))
        assert abs(ba.mean_diff - md) <= 1e-12 * max(abs(md), 1e-30)
        assert abs(ba.loa_high - (md + 1.96 * sd)) <= 1e-12 * max(abs(md + 1.96 * sd), 1e-30)
        assert abs(ba.loa_low - (md - 1.96 * sd)) <= 1e-12 * max(abs(md - 1.96 * sd), 1e-30)

    # exclusion filter drops exactly the threshold violators
    from voxelage.volumetrics import StructureVolumes

    units = 1e4
    grid = [29.0, 29.999, 30.0, 30.001, 45.0]
    sgrid = [0.5, 0.999, 1.0, 1.001, 2.0]
    records = [
        (StructureVolumes(wmv=w * units, gmv=10 * units, sgmv=s * units, vv=units), None)
        for w in grid
        for s in sgrid
    ]
    kept, dropped = exclusion_filter(records)
    assert len(kept) + len(dropped) == len(records)
    for rec in kept:
        assert rec[0].wmv_units >= 30 and rec[0].sgmv_units >= 1
    for rec, reason in dropped:
        assert rec[0].wmv_units < 30 or rec[0].sgmv_units < 1
        assert ("WMV below 30" in reason) == (rec[0].wmv_units < 30)
        assert ("sGMV below 1" in reason) == (rec[0].sgmv_units < 1)


# ---------------------------------------------------------------------------
# 9. uncertainty protocol on the trained desk-scale model
# ---------------------------------------------------------------------------


def test_criterion_09_uncertainty_protocol(desk_run, tmp_path):
    c = desk_run.test_pairs[0].baseline
    # paper-sized ensemble via the ancestral sampler
    res = ensemble_sample(desk_run.params, desk_run.ucfg, c, desk_run.sched, n=10, base_seed=77)
    assert len(res.members) == 10
    assert np.all(res.variance.data >= 0.0)
    assert res.variance.data.max() > 0.0  # distinct members -> nonzero variance

    # permutation invariance of the reduction
    stack = np.stack([m.data.astype(np.float64) for m in res.members])
    perm = np.random.default_rng(0).permutation(10)
    np.testing.assert_allclose(stack[perm].mean(axis=0), res.mean.data, atol=1e-5)
    np.testing.assert_allclose(stack[perm].var(axis=0, ddof=1), res.variance.data, atol=1e-5)

    # identical members -> variance exactly zero (fast sampler closure)
    fast = lambda cond, seed: ddim_sample(desk_run.params, desk_run.ucfg, cond, desk_run.sched, 25, eta=1.0, rng_seed=seed)
    forced = ensemble_sample(
        desk_run.params, desk_run.ucfg, c, desk_run.sched, n=10, member_seeds=[5] * 10, sample_fn=fast
    )
    assert np.all(forced.variance.data == 0.0)

    # deterministic slice export
    p1 = export_heatmap_slices(res.mean, res.variance, "z", [4, 12, 16, 20, 28], tmp_path / "a")
    p2 = export_heatmap_slices(res.mean, res.variance, "z", [4, 12, 16, 20, 28], tmp_path / "b")
    assert len(p1) == 5
    for a, b in zip(p1, p2):
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read()


# ---------------------------------------------------------------------------
# 10. I/O round trips
# ---------------------------------------------------------------------------


def test_criterion_10_io_roundtrips(tmp_path):
    rng = np.random.default_rng(10)
    for i in range(20):
        dims = tuple(int(d) for d in rng.integers(1, 8, size=3))
        bits = rng.integers(0, 2**32, size=dims, dtype=np.uint64).astype(np.uint32)
        data = bits.view(np.float32)
        data = np.where(np.isfinite(data), data, np.float32(-0.0))
        vol = Volume(data, tuple(float(s) for s in rng.uniform(0.1, 5, 3)))
        path = tmp_path / f"r{i}.sgv"
        write_volume(vol, path)
        back = read_volume(path)
        assert np.array_equal(back.data.view(np.uint32), vol.data.view(np.uint32))
        assert back.spacing == vol.spacing

    special = np.array([0.0, -0.0, 5e-40, -5e-40, 1.17549435e-38, 3.4e38, -3.4e38, 1.0], dtype=np.float32)
    vol = Volume(special.reshape(2, 2, 2))
    path = tmp_path / "special.sgv"
    write_volume(vol, path)
    assert np.array_equal(read_volume(path).data.view(np.uint32), vol.data.view(np.uint32))

    # hand-constructed NIfTI-1: eight int16 values, scl applied
    from tests.test_volume import build_nifti

    values = np.array([10, -3, 7, 0, 5, 2, -8, 1], dtype=np.int16)
    nii = tmp_path / "hand.nii"
    nii.write_bytes(build_nifti(values=values, pixdim=(2.0, 2.0, 3.0), slope=2.0, inter=1.0))
    v = read_nifti(nii)
    assert v.dims == (2, 2, 2)
    np.testing.assert_array_equal(
        v.data.flatten(order="F"), values.astype(np.float32) * 2.0 + 1.0
    )
    with pytest.raises(DataError, match="bad magic"):
        bad = tmp_path / "bad.nii"
        bad.write_bytes(build_nifti(magic=b"ZZZ\x00"))
        read_nifti(bad)
