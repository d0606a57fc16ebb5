"""Command-line pipeline: phantom data, preprocessing, training, sampling,
evaluation, and uncertainty maps.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Flags override config-file values; every command echoes its effective
configuration into the output directory so runs are self-describing.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from voxelage import diffusion, phantom, uncertainty, volumetrics
from voxelage.config import RunConfig, config_text, load_config
from voxelage.denoiser import Checkpoint, init_optimizer, load_checkpoint, save_checkpoint
from voxelage.errors import DataError, NumericalError
from voxelage.schedule import linear_schedule
from voxelage.volume import (
    LabelVolume,
    Volume,
    crop_or_pad,
    normalize_masked,
    read_nifti,
    read_volume,
    resample,
    write_volume,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_any(path):
    """Read SGV1 or NIfTI-1 (sniffed by magic), returning Volume or LabelVolume."""
    if not os.path.exists(path):
        raise DataError(f"input file not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head[:4] == b"SGV1":
        return read_volume(path)
    return read_nifti(path)


def _echo_effective(out_dir, text: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.txt"), "w") as fh:
        fh.write(text)


def _flags_text(args, keys) -> str:
    return "".join(f"{k} = {getattr(args, k)}\n" for k in keys if getattr(args, k) is not None)


def _load_run_config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


# ---------------------------------------------------------------------------
# phantom-gen
# ---------------------------------------------------------------------------


def cmd_phantom_gen(args) -> int:
    cfg = _load_run_config(args)
    split = args.split
    n = args.n if args.n is not None else getattr(cfg, f"n_{split}")
    seed = args.seed if args.seed is not None else getattr(cfg, f"seed_{split}")
    out = args.out if args.out else os.path.join(cfg.out_dir, split)
    draws = phantom.draw_pair_specs(n, cfg.phantom, cfg.aging, seed)
    manifest = phantom.write_dataset_files(draws, out)
    _echo_effective(out, config_text(cfg) + f"# split = {split}, n = {n}, seed = {seed}\n")
    print(f"wrote {n} pairs to {out} (manifest: {manifest})")
    return 0


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    vol = _read_any(args.infile)
    if isinstance(vol, LabelVolume):
        raise DataError(f"{args.infile} holds labels; preprocessing expects an intensity volume")
    if args.mask:
        mask_vol = _read_any(args.mask)
        mask_data = (mask_vol.data != 0).astype(np.uint16)
        mask = LabelVolume(mask_data, mask_vol.spacing)
    else:
        mask = LabelVolume((vol.data != 0).astype(np.uint16), vol.spacing)
    # fixed order: normalize on the native grid, then resample, then crop/pad
    vol = normalize_masked(vol, mask, args.norm_lo, args.norm_hi)
    vol = resample(vol, tuple(args.spacing), args.method)
    vol = crop_or_pad(vol, tuple(args.crop), fill=-1.0)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    write_volume(vol, args.out)
    print(f"wrote {args.out} dims={vol.dims} spacing={vol.spacing}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if args.steps is not None:
        cfg.train = replace(cfg.train, steps=args.steps)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    out = args.out if args.out else cfg.out_dir
    os.makedirs(out, exist_ok=True)
    sched = linear_schedule(*cfg.schedule_params)

    if args.data:
        pairs = phantom.read_dataset_files(args.data)
    else:
        pairs = phantom.make_dataset(cfg.n_train, cfg.phantom, cfg.aging, cfg.seed_train)
    val_pairs = None
    if cfg.train.val_every > 0 and cfg.n_val > 0:
        val_pairs = phantom.make_dataset(cfg.n_val, cfg.phantom, cfg.aging, cfg.seed_val)

    init_params = init_opt = None
    start_step = 0
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.cfg != cfg.unet:
            raise DataError("checkpoint architecture does not match the config")
        if ckpt.schedule != cfg.schedule_params:
            raise DataError("checkpoint schedule does not match the config")
        if ckpt.opt is None:
            raise DataError("checkpoint has no optimizer state; cannot resume")
        init_params, init_opt, start_step = ckpt.params, ckpt.opt, ckpt.trained_steps

    ckpt_path = os.path.join(out, "checkpoint.vxck")
    loss_rows: list[tuple[int, float]] = []
    val_rows: list[tuple[int, float]] = []
    final_opt = init_opt

    def on_step(step, loss, params, opt, val_loss):
        nonlocal final_opt
        final_opt = opt
        loss_rows.append((step, loss))
        if val_loss is not None:
            val_rows.append((step, val_loss))
        if cfg.train.checkpoint_every and (step + 1) % cfg.train.checkpoint_every == 0:
            save_checkpoint(
                ckpt_path,
                Checkpoint(cfg.unet, cfg.schedule_params, params, opt, trained_steps=step + 1),
            )

    try:
        params, _ = diffusion.train(
            pairs,
            cfg.train,
            cfg.unet,
            sched,
            rng_seed=cfg.train.seed,
            init_params=init_params,
            init_opt=init_opt,
            start_step=start_step,
            val_pairs=val_pairs,
            on_step=on_step,
        )
        if final_opt is None:
            final_opt = init_optimizer(params, lr=cfg.train.lr)
        save_checkpoint(
            ckpt_path,
            Checkpoint(cfg.unet, cfg.schedule_params, params, final_opt, trained_steps=cfg.train.steps),
        )
    finally:
        with open(os.path.join(out, "loss.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(loss_rows)
        if val_rows:
            with open(os.path.join(out, "val_loss.csv"), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["step", "val_loss"])
                writer.writerows(val_rows)
        _echo_effective(out, config_text(cfg))
    print(f"trained {len(loss_rows)} steps; checkpoint at {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def _sample_from_checkpoint(ckpt: Checkpoint, baseline: Volume, seed: int, ddim: int | None, eta: float) -> Volume:
    sched = linear_schedule(*ckpt.schedule)
    if ddim:
        return diffusion.ddim_sample(ckpt.params, ckpt.cfg, baseline, sched, ddim, eta=eta, rng_seed=seed)
    return diffusion.sample(ckpt.params, ckpt.cfg, baseline, sched, rng_seed=seed)


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    baseline = _read_any(args.baseline)
    if isinstance(baseline, LabelVolume):
        raise DataError(f"{args.baseline} holds labels; conditioning expects an intensity volume")
    aged = _sample_from_checkpoint(ckpt, baseline, args.seed, args.ddim, args.eta)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    write_volume(aged, args.out)
    with open(args.out + ".meta.txt", "w") as fh:
        fh.write(_flags_text(args, ["checkpoint", "baseline", "seed", "ddim", "eta"]))
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    names = sorted(
        set(f for f in os.listdir(args.pred_dir) if f.endswith(".sgv"))
        & set(f for f in os.listdir(args.gt_dir) if f.endswith(".sgv"))
    )
    if not names:
        raise DataError(f"no matching .sgv filenames between {args.pred_dir} and {args.gt_dir}")
    pairs = []
    ids = []
    for name in names:
        gt = read_volume(os.path.join(args.gt_dir, name))
        pred = read_volume(os.path.join(args.pred_dir, name))
        if isinstance(gt, Volume):
            gt = phantom.classify_tissues(gt, cfg.phantom)
        if isinstance(pred, Volume):
            pred = phantom.classify_tissues(pred, cfg.phantom)
        pairs.append((gt, pred))
        ids.append(os.path.splitext(name)[0])
    report = volumetrics.evaluate_report(pairs, pair_ids=ids)

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(volumetrics.format_report_table(report) + "\n")
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(volumetrics.report_to_dict(report), fh, indent=2)
        fh.write("\n")
    with open(os.path.join(args.out, "report.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["structure", "pearson_r", "p_value", "mae_units", "delta_percent", "ba_mean", "ba_low", "ba_high"]
        )
        for structure in volumetrics.STRUCTURES:
            s = report.structures[structure]
            writer.writerow(
                [structure, repr(s.pearson_r), repr(s.p_value), repr(s.mae_units),
                 repr(s.delta_percent), repr(s.ba_mean), repr(s.ba_low), repr(s.ba_high)]
            )
    volumetrics.write_per_case_csv(report, os.path.join(args.out, "per_case.csv"))
    with open(os.path.join(args.out, "excluded.txt"), "w") as fh:
        for pid, reason in report.excluded:
            fh.write(f"{pid}: {reason}\n")
    _echo_effective(args.out, _flags_text(args, ["pred_dir", "gt_dir", "config"]))
    print(volumetrics.format_report_table(report))
    return 0


# ---------------------------------------------------------------------------
# uncertainty
# ---------------------------------------------------------------------------


def cmd_uncertainty(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    baseline = _read_any(args.baseline)
    if isinstance(baseline, LabelVolume):
        raise DataError(f"{args.baseline} holds labels; conditioning expects an intensity volume")
    sched = linear_schedule(*ckpt.schedule)
    sample_fn = None
    if args.ddim:
        sample_fn = lambda cond, seed: diffusion.ddim_sample(
            ckpt.params, ckpt.cfg, cond, sched, args.ddim, eta=args.eta, rng_seed=seed
        )
    result = uncertainty.ensemble_sample(
        ckpt.params, ckpt.cfg, baseline, sched, n=args.n, base_seed=args.seed, sample_fn=sample_fn
    )
    os.makedirs(args.out, exist_ok=True)
    write_volume(result.mean, os.path.join(args.out, "mean.sgv"))
    write_volume(result.variance, os.path.join(args.out, "variance.sgv"))
    if args.save_members:
        for i, member in enumerate(result.members):
            write_volume(member, os.path.join(args.out, f"member{i:02d}.sgv"))
    axis_len = baseline.dims[{"x": 0, "y": 1, "z": 2}[args.axis]]
    if args.indices:
        indices = [int(i) for i in args.indices.split(",")]
    else:
        indices = [int(i) for i in np.floor(np.linspace(0, axis_len - 1, 7) + 0.5)][1:6]
    uncertainty.export_heatmap_slices(result.mean, result.variance, args.axis, indices, args.out)
    _echo_effective(args.out, _flags_text(args, ["checkpoint", "baseline", "n", "seed", "axis", "ddim", "eta"]))
    print(f"wrote ensemble outputs to {args.out} (members: {result.member_seeds})")
    return 0


# ---------------------------------------------------------------------------
# init-config
# ---------------------------------------------------------------------------


def cmd_init_config(args) -> int:
    text = config_text(RunConfig())
    if args.out:
        out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
        os.makedirs(out_dir, exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="voxelage", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    # show defaults in every subcommand's --help
    original_add_parser = sub.add_parser
    sub.add_parser = lambda *a, **kw: original_add_parser(
        *a, formatter_class=argparse.ArgumentDefaultsHelpFormatter, **kw
    )

    p = sub.add_parser("phantom-gen", help="generate a paired phantom dataset")
    p.add_argument("--config", help="run config file (defaults used when omitted)")
    p.add_argument("--n", type=int, default=None, help="number of pairs (default: config count for the split)")
    p.add_argument("--out", default=None, help="output directory (default: <out_dir>/<split>)")
    p.add_argument("--split", choices=("train", "val", "test"), default="train", help="which split seed/count to use")
    p.add_argument("--seed", type=int, default=None, help="dataset seed (default: config seed for the split)")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("preprocess", help="normalize, resample, and crop one volume")
    p.add_argument("--in", dest="infile", required=True, help="input volume (SGV1 or NIfTI-1)")
    p.add_argument("--out", required=True, help="output SGV1 path")
    p.add_argument("--mask", default=None, help="mask volume (nonzero = brain); defaults to input != 0")
    p.add_argument("--spacing", type=float, nargs=3, default=[3.0, 3.0, 2.5], metavar=("SX", "SY", "SZ"))
    p.add_argument("--crop", type=int, nargs=3, default=[64, 64, 64], metavar=("NX", "NY", "NZ"))
    p.add_argument("--norm-lo", type=float, default=0.5, help="lower percentile of the intensity window")
    p.add_argument("--norm-hi", type=float, default=99.5, help="upper percentile of the intensity window")
    p.add_argument("--method", choices=("trilinear", "cubic"), default="trilinear")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the aging model")
    p.add_argument("--config", help="run config file (defaults used when omitted)")
    p.add_argument("--out", default=None, help="output directory (default: config out_dir)")
    p.add_argument("--data", default=None, help="dataset directory from phantom-gen (default: generate from config)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--steps", type=int, default=None, help="override train.steps")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="synthesize one aged volume from a baseline")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", required=True, help="baseline volume (SGV1 or NIfTI-1)")
    p.add_argument("--out", required=True, help="output SGV1 path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ddim", type=int, default=None, help="use the strided sampler with this many steps")
    p.add_argument("--eta", type=float, default=0.0, help="strided-sampler noise scale in [0, 1]")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="volumetric agreement report between two directories")
    p.add_argument("--pred-dir", required=True, help="predicted volumes or labels (.sgv)")
    p.add_argument("--gt-dir", required=True, help="ground-truth volumes or labels (.sgv; matched by filename)")
    p.add_argument("--out", required=True, help="output directory for report + CSVs")
    p.add_argument("--config", help="run config (tissue means for intensity classification)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("uncertainty", help="stochastic ensemble: mean/variance volumes + slice heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10, help="ensemble size")
    p.add_argument("--seed", type=int, default=0, help="base seed; member seeds derive from it")
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--indices", default=None, help="comma-separated slice indices (default: 5 evenly spaced)")
    p.add_argument("--ddim", type=int, default=None, help="use the strided sampler with this many steps")
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--save-members", action="store_true")
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("init-config", help="print or write the default run config")
    p.add_argument("--out", default=None, help="write to this path instead of stdout")
    p.set_defaults(func=cmd_init_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args) or 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
