"""Command-line orchestration: generation, training, evaluation, sweeps.

Every command takes a JSON experiment config (unknown keys rejected) and
an output directory with a fixed layout (data/, ckpt/, reports/, maps/),
and writes a resolved copy of its configuration next to its outputs.
Exit codes: 0 success, 2 config/user error, 3 numeric failure. The
PSTMAE_SEED environment variable overrides the config seed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import data
from .evaluation import evaluate_checkpoint
from .model import CaeConfig, TransformerConfig, load_checkpoint
from .pde import DrParams, InstabilityError, ParameterError, SweParams, simulate_sequence
from .training import (DivergenceError, TrainConfig, train_baseline_lstm,
                       train_cae, train_pstmae)


class ConfigError(ValueError):
    """Bad experiment configuration."""


LAMBDA_GRID = [0.01, 0.02, 0.05, 0.10, 0.20, 0.50, 0.60, 0.70, 1.00]
MISSING_GRID = [1, 2, 3, 4, 5, 6]
DILATION_GRID = [1, 2, 3, 4, 5]

PROFILES = {
    "desk": {"sequences": 40, "grid": 32, "frames": 40},
    "paper": {"sequences": 600, "grid": 128, "frames": 200},
}

DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {
        "kind": "swe",
        "sequences": 40,
        "grid": 32,
        "frames": 40,
        "split_ratios": [0.8, 0.1, 0.1],
        "params": {},          # explicit solver-parameter overrides
    },
    "model": {
        "latent_dim": 128,
        "heads": 2,
        "encoder_depth": 4,
        "decoder_depth": 1,
        "ff_mult": 4,
        "channels": [8, 16, 32, 64, 128],
    },
    "train": {
        "lambda": 0.5,
        "batch": 8,
        "lr_pstmae": 3e-4,
        "lr_baseline": 1e-3,
        "lr_cae": 1e-3,
        "epochs": 30,
        "epochs_cae": 30,
        "missing_ratio": 0.5,
        "eval_missing_ratio": None,
        "dilation": 1,
        "grad_clip": 1.0,
        "t_in": 10,
        "t_out": 5,
    },
    "sweep": {
        "lambda_grid": LAMBDA_GRID,
        "missing_grid": MISSING_GRID,
        "dilation_grid": DILATION_GRID,
        "epochs": None,
        "epochs_cae": None,
    },
}


def _merge_section(defaults, user, path):
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and key != "params":
            if not isinstance(val, dict):
                raise ConfigError(f"config key {path + key!r} must be an object")
            out[key] = _merge_section(defaults[key], val, path + key + ".")
        else:
            out[key] = val
    return out


def load_config(path, scale=None):
    """Merge a user JSON config over the defaults; unknown keys rejected."""
    user = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        with open(p) as f:
            user = json.load(f)
    defaults = copy.deepcopy(DEFAULT_CONFIG)
    if scale:
        defaults["dataset"].update(PROFILES[scale])
        if scale == "paper":
            defaults["train"]["batch"] = 32
    cfg = _merge_section(defaults, user, "")
    env_seed = os.environ.get("PSTMAE_SEED")
    if env_seed is not None:
        cfg["seed"] = int(env_seed)
    return cfg


def train_config_from(cfg) -> TrainConfig:
    t = cfg["train"]
    mr = t["missing_ratio"]
    return TrainConfig(
        lam=t["lambda"], batch=t["batch"], lr_pstmae=t["lr_pstmae"],
        lr_baseline=t["lr_baseline"], lr_cae=t["lr_cae"], epochs=t["epochs"],
        epochs_cae=t["epochs_cae"], seed=cfg["seed"], missing_ratio=mr,
        eval_missing_ratio=t["eval_missing_ratio"], dilation=t["dilation"],
        grad_clip=t["grad_clip"], t_in=t["t_in"], t_out=t["t_out"])


def _model_configs(cfg, channels, grid):
    m = cfg["model"]
    cae = CaeConfig(in_channels=channels, grid=grid, channels=tuple(m["channels"]),
                    latent_dim=m["latent_dim"])
    tr = TransformerConfig(latent_dim=m["latent_dim"], heads=m["heads"],
                           encoder_depth=m["encoder_depth"], decoder_depth=m["decoder_depth"],
                           ff_mult=m["ff_mult"])
    return cae, tr


def _layout(out):
    out = Path(out)
    dirs = {name: out / name for name in ("data", "ckpt", "reports", "maps")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return out, dirs


def write_resolved_config(out_dir, command, cfg, extra=None):
    doc = {"command": command, "config": cfg}
    if extra:
        doc["args"] = extra
    path = Path(out_dir) / "resolved_config.json"
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# generate


def _sequence_params(cfg, kind, index):
    d = cfg["dataset"]
    seed = cfg["seed"]
    if kind == "swe":
        rng = data.mask_rng(seed, 10, index)
        p = SweParams.sample(rng, n_grid=d["grid"], frames=d["frames"], seed=index)
    elif kind == "dr":
        sub_seed = int(data.mask_rng(seed, 10, index).integers(2 ** 31))
        p = DrParams(n_grid=d["grid"], steps=d["frames"], seed=sub_seed)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    for key, val in d["params"].items():
        if not hasattr(p, key):
            raise ConfigError(f"unknown solver parameter {key!r} for kind {kind!r}")
        setattr(p, key, val)
    return p


def _generate_one(args):
    kind, params, path = args
    seq = simulate_sequence(kind, params)
    data.save_sequence(path, seq)
    return seq.params


def cmd_generate(args):
    cfg = load_config(args.config, scale=args.scale)
    out, dirs = _layout(args.out)
    dirs["data"].mkdir(parents=True, exist_ok=True)
    write_resolved_config(out, "generate", cfg, {"kind": args.kind, "strict": args.strict})
    d = cfg["dataset"]
    n = d["sequences"]
    params = [_sequence_params(cfg, args.kind, i) for i in range(n)]
    if args.strict:
        for p in params:
            p.validate(strict=True)
    splits = data.split(n, ratios=tuple(d["split_ratios"]), seed=cfg["seed"])
    split_of = {}
    for name, idx in zip(("train", "val", "test"), splits):
        for i in idx:
            split_of[i] = name
    jobs = [(args.kind, params[i], dirs["data"] / f"seq_{i:04d}.fsq") for i in range(n)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(_generate_one, jobs))
    else:
        for j in jobs:
            _generate_one(j)
    entries = [{"file": f"seq_{i:04d}.fsq", "kind": args.kind,
                "params": _params_dict(params[i]), "split": split_of[i]}
               for i in range(n)]
    data.write_manifest(dirs["data"], entries)
    print(f"generated {n} {args.kind} sequences into {dirs['data']}")
    return 0


def _params_dict(p):
    from dataclasses import asdict
    return asdict(p)


# ---------------------------------------------------------------------------
# training commands


def _require_data(path):
    if path is None:
        raise ConfigError("--data is required")
    p = Path(path)
    if (p / data.MANIFEST_NAME).is_file():
        return p
    if (p / "data" / data.MANIFEST_NAME).is_file():
        return p / "data"
    raise ConfigError(f"dataset manifest not found under {p}")


def _build(cfg, data_dir, dilation=None):
    tc = train_config_from(cfg)
    if dilation is not None:
        tc.dilation = dilation
    return data.build_dataset(data_dir, t_in=tc.t_in, t_out=tc.t_out, dilation=tc.dilation), tc


def cmd_train_cae(args):
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg["train"]["epochs_cae"] = args.epochs
    out, dirs = _layout(args.out)
    write_resolved_config(out, "train-cae", cfg, {"data": str(args.data)})
    dataset, tc = _build(cfg, _require_data(args.data))
    cae_cfg, _ = _model_configs(cfg, dataset.channels, dataset.grid)
    ckpt = dirs["ckpt"] / "cae.ckpt"
    train_cae(dataset, tc, cae_cfg, ckpt, loss_csv=dirs["reports"] / "cae_loss.csv",
              resume=args.resume, log=print)
    print(f"wrote {ckpt}")
    return 0


def cmd_train_pstmae(args):
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    out, dirs = _layout(args.out)
    write_resolved_config(out, "train-pstmae", cfg, {"data": str(args.data), "cae": str(args.cae)})
    dataset, tc = _build(cfg, _require_data(args.data))
    _, tr_cfg = _model_configs(cfg, dataset.channels, dataset.grid)
    cae_ckpt = Path(args.cae) if args.cae else dirs["ckpt"] / "cae.ckpt"
    if not cae_ckpt.is_file():
        raise ConfigError(f"codec checkpoint not found: {cae_ckpt}")
    ckpt = dirs["ckpt"] / "pstmae.ckpt"
    train_pstmae(dataset, cae_ckpt, tc, tr_cfg, ckpt,
                 loss_csv=dirs["reports"] / "pstmae_loss.csv", resume=args.resume, log=print)
    print(f"wrote {ckpt}")
    return 0


def cmd_train_baseline(args):
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    out, dirs = _layout(args.out)
    write_resolved_config(out, "train-baseline", cfg, {"data": str(args.data), "cae": str(args.cae)})
    dataset, tc = _build(cfg, _require_data(args.data))
    cae_ckpt = Path(args.cae) if args.cae else dirs["ckpt"] / "cae.ckpt"
    if not cae_ckpt.is_file():
        raise ConfigError(f"codec checkpoint not found: {cae_ckpt}")
    ckpt = dirs["ckpt"] / "lstm.ckpt"
    train_baseline_lstm(dataset, cae_ckpt, tc, ckpt,
                        loss_csv=dirs["reports"] / "lstm_loss.csv", resume=args.resume, log=print)
    print(f"wrote {ckpt}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args):
    out, dirs = _layout(args.out)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    kind, config, _ = load_checkpoint(ckpt)
    write_resolved_config(out, "evaluate",
                          {"checkpoint_config": config},
                          {"checkpoint": str(ckpt), "split": args.split, "data": str(args.data)})
    maps_dir = dirs["maps"] if args.error_maps else None
    report, pers = evaluate_checkpoint(ckpt, _require_data(args.data), split=args.split,
                                       maps_dir=maps_dir, with_persistence=args.persistence)
    path = report.write_csv(dirs["reports"] / f"{kind}_{args.split}_report.csv")
    print(f"wrote {path}")
    if pers is not None:
        p2 = pers.write_csv(dirs["reports"] / f"persistence_{args.split}_report.csv")
        print(f"wrote {p2}")
    overall = report.overall()
    print(f"{kind} {args.split}: mse {overall.mse:.4e} ssim {overall.ssim:.4f} psnr {overall.psnr:.2f} dB")
    return 0


# ---------------------------------------------------------------------------
# sweep


def _sweep_points(cfg, axis):
    s = cfg["sweep"]
    if axis == "lambda":
        return [("lambda", float(v)) for v in s["lambda_grid"]]
    if axis == "missing":
        return [("missing", int(v)) for v in s["missing_grid"]]
    if axis == "dilation":
        return [("dilation", int(v)) for v in s["dilation_grid"]]
    raise ConfigError(f"unknown sweep axis {axis!r}")


def _run_sweep_point(cfg, axis, value, data_dir, point_dir, cae_ckpt):
    point_cfg = copy.deepcopy(cfg)
    if axis == "lambda":
        point_cfg["train"]["lambda"] = value
    elif axis == "missing":
        point_cfg["train"]["missing_ratio"] = value / point_cfg["train"]["t_in"]
    elif axis == "dilation":
        point_cfg["train"]["dilation"] = value
    if cfg["sweep"]["epochs"] is not None:
        point_cfg["train"]["epochs"] = cfg["sweep"]["epochs"]
    dataset, tc = _build(point_cfg, data_dir)
    _, tr_cfg = _model_configs(point_cfg, dataset.channels, dataset.grid)
    point_dir.mkdir(parents=True, exist_ok=True)
    ckpt = point_dir / "pstmae.ckpt"
    train_pstmae(dataset, cae_ckpt, tc, tr_cfg, ckpt, loss_csv=point_dir / "loss.csv")
    report, _ = evaluate_checkpoint(ckpt, data_dir, split="test")
    report.write_csv(point_dir / "report.csv")
    o = report.overall()
    return {"value": value, "mse": o.mse, "ssim": o.ssim, "psnr": o.psnr}


def cmd_sweep(args):
    cfg = load_config(args.config, scale=args.scale)
    out, dirs = _layout(args.out)
    write_resolved_config(out, "sweep", cfg, {"axis": args.axis, "data": str(args.data)})
    data_dir = _require_data(args.data)
    points = _sweep_points(cfg, args.axis)
    sweep_dir = out / f"sweep_{args.axis}"
    sweep_dir.mkdir(parents=True, exist_ok=True)

    # one shared codec for all points, trained on the undilated frames
    cae_ckpt = sweep_dir / "cae.ckpt"
    if not cae_ckpt.is_file():
        cae_cfg_all = copy.deepcopy(cfg)
        cae_cfg_all["train"]["dilation"] = 1
        if cfg["sweep"]["epochs_cae"] is not None:
            cae_cfg_all["train"]["epochs_cae"] = cfg["sweep"]["epochs_cae"]
        dataset, tc = _build(cae_cfg_all, data_dir)
        cae_cfg, _ = _model_configs(cae_cfg_all, dataset.channels, dataset.grid)
        train_cae(dataset, tc, cae_cfg, cae_ckpt)

    results = []
    for axis_name, value in points:
        point_dir = sweep_dir / f"point_{value:g}"
        done = point_dir / "report.csv"
        if done.is_file():
            with open(point_dir / "summary.json") as f:
                results.append(json.load(f))
            print(f"skipping completed point {value:g}")
            continue
        res = _run_sweep_point(cfg, args.axis, value, data_dir, point_dir, cae_ckpt)
        with open(point_dir / "summary.json", "w") as f:
            json.dump(res, f, sort_keys=True)
        results.append(res)
        print(f"sweep point {value:g}: mse {res['mse']:.4e}")
    combined = dirs["reports"] / f"sweep_{args.axis}.csv"
    with open(combined, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([args.axis, "mse", "ssim", "psnr"])
        for r in results:
            w.writerow([r["value"], f"{r['mse']:.10e}", f"{r['ssim']:.8f}", f"{r['psnr']:.6f}"])
    print(f"wrote {combined}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="pstmae", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a dataset")
    g.add_argument("--kind", choices=("swe", "dr"), required=True)
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--scale", choices=("desk", "paper"), default="desk")
    g.add_argument("--strict", action="store_true", help="reject parameters outside published ranges")
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    for name, fn, needs_cae in (("train-cae", cmd_train_cae, False),
                                ("train-pstmae", cmd_train_pstmae, True),
                                ("train-baseline", cmd_train_baseline, True)):
        t = sub.add_parser(name, help=f"{name} on a generated dataset")
        t.add_argument("--config", default=None)
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--resume", default=None)
        t.add_argument("--epochs", type=int, default=None)
        if needs_cae:
            t.add_argument("--cae", default=None, help="codec checkpoint (default <out>/ckpt/cae.ckpt)")
        t.set_defaults(func=fn)

    e = sub.add_parser("evaluate", help="metrics for a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--error-maps", action="store_true")
    e.add_argument("--persistence", action="store_true",
                   help="also score the copy-last-frame baseline")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="train+evaluate across a parameter grid")
    s.add_argument("--axis", choices=("lambda", "missing", "dilation"), required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scale", choices=("desk", "paper"), default="desk")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InstabilityError, DivergenceError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
