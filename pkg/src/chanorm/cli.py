"""Channel-normalization experiments from the command line.

Exit codes: 0 ok, 1 configuration error, 2 data error (including data whose
shape does not fit the model), 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .backbones import BACKBONE_KINDS, NORM_CHOICES, BackboneConfig, Forecaster, load_checkpoint
from .config import ConfigError
from .datasets import GENERATORS, DataError, write_csv
from .diagnostics import diagnose, write_correlation_csv
from .experiments import (
    ExperimentConfig,
    compare,
    format_table,
    grid_points,
    prepare,
    run_experiment,
    sweep,
    write_table_csv,
)
from .normlayers import NORM_KINDS, SIM_METRICS, SIM_SPACES, NormLayer
from .numerics import KernelError, NonPSDError, make_rng
from .training import NumericalAbort, evaluate, grad_check

DEFAULT_SEED = 7


def _err(msg):
    print(f"chanorm: {msg}", file=sys.stderr)


def _resolve_config(args) -> ExperimentConfig:
    text = ""
    if getattr(args, "config", None):
        with open(args.config) as fh:
            text = fh.read()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("seed", "epochs", "out_dir", "data", "backbone", "norm_kind"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = str(val)
    return ExperimentConfig.from_text(text, overrides)


def _write_resolved(cfg: ExperimentConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    if args.generator == "toy":
        series = GENERATORS["toy"](args.lookback, args.horizon, args.amplitude, args.periods, args.noise, seed)
    else:
        series = GENERATORS[args.generator](args.channels, args.length, seed)
    write_csv(series, args.out)
    print(f"seed={seed} wrote {series.length} x {series.channels} series to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    print(f"seed={cfg.seed}")
    res = run_experiment(cfg, cfg.out_dir, verbose=args.verbose)
    print(json.dumps({k: v for k, v in res.items() if k not in ("model", "log")}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    with open(args.config) as fh:
        cfg = ExperimentConfig.from_text(fh.read())
    if args.data:
        cfg = replace(cfg, data=args.data)
    model = load_checkpoint(args.checkpoint)
    splits = prepare(cfg)
    part = {"train": splits.train, "val": splits.val, "test": splits.test}[args.split]
    out = {"split": args.split, **evaluate(model, part)}
    if args.split == "test" and splits.test_aligned is not None:
        al = evaluate(model, splits.test_aligned)
        out.update(aligned_mse=al["mse"], aligned_mae=al["mae"])
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_cid_test(args) -> int:
    from .diagnostics import cid_test

    cfg = BackboneConfig(kind=args.backbone, norm_kind=args.norm, identifier_mode=args.identifier,
                         d_model=args.d_model, heads=2, depth=args.depth)
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    model = Forecaster(cfg, args.lookback, args.horizon, args.channels, seed)
    if args.perturb:
        for layer in model.norm_layers():
            bank = layer.named_params()
            key = "alpha" if layer.kind == "cn" else "alpha_g" if layer.kind == "acn" else None
            if key is None:
                raise ConfigError(f"--perturb needs per-channel rows; {args.norm} has none")
            bank[key][1] += args.perturb
        if not model.norm_layers():
            raise ConfigError("--perturb needs a normalization layer")
    v = cid_test(model, seed=seed)
    print(f"seed={seed}")
    print(v.verdict)
    print(f"max_gap={v.max_gap:.3e}")
    return 0


def cmd_entropy(args) -> int:
    with open(args.config) as fh:
        cfg = ExperimentConfig.from_text(fh.read())
    model = load_checkpoint(args.checkpoint)
    baseline = load_checkpoint(args.baseline) if args.baseline else None
    splits = prepare(cfg)
    report, corr = diagnose(model, splits.test.inputs, seed=cfg.seed, eps_ent=args.eps, baseline=baseline)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "diagnostics.json"), "w") as fh:
        fh.write(report.to_json())
    write_correlation_csv(corr, os.path.join(out_dir, "correlation.csv"),
                          os.path.join(out_dir, "correlation_hist.csv"))
    print(report.to_json())
    return 0


def cmd_grad_check(args) -> int:
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    rng = make_rng(seed, 70)
    b, c, d, length = 2, 3, 4, 5
    if args.layer == "model":
        cfg = BackboneConfig(kind=args.backbone, norm_kind=args.norm, d_model=8, heads=2,
                             sim_metric=args.metric, sim_space=args.space, k=3, proto_jitter=0.1)
        target = Forecaster(cfg, 8, 4, c, seed)
        probe = (rng.normal(size=(b, 8, c)), rng.normal(size=(b, 4, c)))
    else:
        target = NormLayer.build(args.layer, c, d, length, rng=rng, k=3,
                                 sim_metric=args.metric, sim_space=args.space)
        probe = (rng.normal(size=(b, c, d)), rng.normal(size=(b, length, c)))
    # move away from the identity initialization so no gradient is trivially zero
    for arr in target.named_params().values():
        arr += 0.1 * rng.normal(size=arr.shape)
    rep = grad_check(target, probe, h=args.h, tol=args.tol)
    print(f"seed={seed}")
    for name, err in rep.per_bank.items():
        print(f"  {name:<28s} {err:.3e}")
    print(f"max_rel_err={rep.max_rel_err:.3e} checked={rep.checked} tol={rep.tol:g} "
          f"{'PASS' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 3


def cmd_compare(args) -> int:
    cfg = _resolve_config(args)
    norms = [n.strip() for n in args.norms.split(",") if n.strip()]
    bad = [n for n in norms if n not in NORM_CHOICES]
    if bad:
        raise ConfigError(f"unknown norm kinds: {', '.join(bad)}")
    print(f"seed={cfg.seed}")
    _write_resolved(cfg, cfg.out_dir)
    rows = compare(cfg, norms, cfg.out_dir)
    print(format_table(rows))
    write_table_csv(rows, os.path.join(cfg.out_dir, "compare.csv"))
    return 0


def _parse_values(key, raw):
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if key == "tau":
        return [float(p) for p in parts]
    if key == "k":
        return [int(p) for p in parts]
    return parts


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    grid = {}
    for item in args.grid or []:
        if "=" not in item:
            raise ConfigError(f"--grid expects key=v1,v2,..., got {item!r}")
        k, v = item.split("=", 1)
        try:
            grid[k.strip()] = _parse_values(k.strip(), v)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if not grid:
        grid = {"tau": [0.05, 0.1, 0.2, 0.5, 1.0]}
    try:
        grid_points(grid)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"seed={cfg.seed}")
    _write_resolved(cfg, cfg.out_dir)
    rows = sweep(cfg, grid, cfg.out_dir, jobs=args.jobs)
    cols = tuple(grid) + ("test_mse", "test_mae", "aligned_mse", "epochs_run")
    print(format_table(rows, cols))
    write_table_csv(rows, os.path.join(cfg.out_dir, "sweep.csv"), cols)
    vals = np.array([r["test_mse"] for r in rows])
    print(f"test_mse spread/mean = {(vals.max() - vals.min()) / vals.mean():.3f}")
    return 0


# -------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _err(f"config error: {message}")
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chanorm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def experiment_args(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--out", dest="out_dir")
        sp.add_argument("--data", help="toy, sines, linear or a CSV path")
        sp.add_argument("--backbone", choices=BACKBONE_KINDS)

    sp = sub.add_parser("synth", help="write a synthetic series to CSV")
    sp.add_argument("--generator", choices=sorted(GENERATORS), default="toy")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--channels", type=int, default=8)
    sp.add_argument("--length", type=int, default=2000)
    sp.add_argument("--lookback", type=int, default=96)
    sp.add_argument("--horizon", type=int, default=24)
    sp.add_argument("--amplitude", type=float, default=1.0)
    sp.add_argument("--periods", type=int, default=40)
    sp.add_argument("--noise", type=float, default=0.01)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one model; writes config, checkpoint and JSONL log")
    experiment_args(sp)
    sp.add_argument("--norm", dest="norm_kind", choices=NORM_CHOICES)
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="MSE/MAE of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--config", required=True, help="resolved config written by train")
    sp.add_argument("--data")
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("cid-test", help="identical-input channel identifiability test")
    sp.add_argument("--backbone", choices=BACKBONE_KINDS, default="channel_attention")
    sp.add_argument("--norm", choices=NORM_CHOICES, default="ln")
    sp.add_argument("--identifier", choices=("none", "learnable", "fixed_constant"), default="none")
    sp.add_argument("--perturb", type=float, default=0.0, help="add to alpha row 1 of every norm layer")
    sp.add_argument("--channels", type=int, default=4)
    sp.add_argument("--lookback", type=int, default=16)
    sp.add_argument("--horizon", type=int, default=8)
    sp.add_argument("--d-model", type=int, default=16)
    sp.add_argument("--depth", type=int, default=2)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_cid_test)

    sp = sub.add_parser("entropy", help="entropy / correlation / head-diversity report for a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--baseline", help="second checkpoint to report alongside")
    sp.add_argument("--eps", type=float, default=1e-4)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_entropy)

    sp = sub.add_parser("grad-check", help="finite-difference check of analytic gradients")
    sp.add_argument("--layer", choices=NORM_KINDS + ("model",), default="ln")
    sp.add_argument("--backbone", choices=BACKBONE_KINDS, default="channel_attention")
    sp.add_argument("--norm", choices=NORM_CHOICES, default="cn")
    sp.add_argument("--metric", choices=SIM_METRICS, default="cosine")
    sp.add_argument("--space", choices=SIM_SPACES, default="latent_z")
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("compare", help="train one backbone under several norm kinds")
    experiment_args(sp)
    sp.add_argument("--norms", default="ln,cn,acn")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("sweep", help="grid over tau / k / sim_metric / sim_space")
    experiment_args(sp)
    sp.add_argument("--norm", dest="norm_kind", choices=NORM_CHOICES, default="acn")
    sp.add_argument("--grid", action="append", metavar="KEY=V1,V2")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)
    return p


def _thread_limit():
    raw = os.environ.get("CHANORM_THREADS")
    if not raw:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(raw))


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # usage errors exit 1, --help exits 0
        return int(exc.code or 0)
    limiter = _thread_limit()
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return 1
    except (NumericalAbort, NonPSDError) as exc:
        _err(f"numerical abort: {exc}")
        return 3
    except (DataError, KernelError, FileNotFoundError) as exc:
        _err(f"data error: {exc}")
        return 2
    except ValueError as exc:
        _err(f"config error: {exc}")
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
