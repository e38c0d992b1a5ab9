"""End-to-end runs: data -> windows -> model -> training -> metrics.

Shared by the CLI, the acceptance tests and the scripts in ``scripts/``.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .backbones import BackboneConfig, Forecaster, save_checkpoint
from .config import dump_kv, from_kv, parse_kv
from .datasets import (
    GENERATORS,
    RawSeries,
    SplitSpec,
    WindowSet,
    chronological_split,
    gen_cid_toy,
    load_csv,
    make_windows,
)
from .training import TrainConfig, evaluate, train_model


@dataclass
class ExperimentConfig:
    # data
    data: str = "toy"                 # toy | sines | linear | path to a CSV file
    has_timestamp_col: bool = False
    channels: int = 8
    length: int = 2000
    amplitude: float = 1.0
    periods: int = 40
    noise: float = 0.01
    split: tuple[float, ...] = (0.6, 0.2, 0.2)
    lookback: int = 96
    horizon: int = 24
    train_stride: int = 1
    eval_stride: int = 1
    # model
    backbone: str = "channel_attention"
    depth: int = 2
    d_model: int = 32
    heads: int = 2
    norm_kind: str = "ln"
    identifier_mode: str = "none"
    instance_norm_io: bool = False
    tau: float = 0.1
    k: int = 4
    sim_metric: str = "cosine"
    sim_space: str = "latent_z"
    proto_jitter: float = 0.0
    # training
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 7
    early_stop_patience: int = 10
    record_time: bool = False
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.split = tuple(float(r) for r in self.split)
        SplitSpec(self.split)
        self.backbone_config()
        self.train_config()

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(kind=self.backbone, depth=self.depth, d_model=self.d_model, heads=self.heads,
                              norm_kind=self.norm_kind, identifier_mode=self.identifier_mode,
                              instance_norm_io=self.instance_norm_io, tau=self.tau, k=self.k,
                              sim_metric=self.sim_metric, sim_space=self.sim_space,
                              proto_jitter=self.proto_jitter)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           seed=self.seed, early_stop_patience=self.early_stop_patience,
                           record_time=self.record_time)

    def to_text(self) -> str:
        return dump_kv(asdict(self))

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "ExperimentConfig":
        values = parse_kv(text)
        values.update(overrides or {})
        return from_kv(cls, values)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Splits:
    series: RawSeries
    train: WindowSet
    val: WindowSet
    test: WindowSet
    test_aligned: WindowSet | None = None   # toy data only: windows at period starts


def load_series(cfg: ExperimentConfig) -> RawSeries:
    if cfg.data == "toy":
        return gen_cid_toy(cfg.lookback, cfg.horizon, cfg.amplitude, cfg.periods, cfg.noise, cfg.seed)
    if cfg.data == "sines":
        return GENERATORS["sines"](cfg.channels, cfg.length, cfg.seed)
    if cfg.data == "linear":
        return GENERATORS["linear"](cfg.channels, cfg.length, cfg.seed)
    return load_csv(cfg.data, cfg.has_timestamp_col)


def prepare(cfg: ExperimentConfig) -> Splits:
    series = load_series(cfg)
    need = cfg.lookback + cfg.horizon
    train, val, test = chronological_split(series, SplitSpec(cfg.split), min_length=need)
    aligned = None
    if cfg.data == "toy":
        period = need
        test_start = train.length + val.length
        aligned = make_windows(test, cfg.lookback, cfg.horizon, stride=period, offset=(-test_start) % period)
    return Splits(series,
                  make_windows(train, cfg.lookback, cfg.horizon, cfg.train_stride),
                  make_windows(val, cfg.lookback, cfg.horizon, cfg.eval_stride),
                  make_windows(test, cfg.lookback, cfg.horizon, cfg.eval_stride),
                  aligned)


def build_model(cfg: ExperimentConfig, channels: int) -> Forecaster:
    return Forecaster(cfg.backbone_config(), cfg.lookback, cfg.horizon, channels, cfg.seed)


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None, splits: Splits | None = None,
                   verbose: bool = False) -> dict:
    """Train one model; with ``out_dir`` write config.txt, metrics.jsonl,
    model.ckpt and results.json there."""
    splits = splits or prepare(cfg)
    model = build_model(cfg, splits.series.channels)
    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w") as fh:
            fh.write(cfg.to_text())
        log_path = os.path.join(out_dir, "metrics.jsonl")
    model, log = train_model(model, splits.train, cfg.train_config(), splits.val, log_path, verbose)
    result = {"norm_kind": cfg.norm_kind, "backbone": cfg.backbone, "seed": cfg.seed,
              "epochs_run": log[-1]["epoch"], "init_train_mse": log[0]["train_mse"],
              "init_val_mse": log[0]["val_mse"]}
    test = evaluate(model, splits.test)
    result.update(test_mse=test["mse"], test_mae=test["mae"])
    if splits.test_aligned is not None:
        al = evaluate(model, splits.test_aligned)
        result.update(aligned_mse=al["mse"], aligned_mae=al["mae"])
    if out_dir is not None:
        save_checkpoint(model, os.path.join(out_dir, "model.ckpt"))
        with open(os.path.join(out_dir, "results.json"), "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
    result["model"] = model
    result["log"] = log
    return result


RESULT_COLUMNS = ("norm_kind", "init_val_mse", "test_mse", "test_mae", "aligned_mse", "epochs_run")


def format_table(rows: list[dict], columns=RESULT_COLUMNS) -> str:
    cols = [c for c in columns if any(c in r for r in rows)]

    def cell(v):
        if isinstance(v, float):
            return f"{v:.5f}"
        return "-" if v is None else str(v)

    body = [[cell(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def write_table_csv(rows: list[dict], path, columns=RESULT_COLUMNS) -> None:
    import csv

    cols = [c for c in columns if any(c in r for r in rows)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r.get(c, "") for c in cols])


def compare(cfg: ExperimentConfig, norms: list[str], out_dir: str | None = None) -> list[dict]:
    """Same backbone, data and seed; only the normalization layer changes."""
    splits = prepare(cfg)
    rows = []
    for norm in norms:
        sub = replace(cfg, norm_kind=norm)
        run_dir = os.path.join(out_dir, norm) if out_dir else None
        res = run_experiment(sub, run_dir, splits)
        rows.append({k: v for k, v in res.items() if k not in ("model", "log")})
    return rows


SWEEP_KEYS = ("tau", "k", "sim_metric", "sim_space")


def grid_points(grid: dict[str, list]) -> list[dict]:
    points = [{}]
    for key, values in grid.items():
        if key not in SWEEP_KEYS:
            raise ValueError(f"cannot sweep {key!r}; choose from {', '.join(SWEEP_KEYS)}")
        points = [{**p, key: v} for p in points for v in values]
    return points


def _sweep_point(args):
    cfg, point, out_dir = args
    sub = replace(cfg, **point)
    tag = "_".join(f"{k}={v}" for k, v in point.items())
    run_dir = os.path.join(out_dir, tag) if out_dir else None
    res = run_experiment(sub, run_dir)
    row = {k: v for k, v in res.items() if k not in ("model", "log")}
    row.update(point)
    return row


def sweep(cfg: ExperimentConfig, grid: dict[str, list], out_dir: str | None = None, jobs: int = 1) -> list[dict]:
    """Grid over the similarity knobs; ``jobs > 1`` runs points in processes."""
    tasks = [(cfg, p, out_dir) for p in grid_points(grid)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_point, tasks))
    return [_sweep_point(t) for t in tasks]


def tau_spread(rows: list[dict], key: str = "test_mse") -> float:
    vals = np.array([r[key] for r in rows])
    return float((vals.max() - vals.min()) / vals.mean())
