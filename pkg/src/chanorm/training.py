"""Losses, Adam, the training loop and the finite-difference gradient check."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .backbones import Forecaster
from .datasets import WindowSet
from .normlayers import NormLayer
from .numerics import as_tensor, make_rng


class NumericalAbort(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at optimizer step {step}")
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 7
    loss: str = "mse"
    early_stop_patience: int = 10
    record_time: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and patience >= 1 are required")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")


def _same_shape(pred, target):
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    return pred, target


def mse(pred, target) -> float:
    pred, target = _same_shape(pred, target)
    return float(np.mean((pred - target) ** 2))


def mae(pred, target) -> float:
    pred, target = _same_shape(pred, target)
    return float(np.mean(np.abs(pred - target)))


# --------------------------------------------------------------------- Adam


@dataclass
class OptimizerState:
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimizerState):
    """Bias-corrected Adam update, applied in place to ``params``."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.b1
        m += (1 - state.b1) * g
        v *= state.b2
        v += (1 - state.b2) * g * g
        m_hat = m / (1 - state.b1**t)
        v_hat = v / (1 - state.b2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# --------------------------------------------------------------------- loop


def predict(model: Forecaster, inputs, batch_size: int = 256) -> np.ndarray:
    outs = [model.forward(inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)]
    return np.concatenate(outs, axis=0)


def evaluate(model: Forecaster, windows: WindowSet, batch_size: int = 256) -> dict:
    pred = predict(model, windows.inputs, batch_size)
    return {"mse": mse(pred, windows.targets), "mae": mae(pred, windows.targets)}


def train_step(model: Forecaster, x, y, state: OptimizerState) -> tuple[float, float]:
    pred = model.forward(x)
    diff = pred - y
    loss = float(np.mean(diff**2))
    if not np.isfinite(loss):
        raise NumericalAbort(state.step + 1, loss)
    model.backward(2.0 * diff / diff.size)
    adam_step(model.named_params(), model.grads, state)
    return loss, float(np.mean(np.abs(diff)))


def train_model(model: Forecaster, train: WindowSet, cfg: TrainConfig, val: WindowSet | None = None,
                log_path=None, verbose: bool = False):
    """Minibatch Adam on MSE; keeps the parameters with the best validation MSE.

    Returns ``(model, log)`` where ``log`` holds one dict per epoch; epoch 0
    is the evaluation at initialization.  With ``log_path`` the same records
    are written as JSON lines.
    """
    if len(train) == 0:
        raise ValueError("no training windows")
    rng = make_rng(cfg.seed, 40)
    state = OptimizerState(lr=cfg.learning_rate)
    log = []
    fh = open(log_path, "w") if log_path is not None else None

    def record(epoch, tr_mse, tr_mae, t0):
        ev = evaluate(model, val) if val is not None and len(val) else {"mse": None, "mae": None}
        rec = {"epoch": epoch, "train_mse": tr_mse, "train_mae": tr_mae,
               "val_mse": ev["mse"], "val_mae": ev["mae"],
               "wall_ms": round((time.perf_counter() - t0) * 1000, 3) if cfg.record_time else None}
        log.append(rec)
        if fh is not None:
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
        if verbose:
            print(json.dumps(rec))
        return rec

    try:
        t0 = time.perf_counter()
        init = evaluate(model, train)
        rec = record(0, init["mse"], init["mae"], t0)
        score = rec["val_mse"] if rec["val_mse"] is not None else rec["train_mse"]
        best = (score, {k: v.copy() for k, v in model.named_params().items()})
        stale = 0
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train))
            tot_mse = tot_mae = 0.0
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                l2, l1 = train_step(model, train.inputs[idx], train.targets[idx], state)
                tot_mse += l2 * len(idx)
                tot_mae += l1 * len(idx)
            rec = record(epoch, tot_mse / len(order), tot_mae / len(order), t0)
            score = rec["val_mse"] if rec["val_mse"] is not None else rec["train_mse"]
            if score < best[0]:
                best = (score, {k: v.copy() for k, v in model.named_params().items()})
                stale = 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    finally:
        if fh is not None:
            fh.close()
    for name, arr in model.named_params().items():
        arr[...] = best[1][name]
    return model, log


# --------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_err: float
    checked: int
    tol: float
    failures: list = field(default_factory=list)   # (bank, index, analytic, numeric, rel)
    per_bank: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _coords(shape, limit, rng):
    size = int(np.prod(shape))
    flat = np.arange(size) if size <= limit else np.sort(rng.choice(size, limit, replace=False))
    return [np.unravel_index(i, shape) for i in flat]


def grad_check(target, probe, h: float = 1e-5, tol: float = 1e-4, max_per_bank: int = 200,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``target`` is a :class:`NormLayer` (probe ``(z, x)``, loss
    ``sum(out * G)`` with a seeded ``G``) or a :class:`Forecaster` (probe
    ``(x, y)``, MSE loss).  Banks larger than ``max_per_bank`` are checked on
    a seeded sample of that many coordinates.
    """
    rng = make_rng(seed, 50)
    if isinstance(target, NormLayer):
        z, x = probe
        weight = rng.normal(size=np.shape(z))

        def loss():
            return float(np.sum(target.forward(z, x, keep_cache=False) * weight))

        target.forward(z, x)
        target.backward(weight)
        analytic = dict(target.grads)
        params = target.named_params()
    else:
        x, y = probe

        def loss():
            return mse(target.forward(x), y)

        pred = target.forward(x)
        analytic = dict(target.backward(2.0 * (pred - y) / pred.size))
        params = target.named_params()

    report = GradCheckReport(0.0, 0, tol)
    for name, arr in params.items():
        worst = 0.0
        for idx in _coords(arr.shape, max_per_bank, rng):
            old = arr[idx]
            step = h * max(1.0, abs(old))
            arr[idx] = old + step
            fp = loss()
            arr[idx] = old - step
            fm = loss()
            arr[idx] = old
            num = (fp - fm) / (2 * step)
            ana = float(analytic[name][idx])
            rel = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, rel)
            report.checked += 1
            if rel > tol:
                report.failures.append((name, tuple(int(i) for i in idx), ana, num, rel))
        report.per_bank[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
