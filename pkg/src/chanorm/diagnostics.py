"""Identifiability test, Gaussian entropies, correlation and head diversity."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbones import AttentionTrace, Forecaster, forward_forecast
from .numerics import as_tensor, logdet_psd, make_rng

EPS_ENT = 1e-4
KL_FLOOR = 1e-12
HIST_BINS = 40

NON_CID, CID, INDETERMINATE = "NON_CID", "CID", "INDETERMINATE"


@dataclass
class CidVerdict:
    verdict: str
    max_gap: float
    seed: int


def cid_test(model: Forecaster, seed: int = 7, tol_eq: float = 1e-9, tol_neq: float = 1e-6,
             batch: int = 4, src: int = 0, dst: int = 1) -> CidVerdict:
    """Copy channel ``src`` onto ``dst`` in a random input and compare forecasts."""
    if model.channels < 2:
        raise ValueError("the identifiability test needs at least two channels")
    x = make_rng(seed, 60).normal(size=(batch, model.lookback, model.channels))
    x[:, :, dst] = x[:, :, src]
    y, _ = forward_forecast(x, model)
    gap = float(np.max(np.abs(y[:, :, src] - y[:, :, dst])))
    if gap <= tol_eq:
        verdict = NON_CID
    elif gap > tol_neq:
        verdict = CID
    else:
        verdict = INDETERMINATE
    return CidVerdict(verdict, gap, seed)


def gaussian_entropy(samples, eps_ent: float = EPS_ENT) -> float:
    """Per-dimension Gaussian entropy (nats) from the uncentered second moment.

    ``0.5 * log((2 pi e)^D det(z^T z / N + eps I)) / D``.
    """
    z = as_tensor(samples)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError(f"need an N x D sample matrix with N >= 1, got {z.shape}")
    if not eps_ent > 0:
        raise ValueError("eps_ent must be positive")
    n, d = z.shape
    moment = z.T @ z / n + eps_ent * np.eye(d)
    return 0.5 * (d * math.log(2 * math.pi * math.e) + logdet_psd(moment)) / d


@dataclass
class EntropyReport:
    feature_entropy: float
    channel_entropy: float
    eps_ent: float
    feature_logdet: float
    channel_logdet: float


def channel_feature_entropy(z_bar, eps_ent: float = EPS_ENT) -> EntropyReport:
    """Feature entropy of ``z_bar[C, D]`` and channel entropy of its transpose."""
    z = as_tensor(z_bar)
    c, d = z.shape
    return EntropyReport(
        feature_entropy=gaussian_entropy(z, eps_ent),
        channel_entropy=gaussian_entropy(z.T, eps_ent),
        eps_ent=eps_ent,
        feature_logdet=logdet_psd(z.T @ z / c + eps_ent * np.eye(d)),
        channel_logdet=logdet_psd(z @ z.T / d + eps_ent * np.eye(c)),
    )


def mean_representation(model: Forecaster, inputs, batch_size: int = 256) -> np.ndarray:
    """Post-encoder tokens averaged over every window: ``[C, D]``."""
    total = None
    for i in range(0, len(inputs), batch_size):
        _, state = forward_forecast(inputs[i:i + batch_size], model)
        part = state.tokens.sum(axis=0)
        total = part if total is None else total + part
    return total / len(inputs)


@dataclass
class CorrelationSummary:
    corr: np.ndarray
    hist: np.ndarray
    bin_edges: np.ndarray
    offdiag_std: float


def channel_correlation(z_bar, bins: int = HIST_BINS) -> CorrelationSummary:
    """Pearson correlation between channel rows; constant rows correlate 0."""
    z = as_tensor(z_bar)
    centered = z - z.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = centered / safe[:, None]
    corr = np.clip(unit @ unit.T, -1.0, 1.0)
    corr[norms == 0, :] = 0.0
    corr[:, norms == 0] = 0.0
    np.fill_diagonal(corr, 1.0)
    off = corr[~np.eye(len(corr), dtype=bool)]
    hist, edges = np.histogram(off, bins=bins, range=(-1.0, 1.0))
    return CorrelationSummary(corr, hist, edges, float(off.std()) if off.size else 0.0)


def kl_rows(p, q, floor: float = KL_FLOOR) -> np.ndarray:
    """KL(p || q) along the last axis, logs floored at ``floor``."""
    p, q = as_tensor(p), as_tensor(q)
    return (p * (np.log(np.maximum(p, floor)) - np.log(np.maximum(q, floor)))).sum(axis=-1)


def head_kld(trace: AttentionTrace | list) -> list[float]:
    """Per layer: symmetrized KL averaged over rows, batch and unordered head pairs."""
    layers = trace.weights if isinstance(trace, AttentionTrace) else trace
    out = []
    for w in layers:
        w = as_tensor(w)
        if w.ndim != 4:
            raise ValueError(f"attention weights must be B x heads x C x C, got {w.shape}")
        if not np.allclose(w.sum(axis=-1), 1.0, atol=1e-9):
            raise ValueError("attention rows are not row-stochastic")
        h = w.shape[1]
        vals = [0.5 * (kl_rows(w[:, i], w[:, j]).mean() + kl_rows(w[:, j], w[:, i]).mean())
                for i in range(h) for j in range(i + 1, h)]
        out.append(float(np.mean(vals)) if vals else 0.0)
    return out


@dataclass
class DiagnosticsReport:
    cid: dict
    entropy: dict
    corr_offdiag_hist: list
    corr_offdiag_std: float
    head_kld: list
    baseline_entropy: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def diagnose(model: Forecaster, test_inputs, seed: int = 7, eps_ent: float = EPS_ENT,
             baseline: Forecaster | None = None) -> tuple[DiagnosticsReport, CorrelationSummary]:
    verdict = cid_test(model, seed=seed)
    z_bar = mean_representation(model, test_inputs)
    ent = channel_feature_entropy(z_bar, eps_ent)
    corr = channel_correlation(z_bar)
    _, state = forward_forecast(test_inputs[:64], model)
    base = None
    if baseline is not None:
        base = asdict(channel_feature_entropy(mean_representation(baseline, test_inputs), eps_ent))
    report = DiagnosticsReport(
        cid=asdict(verdict), entropy=asdict(ent), corr_offdiag_hist=corr.hist.tolist(),
        corr_offdiag_std=corr.offdiag_std, head_kld=head_kld(state.trace), baseline_entropy=base)
    return report, corr


def write_correlation_csv(summary: CorrelationSummary, corr_path, hist_path) -> None:
    with open(corr_path, "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in summary.corr])
    with open(hist_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, n in zip(summary.bin_edges[:-1], summary.bin_edges[1:], summary.hist):
            w.writerow([repr(float(lo)), repr(float(hi)), int(n)])
