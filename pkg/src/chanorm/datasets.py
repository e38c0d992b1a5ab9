"""Synthetic generators, CSV I/O, chronological splits and window extraction."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import make_rng


class DataError(ValueError):
    pass


@dataclass
class RawSeries:
    matrix: np.ndarray                 # [T, C]
    channel_names: list[str] = field(default_factory=list)
    timestamps: list[str] | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise DataError(f"series matrix must be T x C, got {self.matrix.shape}")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.matrix.shape[1])]

    @property
    def length(self) -> int:
        return self.matrix.shape[0]

    @property
    def channels(self) -> int:
        return self.matrix.shape[1]


@dataclass
class SplitSpec:
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    mode: str = "chronological"

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise DataError(f"need three non-negative ratios, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DataError(f"split ratios must sum to 1, got {sum(self.ratios)}")
        if self.mode != "chronological":
            raise DataError("only chronological splits are supported")


@dataclass
class WindowSet:
    inputs: np.ndarray    # [N, L, C]
    targets: np.ndarray   # [N, H, C]
    stride: int
    starts: np.ndarray    # start index of each input window in the source series

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.inputs[idx], self.targets[idx], self.stride, self.starts[idx])


# --------------------------------------------------------------- generators


def cid_toy_bound(amplitude: float, horizon: int) -> float:
    """Smallest per-element MSE a channel-blind model can reach on aligned windows.

    Both channels see the same input; the targets differ by ``+-A t / H``,
    so the best shared guess is their midpoint.
    """
    h = horizon
    return amplitude**2 * (h + 1) * (2 * h + 1) / (6 * h * h)


def gen_cid_toy(lookback: int = 96, horizon: int = 24, amplitude: float = 1.0, periods: int = 40,
                noise: float = 0.0, seed: int = 7) -> RawSeries:
    """Two channels that look identical over every lookback and then diverge.

    Each period of length L+H is a smooth shared segment (three sinusoids
    with seeded frequencies and phases, peak |A|/2) followed by a ramp that
    continues from the segment's last value: upward for channel 0,
    downward for channel 1, reaching +-A after H steps.
    """
    if not amplitude > 0:
        raise DataError("amplitude must be positive")
    if periods < 4 or lookback < 2 or horizon < 1:
        raise DataError("need periods >= 4, lookback >= 2 and horizon >= 1")
    rng = make_rng(seed, 10)
    t = np.arange(lookback) / lookback
    ramp = amplitude * np.arange(1, horizon + 1) / horizon
    chunks = []
    for _ in range(periods):
        freqs = rng.uniform(0.5, 2.0, size=3)
        phases = rng.uniform(0, 2 * np.pi, size=3)
        w = np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None]).sum(axis=0)
        w *= (amplitude / 2) / np.abs(w).max()
        up = np.concatenate([w, w[-1] + ramp])
        down = np.concatenate([w, w[-1] - ramp])
        chunks.append(np.stack([up, down], axis=1))
    matrix = np.concatenate(chunks, axis=0)
    if noise > 0:
        matrix = matrix + noise * make_rng(seed, 11).normal(size=matrix.shape)
    return RawSeries(matrix, ["up", "down"])


def gen_sine_mixture(channels: int = 8, length: int = 2000, seed: int = 7, amplitude: float = 1.0,
                     noise: float = 0.1, clusters: int = 2) -> RawSeries:
    """Channels built from cluster-specific sinusoid sets plus Gaussian noise.

    Channel ``c`` belongs to cluster ``c % clusters``; channels of one
    cluster share frequencies but have their own amplitudes and phases.
    """
    if channels < 2:
        raise DataError("need at least two channels")
    rng = make_rng(seed, 20)
    t = np.arange(length)
    freqs = rng.uniform(1 / 200, 1 / 12, size=(clusters, 3))
    out = np.empty((length, channels))
    for c in range(channels):
        f = freqs[c % clusters]
        amp = amplitude * rng.uniform(0.5, 1.5, size=3)
        ph = rng.uniform(-0.4, 0.4, size=3) + 2 * np.pi * (c % clusters) / clusters
        out[:, c] = (amp[:, None] * np.sin(2 * np.pi * f[:, None] * t[None, :] + ph[:, None])).sum(axis=0)
    out += noise * rng.normal(size=out.shape)
    return RawSeries(out, [f"s{c}" for c in range(channels)])


def gen_linear_series(channels: int = 3, length: int = 400, seed: int = 7) -> RawSeries:
    """Noise-free single sinusoids, so each future value is linear in the past."""
    rng = make_rng(seed, 30)
    t = np.arange(length)
    f = rng.uniform(1 / 40, 1 / 10, size=channels)
    ph = rng.uniform(0, 2 * np.pi, size=channels)
    return RawSeries(np.sin(2 * np.pi * f[None, :] * t[:, None] + ph[None, :]))


GENERATORS = {"toy": gen_cid_toy, "sines": gen_sine_mixture, "linear": gen_linear_series}


# ---------------------------------------------------------------------- CSV


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, has_timestamp_col: bool = False) -> RawSeries:
    """Read a rectangular numeric CSV; a non-numeric first row is a header."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    first = 1 if has_timestamp_col else 0
    header = None
    if not all(_is_number(c) for c in rows[0][first:]):
        header, rows = rows[0], rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(rows[0])
    values, stamps = [], []
    for i, row in enumerate(rows):
        line = i + (2 if header else 1)
        if len(row) != width:
            raise DataError(f"{path}: row {line} has {len(row)} cells, expected {width}")
        if has_timestamp_col:
            stamps.append(row[0])
        vals = []
        for j, cell in enumerate(row[first:], start=first):
            try:
                vals.append(float(cell))
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {line}, column {j + 1}") from None
        values.append(vals)
    matrix = np.array(values, dtype=np.float64)
    names = header[first:] if header else []
    return RawSeries(matrix, list(names), stamps if has_timestamp_col else None)


def write_csv(series: RawSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        lead = ["date"] if series.timestamps is not None else []
        w.writerow(lead + list(series.channel_names))
        for i, row in enumerate(series.matrix):
            stamp = [series.timestamps[i]] if series.timestamps is not None else []
            w.writerow(stamp + [repr(float(v)) for v in row])


# ------------------------------------------------------------ split/windows


def chronological_split(series: RawSeries, spec: SplitSpec, min_length: int = 1):
    """Contiguous train / validation / test segments in time order."""
    t = series.length
    n_train = int(math.floor(t * spec.ratios[0] + 1e-9))
    n_val = int(math.floor(t * spec.ratios[1] + 1e-9))
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, t)]
    parts = []
    for name, (a, b) in zip(("train", "val", "test"), bounds):
        if b - a < min_length:
            raise DataError(f"{name} segment has {b - a} steps, need at least {min_length}")
        stamps = series.timestamps[a:b] if series.timestamps is not None else None
        parts.append(RawSeries(series.matrix[a:b], list(series.channel_names), stamps))
    return tuple(parts)


def make_windows(series: RawSeries, lookback: int, horizon: int, stride: int = 1,
                 offset: int = 0) -> WindowSet:
    """All (input, target) pairs with starts ``offset, offset + stride, ...``."""
    m = series.matrix if isinstance(series, RawSeries) else np.asarray(series, dtype=np.float64)
    t = m.shape[0] - offset
    if stride < 1:
        raise DataError("stride must be >= 1")
    if t < lookback + horizon:
        raise DataError(f"series of length {t} is shorter than lookback + horizon = {lookback + horizon}")
    starts = offset + np.arange((t - lookback - horizon) // stride + 1) * stride
    idx_in = starts[:, None] + np.arange(lookback)[None, :]
    idx_out = starts[:, None] + lookback + np.arange(horizon)[None, :]
    return WindowSet(m[idx_in], m[idx_out], stride, starts)
