"""LN / IN / CN / ACN / PCN with hand-derived backward passes.

Token batches are ``z[B, C, D]`` (one token per channel).  Windows are passed
as series batches ``x[B, L, C]`` and transposed to ``[B, C, L]`` internally
wherever a per-channel view is needed.

Every ``*_forward`` accepts an optional ``cache`` dict; when given, it is
filled with what :func:`norm_backward` needs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import (
    COSINE_EPS,
    KernelError,
    as_tensor,
    cosine_rows,
    cosine_rows_backward,
    pairwise_similarity,
    pairwise_similarity_backward,
    rowwise_softmax,
    softmax_backward,
)

EPS_NORM = 1e-5
DEFAULT_TAU = 0.1
NORM_KINDS = ("ln", "in", "cn", "acn", "pcn")
SIM_METRICS = ("cosine", "neg_l1", "neg_l2")
SIM_SPACES = ("data_x", "latent_z")
KIND_CODES = {"ln": 1, "in": 2, "cn": 3, "acn": 4, "pcn": 5}


class MissingCacheError(RuntimeError):
    pass


# ---------------------------------------------------------------- containers


@dataclass
class NormStats:
    mu: np.ndarray
    sigma: np.ndarray
    eps_norm: float


@dataclass
class SimilarityMatrix:
    weights: np.ndarray
    raw: np.ndarray


@dataclass
class DynamicAffine:
    alpha_hat: np.ndarray
    beta_hat: np.ndarray


@dataclass
class LnParams:
    """Affine parameters shared by every channel (also used by IN)."""

    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "LnParams":
        return cls(np.ones(d), np.zeros(d))

    def banks(self) -> dict[str, np.ndarray]:
        return {"alpha": self.alpha, "beta": self.beta}


@dataclass
class CnParams:
    """One affine row per channel."""

    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def identity(cls, c: int, d: int) -> "CnParams":
        return cls(np.ones((c, d)), np.zeros((c, d)))

    @property
    def channels(self) -> int:
        return self.alpha.shape[0]

    def banks(self) -> dict[str, np.ndarray]:
        return {"alpha": self.alpha, "beta": self.beta}


@dataclass
class AcnParams:
    alpha_g: np.ndarray
    alpha_l: np.ndarray
    beta_g: np.ndarray
    beta_l: np.ndarray
    tau: float = DEFAULT_TAU
    sim_metric: str = "cosine"
    sim_space: str = "latent_z"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.sim_metric not in SIM_METRICS:
            raise ValueError(f"unknown sim_metric {self.sim_metric!r}")
        if self.sim_space not in SIM_SPACES:
            raise ValueError(f"unknown sim_space {self.sim_space!r}")
        shapes = {b.shape for b in (self.alpha_g, self.alpha_l, self.beta_g, self.beta_l)}
        if len(shapes) != 1:
            raise ValueError(f"ACN banks must share one C x D shape, got {shapes}")

    @classmethod
    def identity(cls, c: int, d: int, **kw) -> "AcnParams":
        # local scale starts at 1 (not 0) so that the layer is the identity
        # on Norm(z) before training; beta_g * beta_hat_l = 1 * 0 = 0
        return cls(np.ones((c, d)), np.ones((c, d)), np.ones((c, d)), np.zeros((c, d)), **kw)

    @property
    def channels(self) -> int:
        return self.alpha_g.shape[0]

    def banks(self) -> dict[str, np.ndarray]:
        return {"alpha_g": self.alpha_g, "alpha_l": self.alpha_l,
                "beta_g": self.beta_g, "beta_l": self.beta_l}


@dataclass
class PcnParams:
    alpha_p: np.ndarray
    beta_p: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.alpha_p.shape != self.beta_p.shape or self.alpha_p.shape[0] < 1:
            raise ValueError("prototype banks must share a K x D shape with K >= 1")
        if self.proj_w.shape[1] != self.alpha_p.shape[1] or self.proj_b.shape != (self.alpha_p.shape[1],):
            raise ValueError("projection must map into the prototype space")

    @classmethod
    def init(cls, k: int, d: int, l_in: int, rng: np.random.Generator,
             tau: float = DEFAULT_TAU, jitter: float = 0.0) -> "PcnParams":
        """Identity-at-init prototypes and a random projection.

        With ``jitter == 0`` all prototypes are equal, which keeps the layer
        exactly the identity on Norm(z) but also makes every prototype receive
        the same gradient.  A small positive ``jitter`` breaks that symmetry.
        """
        proj_w = rng.normal(0.0, 1.0 / np.sqrt(l_in), size=(l_in, d))
        alpha_p = np.ones((k, d))
        beta_p = np.zeros((k, d))
        if jitter > 0:
            alpha_p = alpha_p + jitter * rng.normal(size=(k, d))
            beta_p = beta_p + jitter * rng.normal(size=(k, d))
        return cls(alpha_p, beta_p, proj_w, np.zeros(d), tau=tau)

    @property
    def k(self) -> int:
        return self.alpha_p.shape[0]

    def banks(self) -> dict[str, np.ndarray]:
        return {"alpha_p": self.alpha_p, "beta_p": self.beta_p,
                "proj_w": self.proj_w, "proj_b": self.proj_b}


# ----------------------------------------------------------------- forwards


def normalize_core(z, eps_norm: float = EPS_NORM):
    """Standardize each (b, c) token over its D features (population variance)."""
    z = as_tensor(z)
    mu = z.mean(axis=-1)
    sigma = np.sqrt(z.var(axis=-1) + eps_norm)
    n = (z - mu[..., None]) / sigma[..., None]
    return n, NormStats(mu, sigma, eps_norm)


def _normalize_backward(n, sigma, grad_n):
    return (grad_n - grad_n.mean(axis=-1, keepdims=True)
            - n * (grad_n * n).mean(axis=-1, keepdims=True)) / sigma[..., None]


def _check_tokens(z):
    z = as_tensor(z)
    if z.ndim != 3:
        raise KernelError(f"token batch must be B x C x D, got shape {z.shape}")
    return z


def ln_forward(z, p: LnParams, eps_norm: float = EPS_NORM, cache: dict | None = None):
    z = _check_tokens(z)
    if p.alpha.shape != (z.shape[2],):
        raise KernelError(f"LN parameters have length {p.alpha.shape}, tokens have D={z.shape[2]}")
    n, stats = normalize_core(z, eps_norm)
    if cache is not None:
        cache.update(kind="ln", params=p, n=n, stats=stats)
    return p.alpha * n + p.beta


def in_forward(z, p: LnParams, eps_norm: float = EPS_NORM, cache: dict | None = None):
    """Normalize every (b, d) slice across channels, then a per-d affine."""
    z = _check_tokens(z)
    if z.shape[1] < 2:
        raise KernelError("instance normalization across channels needs C >= 2")
    if p.alpha.shape != (z.shape[2],):
        raise KernelError(f"IN parameters have length {p.alpha.shape}, tokens have D={z.shape[2]}")
    nt, stats = normalize_core(np.swapaxes(z, 1, 2), eps_norm)
    n = np.swapaxes(nt, 1, 2)
    if cache is not None:
        cache.update(kind="in", params=p, n=n, nt=nt, stats=stats)
    return p.alpha * n + p.beta


def cn_forward(z, p: CnParams, eps_norm: float = EPS_NORM, cache: dict | None = None):
    z = _check_tokens(z)
    if p.alpha.shape != z.shape[1:]:
        raise KernelError(
            f"CN was built for {p.alpha.shape[0]} channels x D={p.alpha.shape[1]}, "
            f"got tokens with C={z.shape[1]}, D={z.shape[2]}; CN needs a fixed channel count")
    n, stats = normalize_core(z, eps_norm)
    if cache is not None:
        cache.update(kind="cn", params=p, n=n, stats=stats)
    return p.alpha * n + p.beta


def channel_similarity(basis, tau: float = DEFAULT_TAU, metric: str = "cosine") -> SimilarityMatrix:
    """Softmaxed channel-by-channel similarity of ``basis[B, C, *]``."""
    if not tau > 0:
        raise KernelError(f"temperature must be positive, got {tau}")
    basis = as_tensor(basis)
    raw = pairwise_similarity(basis, basis, metric)
    return SimilarityMatrix(rowwise_softmax(raw, tau), raw)


def acn_forward(z, p: AcnParams, sim_basis=None, eps_norm: float = EPS_NORM,
                cache: dict | None = None):
    """Adaptive CN.  ``sim_basis`` is ``[B, C, *]``; defaults to ``z`` itself."""
    z = _check_tokens(z)
    if p.alpha_g.shape != z.shape[1:]:
        raise KernelError(f"ACN was built for C x D = {p.alpha_g.shape}, got tokens {z.shape}")
    latent = sim_basis is None
    basis = z if latent else as_tensor(sim_basis)
    if basis.shape[:2] != z.shape[:2]:
        raise KernelError(f"similarity basis {basis.shape} does not match tokens {z.shape}")
    sim = channel_similarity(basis, p.tau, p.sim_metric)
    a_hat = sim.weights @ p.alpha_l
    b_hat = sim.weights @ p.beta_l
    alpha = p.alpha_g * a_hat
    beta = p.beta_g * b_hat
    n, stats = normalize_core(z, eps_norm)
    if cache is not None:
        cache.update(kind="acn", params=p, n=n, stats=stats, sim=sim, basis=basis,
                     latent=latent, a_hat=a_hat, b_hat=b_hat, alpha=alpha)
    return alpha * n + beta, sim, DynamicAffine(a_hat, b_hat)


def _windows(x):
    x = as_tensor(x)
    if x.ndim != 3:
        raise KernelError(f"series batch must be B x L x C, got shape {x.shape}")
    return np.swapaxes(x, 1, 2)


def prototype_similarity(x, p: PcnParams, bank: str = "alpha", _h=None) -> SimilarityMatrix:
    """Cosine similarity of the projected windows h(x[b, :, c]) to a prototype bank."""
    if _h is None:
        xw = _windows(x)
        if xw.shape[2] != p.proj_w.shape[0]:
            raise KernelError(f"window length {xw.shape[2]} != projection input {p.proj_w.shape[0]}")
        _h = xw @ p.proj_w + p.proj_b
    protos = {"alpha": p.alpha_p, "beta": p.beta_p}[bank]
    raw = cosine_rows(_h, protos, COSINE_EPS)
    return SimilarityMatrix(rowwise_softmax(raw, p.tau), raw)


def pcn_forward(z, x, p: PcnParams, eps_norm: float = EPS_NORM, cache: dict | None = None):
    z = _check_tokens(z)
    xw = _windows(x)
    if xw.shape[:2] != z.shape[:2]:
        raise KernelError(f"tokens {z.shape} and series {as_tensor(x).shape} disagree on B or C")
    if xw.shape[2] != p.proj_w.shape[0]:
        raise KernelError(f"window length {xw.shape[2]} != projection input {p.proj_w.shape[0]}")
    if p.alpha_p.shape[1] != z.shape[2]:
        raise KernelError(f"prototype dimension {p.alpha_p.shape[1]} != D={z.shape[2]}")
    h = xw @ p.proj_w + p.proj_b
    sim_a = prototype_similarity(None, p, "alpha", _h=h)
    sim_b = prototype_similarity(None, p, "beta", _h=h)
    alpha = sim_a.weights @ p.alpha_p
    beta = sim_b.weights @ p.beta_p
    n, stats = normalize_core(z, eps_norm)
    if cache is not None:
        cache.update(kind="pcn", params=p, n=n, stats=stats, xw=xw, h=h,
                     sim_a=sim_a, sim_b=sim_b, alpha=alpha)
    return alpha * n + beta, sim_a, sim_b, DynamicAffine(alpha, beta)


# ---------------------------------------------------------------- backwards


def norm_backward(layer_kind: str, cache: dict | None, grad_out):
    """Return ``(grad_z, {bank_name: grad})`` for a cached forward."""
    if not cache:
        raise MissingCacheError(f"{layer_kind} backward called without a cached forward")
    if cache["kind"] != layer_kind:
        raise MissingCacheError(f"cache holds a {cache['kind']} forward, not {layer_kind}")
    g = as_tensor(grad_out)
    n = cache["n"]
    sigma = cache["stats"].sigma
    p = cache["params"]

    if layer_kind == "ln":
        grads = {"alpha": (g * n).sum(axis=(0, 1)), "beta": g.sum(axis=(0, 1))}
        return _normalize_backward(n, sigma, g * p.alpha), grads

    if layer_kind == "in":
        grads = {"alpha": (g * n).sum(axis=(0, 1)), "beta": g.sum(axis=(0, 1))}
        gnt = np.swapaxes(g * p.alpha, 1, 2)
        return np.swapaxes(_normalize_backward(cache["nt"], sigma, gnt), 1, 2), grads

    if layer_kind == "cn":
        grads = {"alpha": (g * n).sum(axis=0), "beta": g.sum(axis=0)}
        return _normalize_backward(n, sigma, g * p.alpha), grads

    if layer_kind == "acn":
        sim = cache["sim"]
        w = sim.weights
        g_alpha = g * n
        g_ahat = g_alpha * p.alpha_g
        g_bhat = g * p.beta_g
        grads = {
            "alpha_g": (g_alpha * cache["a_hat"]).sum(axis=0),
            "alpha_l": np.einsum("bci,bcd->id", w, g_ahat),
            "beta_g": (g * cache["b_hat"]).sum(axis=0),
            "beta_l": np.einsum("bci,bcd->id", w, g_bhat),
        }
        gz = _normalize_backward(n, sigma, g * cache["alpha"])
        if cache["latent"]:
            g_w = g_ahat @ p.alpha_l.T + g_bhat @ p.beta_l.T
            g_raw = softmax_backward(w, g_w, p.tau)
            basis = cache["basis"]
            ga, gb = pairwise_similarity_backward(basis, basis, g_raw, p.sim_metric)
            gz = gz + ga + gb
        return gz, grads

    if layer_kind == "pcn":
        sim_a, sim_b = cache["sim_a"], cache["sim_b"]
        h = cache["h"]
        g_alpha = g * n
        g_ap = np.einsum("bck,bcd->kd", sim_a.weights, g_alpha)
        g_bp = np.einsum("bck,bcd->kd", sim_b.weights, g)
        g_raw_a = softmax_backward(sim_a.weights, g_alpha @ p.alpha_p.T, p.tau)
        g_raw_b = softmax_backward(sim_b.weights, g @ p.beta_p.T, p.tau)
        gh_a, gp_a = cosine_rows_backward(h, p.alpha_p, g_raw_a, COSINE_EPS)
        gh_b, gp_b = cosine_rows_backward(h, p.beta_p, g_raw_b, COSINE_EPS)
        gh = gh_a + gh_b
        grads = {
            "alpha_p": g_ap + gp_a.sum(axis=0),
            "beta_p": g_bp + gp_b.sum(axis=0),
            "proj_w": np.einsum("bcl,bcd->ld", cache["xw"], gh),
            "proj_b": gh.sum(axis=(0, 1)),
        }
        return _normalize_backward(n, sigma, g * cache["alpha"]), grads

    raise ValueError(f"unknown layer kind {layer_kind!r}")


# -------------------------------------------------------------- layer object


class NormLayer:
    """Stateful wrapper used inside the backbones.

    ``forward(z, x)`` takes the token batch and the (possibly
    instance-normalized) input window ``x[B, L, C]``; only ACN in data space
    and PCN read the window.
    """

    def __init__(self, kind: str, params, eps_norm: float = EPS_NORM):
        if kind not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {kind!r}")
        self.kind = kind
        self.params = params
        self.eps_norm = eps_norm
        self.cache: dict | None = None
        self.grads: dict[str, np.ndarray] = {}
        self.last_similarity = None
        self.last_io = None

    @classmethod
    def build(cls, kind: str, c: int, d: int, l_in: int, rng: np.random.Generator | None = None,
              tau: float = DEFAULT_TAU, k: int = 4, sim_metric: str = "cosine",
              sim_space: str = "latent_z", proto_jitter: float = 0.0) -> "NormLayer":
        if kind in ("ln", "in"):
            params = LnParams.identity(d)
        elif kind == "cn":
            params = CnParams.identity(c, d)
        elif kind == "acn":
            params = AcnParams.identity(c, d, tau=tau, sim_metric=sim_metric, sim_space=sim_space)
        elif kind == "pcn":
            if rng is None:
                raise ValueError("PCN needs an rng for its projection")
            params = PcnParams.init(k, d, l_in, rng, tau=tau, jitter=proto_jitter)
        else:
            raise ValueError(f"unknown norm kind {kind!r}")
        return cls(kind, params)

    def named_params(self) -> dict[str, np.ndarray]:
        return self.params.banks()

    def forward(self, z, x=None, keep_cache: bool = True):
        cache = {} if keep_cache else None
        if self.kind == "ln":
            out = ln_forward(z, self.params, self.eps_norm, cache)
        elif self.kind == "in":
            out = in_forward(z, self.params, self.eps_norm, cache)
        elif self.kind == "cn":
            out = cn_forward(z, self.params, self.eps_norm, cache)
        elif self.kind == "acn":
            basis = None if self.params.sim_space == "latent_z" else _windows(x)
            out, sim, _ = acn_forward(z, self.params, basis, self.eps_norm, cache)
            self.last_similarity = sim
        else:
            out, sim_a, _, _ = pcn_forward(z, x, self.params, self.eps_norm, cache)
            self.last_similarity = sim_a
        self.cache = cache
        if keep_cache:
            self.last_io = (z, x, out)
        return out

    def backward(self, grad_out):
        gz, self.grads = norm_backward(self.kind, self.cache, grad_out)
        return gz

    # -- flat binary container
    def to_bytes(self) -> bytes:
        p = self.params
        d = next(iter(p.banks().values())).shape[-1]
        c = k = l_in = 0
        tau = 0.0
        if self.kind == "cn":
            c = p.channels
        elif self.kind == "acn":
            c, tau = p.channels, p.tau
        elif self.kind == "pcn":
            k, l_in, tau = p.k, p.proj_w.shape[0], p.tau
        head = struct.pack("<BIIIId", KIND_CODES[self.kind], c, k, d, l_in, tau)
        body = b"".join(np.asarray(b, dtype="<f8").tobytes() for b in p.banks().values())
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes, sim_metric: str = "cosine", sim_space: str = "latent_z",
                   eps_norm: float = EPS_NORM) -> "NormLayer":
        layer, used = cls._read(blob, sim_metric, sim_space, eps_norm)
        if used != len(blob):
            raise ValueError(f"{len(blob) - used} trailing bytes after norm container")
        return layer

    HEADER = struct.Struct("<BIIIId")

    @classmethod
    def _read(cls, blob: bytes, sim_metric: str, sim_space: str, eps_norm: float):
        code, c, k, d, l_in, tau = cls.HEADER.unpack_from(blob, 0)
        kind = {v: n for n, v in KIND_CODES.items()}[code]
        shapes = {
            "ln": [(d,), (d,)], "in": [(d,), (d,)],
            "cn": [(c, d), (c, d)],
            "acn": [(c, d)] * 4,
            "pcn": [(k, d), (k, d), (l_in, d), (d,)],
        }[kind]
        off = cls.HEADER.size
        banks = []
        for shape in shapes:
            count = int(np.prod(shape))
            banks.append(np.frombuffer(blob, dtype="<f8", count=count, offset=off)
                         .astype(np.float64).reshape(shape))
            off += 8 * count
        if kind in ("ln", "in"):
            params = LnParams(*banks)
        elif kind == "cn":
            params = CnParams(*banks)
        elif kind == "acn":
            params = AcnParams(*banks, tau=tau, sim_metric=sim_metric, sim_space=sim_space)
        else:
            params = PcnParams(*banks, tau=tau)
        return cls(kind, params, eps_norm), off
