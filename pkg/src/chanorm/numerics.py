"""Dense kernels shared by every layer.

Arrays are plain float64 numpy arrays; the helpers here add the shape checks,
the stable softmax, the Cholesky log-determinant and the cosine kernel (with
its backward pass) that the normalization layers are built from.
"""
from __future__ import annotations

import numpy as np

COSINE_EPS = 1e-8


class KernelError(ValueError):
    """Raised on shape mismatches and non-finite kernel results."""


class NonPSDError(KernelError):
    def __init__(self, pivot: int, value: float):
        super().__init__(f"matrix is not positive definite: pivot {pivot} is {value:.6g}")
        self.pivot = pivot
        self.value = value


def as_tensor(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def check_finite(a: np.ndarray, what: str = "kernel output") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise KernelError(f"{what} contains NaN or Inf")
    return a


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and a stream path.

    Distinct stream paths give independent streams, so e.g. the backbone
    weights can be drawn identically whatever normalization layer is chosen.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *stream])
    return np.random.Generator(np.random.Philox(ss))


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise KernelError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise KernelError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def rowwise_softmax(m, tau: float = 1.0) -> np.ndarray:
    """Softmax of ``m / tau`` along the last axis, with max subtraction."""
    if not tau > 0:
        raise KernelError(f"temperature must be positive, got {tau}")
    m = as_tensor(m) / tau
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(weights: np.ndarray, grad_weights: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Gradient w.r.t. the pre-temperature logits given ``weights = softmax(m / tau)``."""
    inner = (grad_weights * weights).sum(axis=-1, keepdims=True)
    return weights * (grad_weights - inner) / tau


def logdet_psd(m) -> float:
    """log det of a symmetric positive definite matrix via Cholesky.

    Raises NonPSDError naming the first pivot that is not strictly positive.
    """
    a = as_tensor(m).copy()
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise KernelError(f"logdet_psd expects a square matrix, got {a.shape}")
    n = a.shape[0]
    low = np.zeros_like(a)
    total = 0.0
    for j in range(n):
        pivot = a[j, j] - low[j, :j] @ low[j, :j]
        if not pivot > 0:
            raise NonPSDError(j, float(pivot))
        d = np.sqrt(pivot)
        low[j, j] = d
        low[j + 1:, j] = (a[j + 1:, j] - low[j + 1:, :j] @ low[j, :j]) / d
        total += np.log(d)
    return 2.0 * total


def cosine_rows(a, b, eps: float = COSINE_EPS) -> np.ndarray:
    """Pairwise cosine similarity between the rows of ``a`` and ``b``.

    Leading batch axes broadcast: ``a[..., P, D]`` and ``b[..., Q, D]`` give
    ``[..., P, Q]``.  The denominator is ``|a_p| |b_q| + eps`` so zero rows
    score 0 instead of dividing by zero.
    """
    if eps < 0:
        raise KernelError("eps must be non-negative")
    a = as_tensor(a)
    b = as_tensor(b)
    num = a @ np.swapaxes(b, -1, -2)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    den = na[..., :, None] * nb[..., None, :] + eps
    return num / den


def cosine_rows_backward(a, b, grad, eps: float = COSINE_EPS):
    """Gradients of ``sum(grad * cosine_rows(a, b))`` w.r.t. ``a`` and ``b``."""
    a = as_tensor(a)
    b = as_tensor(b)
    num = a @ np.swapaxes(b, -1, -2)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    den = na[..., :, None] * nb[..., None, :] + eps
    # d(out)/d(num) = 1/den ; d(out)/d(den) = -num/den^2
    g_num = grad / den
    g_den = -grad * num / den**2
    ga = g_num @ b
    gb = np.swapaxes(g_num, -1, -2) @ a
    # den depends on |a_p| and |b_q|; d|v|/dv = v/|v| (taken as 0 at v = 0)
    g_na = (g_den * nb[..., None, :]).sum(axis=-1)
    g_nb = (g_den * na[..., :, None]).sum(axis=-2)
    inv_na = np.divide(1.0, na, out=np.zeros_like(na), where=na > 0)
    inv_nb = np.divide(1.0, nb, out=np.zeros_like(nb), where=nb > 0)
    ga = ga + (g_na * inv_na)[..., None] * a
    gb = gb + (g_nb * inv_nb)[..., None] * b
    return ga, gb


def neg_l1_rows(a, b) -> np.ndarray:
    diff = as_tensor(a)[..., :, None, :] - as_tensor(b)[..., None, :, :]
    return -np.abs(diff).sum(axis=-1)


def neg_l1_rows_backward(a, b, grad):
    sign = np.sign(as_tensor(a)[..., :, None, :] - as_tensor(b)[..., None, :, :])
    g = -grad[..., None] * sign
    return g.sum(axis=-2), -g.sum(axis=-3)


def neg_l2_rows(a, b) -> np.ndarray:
    diff = as_tensor(a)[..., :, None, :] - as_tensor(b)[..., None, :, :]
    return -np.sqrt((diff**2).sum(axis=-1))


def neg_l2_rows_backward(a, b, grad):
    diff = as_tensor(a)[..., :, None, :] - as_tensor(b)[..., None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    # the distance is not differentiable at 0; the diagonal of a self-distance
    # matrix is constant, so a zero subgradient is the correct total there
    inv = np.divide(1.0, dist, out=np.zeros_like(dist), where=dist > 0)
    g = -(grad * inv)[..., None] * diff
    return g.sum(axis=-2), -g.sum(axis=-3)


SIMILARITIES = {
    "cosine": (cosine_rows, cosine_rows_backward),
    "neg_l1": (neg_l1_rows, neg_l1_rows_backward),
    "neg_l2": (neg_l2_rows, neg_l2_rows_backward),
}


def pairwise_similarity(a, b, metric: str) -> np.ndarray:
    try:
        fwd, _ = SIMILARITIES[metric]
    except KeyError:
        raise KernelError(f"unknown similarity metric {metric!r}") from None
    return fwd(a, b)


def pairwise_similarity_backward(a, b, grad, metric: str):
    return SIMILARITIES[metric][1](a, b, grad)
