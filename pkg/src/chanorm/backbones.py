"""Small forecasting backbones built around a pluggable normalization layer.

Pipeline: optional per-window standardization of ``x[B, L, C]`` -> shared
linear token embedding (one token per channel) -> optional channel
identifier -> encoder -> shared linear head -> optional de-standardization.

All components cache their last forward and expose ``backward`` plus
``named_params`` / ``grads`` dicts keyed by bank name.
"""
from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import dump_kv, from_kv, parse_kv
from .normlayers import DEFAULT_TAU, NormLayer, SIM_METRICS, SIM_SPACES
from .numerics import KernelError, as_tensor, make_rng, rowwise_softmax, softmax_backward

BACKBONE_KINDS = ("channel_attention", "residual_mlp", "linear")
NORM_CHOICES = ("none", "ln", "in", "cn", "acn", "pcn")
IDENTIFIER_MODES = ("none", "learnable", "fixed_constant")
REVIN_EPS = 1e-5

# RNG stream ids; keeping them separate makes the backbone weights identical
# whichever normalization layer is plugged in
_STREAM_BACKBONE, _STREAM_NORM, _STREAM_IDENT = 1, 2, 3


@dataclass
class BackboneConfig:
    kind: str = "channel_attention"
    depth: int = 2
    d_model: int = 32
    heads: int = 2
    norm_kind: str = "ln"
    identifier_mode: str = "none"
    instance_norm_io: bool = False
    # options for the adaptive / prototypical layers
    tau: float = DEFAULT_TAU
    k: int = 4
    sim_metric: str = "cosine"
    sim_space: str = "latent_z"
    proto_jitter: float = 0.0

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.norm_kind not in NORM_CHOICES:
            raise ValueError(f"unknown norm_kind {self.norm_kind!r}")
        if self.identifier_mode not in IDENTIFIER_MODES:
            raise ValueError(f"unknown identifier_mode {self.identifier_mode!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if self.sim_metric not in SIM_METRICS or self.sim_space not in SIM_SPACES:
            raise ValueError("bad similarity options")
        if not self.tau > 0 or self.k < 1:
            raise ValueError("tau must be > 0 and k >= 1")


@dataclass
class AttentionTrace:
    """Attention weights per layer, each ``[B, heads, C, C]``."""

    weights: list = field(default_factory=list)


@dataclass
class ForwardState:
    trace: AttentionTrace
    tokens: np.ndarray          # post-encoder tokens [B, C, D]
    revin: tuple | None = None  # (mean, std), each [B, 1, C]


# ---------------------------------------------------------------- functional


def embed_channels(x, w, b):
    """Map every channel's length-L series through one shared linear map."""
    x = as_tensor(x)
    if x.ndim != 3 or w.shape[0] != x.shape[1]:
        raise KernelError(f"embedding expects windows of length {w.shape[0]}, got x of shape {x.shape}")
    return np.swapaxes(x, 1, 2) @ w + b


def add_channel_identifier(z, bank, mode: str = "learnable"):
    if mode not in ("learnable", "fixed_constant"):
        raise ValueError(f"bad identifier mode {mode!r}")
    if bank.shape != z.shape[1:]:
        raise KernelError(f"identifier bank {bank.shape} does not match tokens {z.shape}")
    return z + bank


def project_forecast(z, w, b):
    """Shared D -> H head, returned as ``[B, H, C]``."""
    z = as_tensor(z)
    if z.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise KernelError(f"head {w.shape} does not fit tokens {z.shape}")
    return np.swapaxes(z @ w + b, 1, 2)


def _glorot(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


# --------------------------------------------------------------- components


class Dense:
    """Affine map on the last axis (``bias=False`` for a plain linear map)."""

    def __init__(self, rng, d_in, d_out, bias: bool = True):
        self.params = {"w": _glorot(rng, d_in, d_out)}
        if bias:
            self.params["b"] = np.zeros(d_out)
        self.grads = {}

    def named_params(self):
        return self.params

    def forward(self, a):
        self._a = a
        out = a @ self.params["w"]
        return out + self.params["b"] if "b" in self.params else out

    def backward(self, g):
        a = self._a
        self.grads = {"w": np.tensordot(a, g, axes=(tuple(range(a.ndim - 1)),) * 2)}
        if "b" in self.params:
            self.grads["b"] = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return g @ self.params["w"].T


class FeedForward:
    """Position-wise two-layer ReLU MLP, D -> hidden -> D."""

    def __init__(self, rng, d, hidden):
        self.fc1 = Dense(rng, d, hidden)
        self.fc2 = Dense(rng, hidden, d)

    def named_params(self):
        return {**{f"fc1.{k}": v for k, v in self.fc1.named_params().items()},
                **{f"fc2.{k}": v for k, v in self.fc2.named_params().items()}}

    @property
    def grads(self):
        return {**{f"fc1.{k}": v for k, v in self.fc1.grads.items()},
                **{f"fc2.{k}": v for k, v in self.fc2.grads.items()}}

    def forward(self, z):
        pre = self.fc1.forward(z)
        self._mask = pre > 0
        return self.fc2.forward(pre * self._mask)

    def backward(self, g):
        return self.fc1.backward(self.fc2.backward(g) * self._mask)


class ChannelAttention:
    """Multi-head scaled dot-product self-attention over the channel axis.

    The key projection has no bias: it would add the same ``q . b_k`` to every
    score in a softmax row and so could never change the output.
    """

    def __init__(self, rng, d, heads):
        self.heads = heads
        self.dh = d // heads
        self.q = Dense(rng, d, d)
        self.k = Dense(rng, d, d, bias=False)
        self.v = Dense(rng, d, d)
        self.o = Dense(rng, d, d)

    def _parts(self):
        return {"q": self.q, "k": self.k, "v": self.v, "o": self.o}

    def named_params(self):
        return {f"{n}.{k}": v for n, m in self._parts().items() for k, v in m.named_params().items()}

    @property
    def grads(self):
        return {f"{n}.{k}": v for n, m in self._parts().items() for k, v in m.grads.items()}

    def _split(self, a):
        b, c, _ = a.shape
        return a.reshape(b, c, self.heads, self.dh).transpose(0, 2, 1, 3)

    def _merge(self, a):
        b, h, c, dh = a.shape
        return a.transpose(0, 2, 1, 3).reshape(b, c, h * dh)

    def forward(self, z):
        q = self._split(self.q.forward(z))
        k = self._split(self.k.forward(z))
        v = self._split(self.v.forward(z))
        scale = 1.0 / np.sqrt(self.dh)
        attn = rowwise_softmax(q @ np.swapaxes(k, -1, -2) * scale)
        self._cache = (q, k, v, attn, scale)
        return self.o.forward(self._merge(attn @ v)), attn

    def backward(self, g):
        q, k, v, attn, scale = self._cache
        g_o = self._split(self.o.backward(g))
        g_attn = g_o @ np.swapaxes(v, -1, -2)
        g_v = np.swapaxes(attn, -1, -2) @ g_o
        g_s = softmax_backward(attn, g_attn) * scale
        g_q = g_s @ k
        g_k = np.swapaxes(g_s, -1, -2) @ q
        return (self.q.backward(self._merge(g_q)) + self.k.backward(self._merge(g_k))
                + self.v.backward(self._merge(g_v)))


class _Identity:
    kind = "none"

    def named_params(self):
        return {}

    grads: dict = {}

    def forward(self, z, x=None, keep_cache=True):
        return z

    def backward(self, g):
        return g


def _make_norm(cfg: BackboneConfig, c, l_in, rng):
    if cfg.norm_kind == "none":
        return _Identity()
    return NormLayer.build(cfg.norm_kind, c, cfg.d_model, l_in, rng=rng, tau=cfg.tau, k=cfg.k,
                           sim_metric=cfg.sim_metric, sim_space=cfg.sim_space,
                           proto_jitter=cfg.proto_jitter)


class AttentionBlock:
    """attention -> residual -> norm -> FFN -> residual -> norm."""

    def __init__(self, cfg, c, l_in, rng, norm_rng):
        self.attn = ChannelAttention(rng, cfg.d_model, cfg.heads)
        self.ffn = FeedForward(rng, cfg.d_model, 2 * cfg.d_model)
        self.norm1 = _make_norm(cfg, c, l_in, norm_rng)
        self.norm2 = _make_norm(cfg, c, l_in, norm_rng)

    def modules(self):
        return {"attn": self.attn, "norm1": self.norm1, "ffn": self.ffn, "norm2": self.norm2}

    def forward(self, z, x):
        a, weights = self.attn.forward(z)
        z1 = self.norm1.forward(z + a, x)
        return self.norm2.forward(z1 + self.ffn.forward(z1), x), weights

    def backward(self, g):
        g_v = self.norm2.backward(g)
        g_z1 = g_v + self.ffn.backward(g_v)
        g_u = self.norm1.backward(g_z1)
        return g_u + self.attn.backward(g_u)


class MlpBlock:
    """Channel-independent residual MLP followed by the norm layer."""

    def __init__(self, cfg, c, l_in, rng, norm_rng):
        self.mlp = FeedForward(rng, cfg.d_model, 2 * cfg.d_model)
        self.norm = _make_norm(cfg, c, l_in, norm_rng)

    def modules(self):
        return {"mlp": self.mlp, "norm": self.norm}

    def forward(self, z, x):
        return self.norm.forward(z + self.mlp.forward(z), x), None

    def backward(self, g):
        g_u = self.norm.backward(g)
        return g_u + self.mlp.backward(g_u)


class LinearBlock:
    """Just the norm layer: the linear backbone is embed -> norm -> head."""

    def __init__(self, cfg, c, l_in, rng, norm_rng):
        self.norm = _make_norm(cfg, c, l_in, norm_rng)

    def modules(self):
        return {"norm": self.norm}

    def forward(self, z, x):
        return self.norm.forward(z, x), None

    def backward(self, g):
        return self.norm.backward(g)


_BLOCKS = {"channel_attention": AttentionBlock, "residual_mlp": MlpBlock, "linear": LinearBlock}


def channel_attention_encoder(z, blocks, x=None):
    """Run a stack of attention blocks; returns the tokens and the trace."""
    trace = AttentionTrace()
    for blk in blocks:
        z, w = blk.forward(z, x)
        trace.weights.append(w)
    return z, trace


def residual_mlp_encoder(z, blocks, x=None):
    for blk in blocks:
        z, _ = blk.forward(z, x)
    return z


# -------------------------------------------------------------------- model


class Forecaster:
    """A complete model: ``forward(x[B, L, C]) -> y_hat[B, H, C]``."""

    def __init__(self, cfg: BackboneConfig, lookback: int, horizon: int, channels: int, seed: int = 7):
        self.cfg = cfg
        self.lookback, self.horizon, self.channels, self.seed = lookback, horizon, channels, seed
        rng = make_rng(seed, _STREAM_BACKBONE)
        norm_rng = make_rng(seed, _STREAM_NORM)
        d = cfg.d_model
        self.embed = Dense(rng, lookback, d)
        n_blocks = 1 if cfg.kind == "linear" else cfg.depth
        self.blocks = [_BLOCKS[cfg.kind](cfg, channels, lookback, rng, norm_rng) for _ in range(n_blocks)]
        self.head = Dense(rng, d, horizon)
        self.identifier = None
        if cfg.identifier_mode == "learnable":
            self.identifier = np.zeros((channels, d))
        elif cfg.identifier_mode == "fixed_constant":
            self.identifier = make_rng(seed, _STREAM_IDENT).normal(size=(channels, d))
        self.grads: dict[str, np.ndarray] = {}
        self.state: ForwardState | None = None

    # -- parameters
    def _modules(self):
        mods = {"embed": self.embed}
        for i, blk in enumerate(self.blocks):
            for name, m in blk.modules().items():
                mods[f"blocks.{i}.{name}"] = m
        mods["head"] = self.head
        return mods

    def norm_layers(self) -> list[NormLayer]:
        return [m for m in self._modules().values() if isinstance(m, NormLayer)]

    def named_params(self) -> dict[str, np.ndarray]:
        """Trainable banks by dotted name (live references)."""
        out = {f"{p}.{k}": v for p, m in self._modules().items() for k, v in m.named_params().items()}
        if self.identifier is not None and self.cfg.identifier_mode == "learnable":
            out["identifier"] = self.identifier
        return out

    def _collect_grads(self):
        out = {f"{p}.{k}": v for p, m in self._modules().items() for k, v in m.grads.items()}
        if self.cfg.identifier_mode == "learnable":
            out["identifier"] = self._g_ident
        return out

    # -- passes
    def forward(self, x):
        y, self.state = forward_forecast(x, self)
        return y

    def backward(self, grad_y):
        """Backpropagate ``dLoss/dy_hat`` and fill ``self.grads``."""
        g = as_tensor(grad_y)
        if self.state is None:
            raise RuntimeError("backward called before forward")
        if self.state.revin is not None:
            g = g * self.state.revin[1]
        g = self.head.backward(np.swapaxes(g, 1, 2))
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        self._g_ident = g.sum(axis=0)
        self.embed.backward(g)
        self.grads = self._collect_grads()
        return self.grads


def forward_forecast(x, model: Forecaster):
    """Full pipeline; returns the forecast ``[B, H, C]`` and a ForwardState."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] != model.lookback:
        raise KernelError(f"expected x of shape [B, {model.lookback}, C], got {x.shape}")
    revin = None
    if model.cfg.instance_norm_io:
        mean = x.mean(axis=1, keepdims=True)
        std = np.sqrt(x.var(axis=1, keepdims=True) + REVIN_EPS)
        x = (x - mean) / std
        revin = (mean, std)
    z = model.embed.forward(np.swapaxes(x, 1, 2))
    if model.identifier is not None:
        z = add_channel_identifier(z, model.identifier, model.cfg.identifier_mode)
    trace = AttentionTrace()
    for blk in model.blocks:
        z, w = blk.forward(z, x)
        if w is not None:
            trace.weights.append(w)
    tokens = z
    y = np.swapaxes(model.head.forward(z), 1, 2)
    if revin is not None:
        y = y * revin[1] + revin[0]
    return y, ForwardState(trace, tokens, revin)


# --------------------------------------------------------------- checkpoint

_MAGIC = b"CHANORM-CKPT\x01"


def model_record(model: Forecaster) -> dict:
    rec = asdict(model.cfg)
    rec.update(lookback=model.lookback, horizon=model.horizon, channels=model.channels, seed=model.seed)
    return rec


def save_checkpoint(model: Forecaster, path) -> None:
    """Config record, then norm-layer containers, then the other banks."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    text = dump_kv(model_record(model)).encode()
    buf.write(struct.pack("<I", len(text)) + text)
    norms = model.norm_layers()
    buf.write(struct.pack("<I", len(norms)))
    for layer in norms:
        blob = layer.to_bytes()
        buf.write(struct.pack("<I", len(blob)) + blob)
    norm_ids = {id(a) for layer in norms for a in layer.named_params().values()}
    banks = {n: a for n, a in model.named_params().items() if id(a) not in norm_ids}
    if model.cfg.identifier_mode == "fixed_constant":
        banks["identifier"] = model.identifier
    buf.write(struct.pack("<I", len(banks)))
    for name, arr in banks.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.asarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Forecaster:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise ValueError(f"{path} is not a chanorm checkpoint")
    off = len(_MAGIC)

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, blob, off)
        off += struct.calcsize(fmt)
        return vals

    (n,) = take("<I")
    rec = parse_kv(blob[off:off + n].decode())
    off += n
    sizes = {k: int(rec.pop(k)) for k in ("lookback", "horizon", "channels", "seed")}
    cfg = from_kv(BackboneConfig, rec)
    model = Forecaster(cfg, sizes["lookback"], sizes["horizon"], sizes["channels"], sizes["seed"])
    (n_norm,) = take("<I")
    layers = model.norm_layers()
    if n_norm != len(layers):
        raise ValueError(f"checkpoint has {n_norm} norm layers, model expects {len(layers)}")
    for layer in layers:
        (n,) = take("<I")
        loaded = NormLayer.from_bytes(blob[off:off + n], cfg.sim_metric, cfg.sim_space)
        off += n
        for name, arr in layer.named_params().items():
            arr[...] = loaded.named_params()[name]
    params = model.named_params()
    if cfg.identifier_mode == "fixed_constant":
        params["identifier"] = model.identifier
    (n_banks,) = take("<I")
    for _ in range(n_banks):
        (ln,) = take("<H")
        name = blob[off:off + ln].decode()
        off += ln
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        params[name][...] = arr
    return model
