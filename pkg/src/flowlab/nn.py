"""Dense velocity network with hand-written backprop and Adam.

The network maps ``[x, time features, class embedding]`` to a vector in data
space.  Every function accepts either a single sample (``x`` of shape ``(d,)``)
or a batch (``(B, d)``); ``t`` and ``class_id`` broadcast against the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _binary
from .rng import Stream

TIME_FEATURES = 5
ACTIVATIONS = ("tanh", "silu")
_MAGIC = b"RFPR"
_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    num_classes: int = 1
    cond_embed_dim: int = 4
    activation: str = "silu"
    time_embed_dim: int = TIME_FEATURES

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim <= 0:
            raise ValueError("input_dim must be positive")
        if any(h <= 0 for h in self.hidden_dims):
            raise ValueError("hidden widths must be positive")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1 (class 0 is the null class)")
        if self.cond_embed_dim < 0:
            raise ValueError("cond_embed_dim must be non-negative")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.time_embed_dim not in (0, TIME_FEATURES):
            raise ValueError(f"time_embed_dim must be 0 or {TIME_FEATURES}")

    @property
    def feature_dim(self) -> int:
        return self.input_dim + self.time_embed_dim + self.cond_embed_dim

    @property
    def layer_widths(self) -> tuple[int, ...]:
        return self.hidden_dims + (self.input_dim,)


@dataclass
class NetworkParams:
    """Weights ``(out, in)``, biases ``(out,)`` and the class-embedding table."""

    spec: NetworkSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    embedding: np.ndarray = field(default_factory=lambda: np.zeros((1, 0)))

    def leaves(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"layer{i}.weight", w))
            out.append((f"layer{i}.bias", b))
        out.append(("embedding", self.embedding))
        return out

    def with_leaves(self, arrays: list[np.ndarray]) -> "NetworkParams":
        n = len(self.weights)
        return replace(
            self,
            weights=list(arrays[0 : 2 * n : 2]),
            biases=list(arrays[1 : 2 * n : 2]),
            embedding=arrays[2 * n],
        )

    def zeros_like(self) -> "NetworkParams":
        return self.with_leaves([np.zeros_like(a) for _, a in self.leaves()])

    def copy(self) -> "NetworkParams":
        return self.with_leaves([a.copy() for _, a in self.leaves()])

    # velocity-field protocol used by flowlab.flow
    def velocity(self, x, t, class_id=0):
        return forward(self, x, t, class_id)

    def vjp_x(self, x, t, class_id, upstream):
        return backward_input(self, x, t, class_id, upstream)


def init_network(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Fan-in scaled normal weights (std ``1/sqrt(fan_in)``), zero biases."""
    if not spec.hidden_dims:
        raise ValueError("network needs at least one hidden layer")
    rng = Stream(seed, stream_id=0x6E6E)
    weights, biases = [], []
    fan_in = spec.feature_dim
    for width in spec.layer_widths:
        weights.append(rng.normal((width, fan_in)) / np.sqrt(fan_in))
        biases.append(np.zeros(width))
        fan_in = width
    embedding = 0.5 * rng.normal((spec.num_classes, spec.cond_embed_dim))
    return NetworkParams(spec, weights, biases, embedding)


def time_features(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.stack(
        [t, np.sin(2 * np.pi * t), np.cos(2 * np.pi * t), np.sin(4 * np.pi * t), np.cos(4 * np.pi * t)],
        axis=-1,
    )


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    return z / (1.0 + np.exp(-z))


def _act_grad(name, z):
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def _as_batch(params: NetworkParams, x, t, class_id):
    spec = params.spec
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[-1] != spec.input_dim:
        raise ValueError(f"dimension mismatch: x has {xb.shape[-1]} components, network expects {spec.input_dim}")
    n = xb.shape[0]
    tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    cb = np.broadcast_to(np.asarray(class_id), (n,))
    if cb.dtype.kind not in "iu":
        cb = cb.astype(np.int64)
    if np.any(cb < 0) or np.any(cb >= spec.num_classes):
        raise ValueError(f"class_id out of range [0, {spec.num_classes})")
    parts = [xb]
    if spec.time_embed_dim:
        parts.append(time_features(tb))
    if spec.cond_embed_dim:
        parts.append(params.embedding[cb])
    return np.concatenate(parts, axis=1), cb, single


def _forward_cache(params: NetworkParams, x, t, class_id):
    h, cb, single = _as_batch(params, x, t, class_id)
    act = params.spec.activation
    hs, zs = [h], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        zs.append(z)
        h = z if i == last else _act(act, z)
        hs.append(h)
    return hs, zs, cb, single


def forward(params: NetworkParams, x, t, class_id=0) -> np.ndarray:
    hs, _, _, single = _forward_cache(params, x, t, class_id)
    out = hs[-1]
    return out[0] if single else out


def _backward(params: NetworkParams, x, t, class_id, upstream, want_params: bool):
    hs, zs, cb, single = _forward_cache(params, x, t, class_id)
    u = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if u.shape != hs[-1].shape:
        raise ValueError(f"dimension mismatch: upstream {u.shape} vs output {hs[-1].shape}")
    act = params.spec.activation
    n_layers = len(params.weights)
    dws, dbs = [None] * n_layers, [None] * n_layers
    dz = u
    for i in range(n_layers - 1, -1, -1):
        if want_params:
            dws[i] = dz.T @ hs[i]
            dbs[i] = dz.sum(axis=0)
        dh = dz @ params.weights[i]
        if i > 0:
            dz = dh * _act_grad(act, zs[i - 1])
    return dws, dbs, dh, cb, single


def backward_params(params: NetworkParams, x, t, class_id, upstream) -> NetworkParams:
    """Gradient of ``sum(upstream * forward(...))`` with respect to every parameter."""
    dws, dbs, dh0, cb, _ = _backward(params, x, t, class_id, upstream, want_params=True)
    spec = params.spec
    d_emb = np.zeros_like(params.embedding)
    if spec.cond_embed_dim:
        start = spec.input_dim + spec.time_embed_dim
        np.add.at(d_emb, cb, dh0[:, start:])
    return NetworkParams(spec, dws, dbs, d_emb)


def backward_input(params: NetworkParams, x, t, class_id, upstream) -> np.ndarray:
    """Vector-Jacobian product of the network output with respect to ``x``."""
    _, _, dh0, _, single = _backward(params, x, t, class_id, upstream, want_params=False)
    gx = dh0[:, : params.spec.input_dim]
    return gx[0] if single else gx


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8


def _leaves(params):
    if isinstance(params, NetworkParams):
        return params.leaves()
    if isinstance(params, np.ndarray):
        return [("param0", params)]
    return [(f"param{i}", np.asarray(a)) for i, a in enumerate(params)]


def _rebuild(template, arrays):
    if isinstance(template, NetworkParams):
        return template.with_leaves(arrays)
    if isinstance(template, np.ndarray):
        return arrays[0]
    return list(arrays)


def adam_init(params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps_hat=1e-8) -> AdamState:
    zeros = [np.zeros_like(a, dtype=np.float64) for _, a in _leaves(params)]
    return AdamState([z.copy() for z in zeros], zeros, 0, learning_rate, beta1, beta2, eps_hat)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update.  Returns ``(new_params, new_state)``."""
    p_leaves, g_leaves = _leaves(params), _leaves(grads)
    if len(p_leaves) != len(g_leaves) or len(p_leaves) != len(state.m):
        raise ValueError("params, grads and optimizer state are not congruent")
    for (name, p), (_, g) in zip(p_leaves, g_leaves):
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    k = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for (_, p), (_, g), m, v in zip(p_leaves, g_leaves, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**k)
        v_hat = v / (1 - b2**k)
        new_p.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_hat))
        new_m.append(m)
        new_v.append(v)
    return _rebuild(params, new_p), replace(state, m=new_m, v=new_v, step=k)


# ---------------------------------------------------------------- checkpoints


def checkpoint_bytes(params: NetworkParams) -> bytes:
    spec = params.spec
    if spec.time_embed_dim != TIME_FEATURES:
        raise ValueError("checkpoint format requires the 5-feature time embedding")
    out = [_MAGIC, _binary.u32(_VERSION), _binary.u32(spec.input_dim), _binary.u32(len(spec.layer_widths))]
    out += [_binary.u32(w) for w in spec.layer_widths]
    out += [
        _binary.u32(spec.num_classes),
        _binary.u32(spec.cond_embed_dim),
        _binary.u8(ACTIVATIONS.index(spec.activation)),
    ]
    for w, b in zip(params.weights, params.biases):
        out.append(_binary.f32(w.ravel()))
        out.append(_binary.f32(b))
    out.append(_binary.f32(params.embedding.ravel()))
    return b"".join(out)


def save_checkpoint(params: NetworkParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> NetworkParams:
    return parse_checkpoint(Path(path).read_bytes(), what=str(path))


def parse_checkpoint(data: bytes, what: str = "checkpoint") -> NetworkParams:
    r = _binary.Reader(data, what)
    r.magic(_MAGIC)
    r.version(_VERSION)
    input_dim = r.u32()
    n_layers = r.u32()
    widths = [r.u32() for _ in range(n_layers)]
    num_classes = r.u32()
    cond = r.u32()
    code = r.u8()
    if code >= len(ACTIVATIONS):
        raise _binary.FormatError(f"{what}: unknown activation code {code}")
    if not widths or widths[-1] != input_dim:
        raise _binary.FormatError(f"{what}: output width does not match input_dim")
    spec = NetworkSpec(input_dim, tuple(widths[:-1]), num_classes, cond, ACTIVATIONS[code])
    weights, biases = [], []
    fan_in = spec.feature_dim
    for width in widths:
        weights.append(r.f32(width * fan_in).astype(np.float64).reshape(width, fan_in))
        biases.append(r.f32(width).astype(np.float64))
        fan_in = width
    embedding = r.f32(num_classes * cond).astype(np.float64).reshape(num_classes, cond)
    r.finish()
    return NetworkParams(spec, weights, biases, embedding)
