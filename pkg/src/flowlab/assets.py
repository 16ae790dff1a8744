"""Differentiable parametric assets: a free latent vector and a 2D splat canvas.

Splat parameters are packed per splat as ``[cu, cv, log_su, log_sv, rho, amp]``
followed by a single background value.  Canvas pixel ``(row, col)`` sits at
``((col + 0.5) / W, (row + 0.5) / W)`` and is stored row-major.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import _binary
from .rng import Stream

SPLAT_FIELDS = 6
_MAGIC = b"RFAS"
_VERSION = 1
_KIND_CODES = {"latent": 0, "splat": 1}


@dataclass(frozen=True)
class ViewPose:
    rotation: float = 0.0
    tx: float = 0.0
    ty: float = 0.0


IDENTITY_VIEW = ViewPose()


@dataclass(frozen=True)
class ViewRanges:
    """Half-widths of the uniform pose distribution."""

    rotation: float = np.pi / 8
    translation: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.rotation <= np.pi / 8 + 1e-15:
            raise ValueError("rotation half-width must lie in [0, pi/8]")
        if not 0.0 <= self.translation <= 0.05 + 1e-15:
            raise ValueError("translation half-width must lie in [0, 0.05]")


def sample_view(rng: Stream, ranges: ViewRanges = ViewRanges()) -> ViewPose:
    u = rng.uniform(3, low=-1.0, high=1.0)
    return ViewPose(ranges.rotation * u[0], ranges.translation * u[1], ranges.translation * u[2])


@dataclass
class LatentAsset:
    theta: np.ndarray

    kind = "latent"

    @property
    def params(self) -> np.ndarray:
        return self.theta

    def with_params(self, p) -> "LatentAsset":
        return LatentAsset(np.asarray(p, dtype=np.float64).copy())

    @property
    def output_dim(self) -> int:
        return self.theta.shape[0]


@dataclass
class SplatAsset:
    splats: np.ndarray  # (K, 6)
    background: float
    width: int = 16

    kind = "splat"

    def __post_init__(self):
        self.splats = np.asarray(self.splats, dtype=np.float64).reshape(-1, SPLAT_FIELDS)
        if self.splats.shape[0] < 1:
            raise ValueError("a splat asset needs at least one splat")

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.splats.ravel(), [self.background]])

    def with_params(self, p) -> "SplatAsset":
        p = np.asarray(p, dtype=np.float64)
        return replace(self, splats=p[:-1].reshape(-1, SPLAT_FIELDS).copy(), background=float(p[-1]))

    @property
    def output_dim(self) -> int:
        return self.width * self.width


def _rot(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def _pixel_grid(w: int) -> np.ndarray:
    rows, cols = np.mgrid[0:w, 0:w]
    return np.stack([(cols.ravel() + 0.5) / w, (rows.ravel() + 0.5) / w], axis=1)


def _splat_terms(asset: SplatAsset, view: ViewPose):
    s = asset.splats
    rv = _rot(view.rotation)
    centers = (s[:, :2] - 0.5) @ rv.T + 0.5 + np.array([view.tx, view.ty])
    rho = s[:, 4] + view.rotation
    c, sn = np.cos(rho), np.sin(rho)
    d = _pixel_grid(asset.width)[None, :, :] - centers[:, None, :]  # (K, P, 2)
    qu = c[:, None] * d[..., 0] + sn[:, None] * d[..., 1]
    qv = -sn[:, None] * d[..., 0] + c[:, None] * d[..., 1]
    inv_u = np.exp(-2.0 * s[:, 2])[:, None]
    inv_v = np.exp(-2.0 * s[:, 3])[:, None]
    e = np.exp(-0.5 * (qu * qu * inv_u + qv * qv * inv_v))
    return e, qu, qv, inv_u, inv_v, rho, rv


def render(asset, view: ViewPose = IDENTITY_VIEW) -> np.ndarray:
    if isinstance(asset, LatentAsset):
        return asset.theta.copy()
    e = _splat_terms(asset, view)[0]
    return np.tanh(asset.splats[:, 5] @ e + asset.background)


def backprop_view(asset, view: ViewPose, grad_x) -> np.ndarray:
    """Pull a data-space gradient back to the flat parameter vector."""
    grad_x = np.asarray(grad_x, dtype=np.float64)
    if grad_x.shape != (asset.output_dim,):
        raise ValueError(f"dimension mismatch: gradient {grad_x.shape}, asset renders {asset.output_dim}")
    if isinstance(asset, LatentAsset):
        return grad_x.copy()
    e, qu, qv, inv_u, inv_v, rho, rv = _splat_terms(asset, view)
    amp = asset.splats[:, 5]
    y = np.tanh(amp @ e + asset.background)
    gz = grad_x * (1.0 - y * y)  # through tanh
    ge = gz[None, :] * e  # (K, P)
    age = amp[:, None] * ge  # d/dE is -age
    wu, wv = qu * inv_u, qv * inv_v
    # dE/dcenters' = -R(rho) w ; centers' = R(view) c + ..., so pull back with R(view)^T
    c, sn = np.cos(rho), np.sin(rho)
    gcu_view = np.sum(age * (c[:, None] * wu - sn[:, None] * wv), axis=1)
    gcv_view = np.sum(age * (sn[:, None] * wu + c[:, None] * wv), axis=1)
    g_center = np.stack([gcu_view, gcv_view], axis=1) @ rv
    out = np.empty_like(asset.splats)
    out[:, 0:2] = g_center
    out[:, 2] = np.sum(age * qu * wu, axis=1)
    out[:, 3] = np.sum(age * qv * wv, axis=1)
    out[:, 4] = -np.sum(age * qu * qv * (inv_u - inv_v), axis=1)
    out[:, 5] = ge.sum(axis=1)
    return np.concatenate([out.ravel(), [gz.sum()]])


@dataclass(frozen=True)
class PriorMeta:
    input_dim: int
    data_mean: np.ndarray
    pixel_mean: float = 0.0
    image_size: int | None = None
    gray_level: float = 0.0


def init_asset(kind: str, mode: str, seed: int, prior_meta: PriorMeta, num_splats: int = 32):
    """Initial asset either near the data (in_distribution) or a flat gray render."""
    if mode not in ("in_distribution", "out_of_distribution"):
        raise ValueError(f"unknown init mode {mode!r}")
    rng = Stream(seed, stream_id=0xA55E)
    if kind == "latent":
        if mode == "out_of_distribution":
            return LatentAsset(np.full(prior_meta.input_dim, prior_meta.gray_level))
        mean = np.asarray(prior_meta.data_mean, dtype=np.float64)
        return LatentAsset(mean + 0.01 * rng.normal(prior_meta.input_dim))
    if kind == "splat":
        w = prior_meta.image_size or int(round(np.sqrt(prior_meta.input_dim)))
        if w * w != prior_meta.input_dim:
            raise ValueError("splat assets need a square canvas matching the prior")
        k = num_splats
        splats = np.empty((k, SPLAT_FIELDS))
        splats[:, 0:2] = rng.uniform((k, 2), low=0.15, high=0.85)
        splats[:, 2:4] = np.log(1.5 / w) + 0.2 * rng.normal((k, 2))
        splats[:, 4] = rng.uniform(k, low=-np.pi, high=np.pi)
        if mode == "out_of_distribution":
            splats[:, 5] = 0.0
            return SplatAsset(splats, 0.0, w)
        level = float(np.clip(prior_meta.pixel_mean, -0.95, 0.95))
        splats[:, 5] = 0.3 * rng.normal(k)
        return SplatAsset(splats, float(np.arctanh(level)), w)
    raise ValueError(f"unknown asset kind {kind!r}")


# ---------------------------------------------------------------- files


def asset_bytes(asset) -> bytes:
    p = asset.params
    head = _MAGIC + _binary.u32(_VERSION) + _binary.u8(_KIND_CODES[asset.kind]) + _binary.u32(p.size)
    return head + _binary.f32(p)


def save_asset(asset, path) -> None:
    Path(path).write_bytes(asset_bytes(asset))


def load_asset(path):
    r = _binary.Reader(Path(path).read_bytes(), str(path))
    r.magic(_MAGIC)
    r.version(_VERSION)
    code = r.u8()
    count = r.u32()
    p = r.f32(count).astype(np.float64)
    r.finish()
    if code == _KIND_CODES["latent"]:
        return LatentAsset(p)
    if code == _KIND_CODES["splat"]:
        if (count - 1) % SPLAT_FIELDS:
            raise _binary.FormatError(f"{path}: splat parameter count {count} is not 6K+1")
        # canvas width is not stored; default 16 (override with dataclasses.replace)
        return SplatAsset(p[:-1].reshape(-1, SPLAT_FIELDS), float(p[-1]))
    raise _binary.FormatError(f"{path}: unknown asset kind code {code}")


def pgm_bytes(canvas, width: int) -> bytes:
    """Binary 8-bit PGM; values mapped linearly from [-1, 1] to [0, 255]."""
    img = np.asarray(canvas, dtype=np.float64).reshape(width, width)
    pix = np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return f"P5\n{width} {width}\n255\n".encode("ascii") + pix.tobytes()


def save_pgm(canvas, width: int, path) -> None:
    Path(path).write_bytes(pgm_bytes(canvas, width))
