"""Distillation gradients (VFDS, UCM, VF-ISM) and the asset optimisation loop.

All three gradients are delivered with respect to the rendered vector ``x``.
The bracketed residual is treated as a constant: no derivative flows through
the velocity network or the push-backward chain, except for VFDS with
``include_jacobian`` where the full chain through the field is kept.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .assets import IDENTITY_VIEW, ViewRanges, backprop_view, render, sample_view
from .flow import GuidanceConfig, SolverSchedule, guided_velocity, guided_vjp, interpolate, push_backward
from .metrics import RunMetrics
from .nn import adam_init, adam_step
from .rng import Stream

LOSSES = ("vfds", "ucm", "vf_ism")
DEFAULT_GUIDANCE = {"vfds": 100.0, "ucm": 40.0, "vf_ism": 40.0}
RESIDUAL_TIMES = (0.1, 0.3, 0.5, 0.7, 0.9)


class NumericalAbort(FloatingPointError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class VfIsmConfig:
    """Inversion chain of ``steps`` unconditional Euler steps of size ``delta``."""

    delta: float = 0.05
    steps: int = 2
    scale_by_interval: bool = False

    def __post_init__(self):
        if self.delta <= 0 or self.steps < 0:
            raise ValueError("VF-ISM needs delta > 0 and a non-negative step count")
        if self.delta * self.steps >= 1.0:
            raise ValueError("VF-ISM inversion must end before t = 1 (steps * delta < 1)")

    @property
    def s(self) -> float:
        return self.steps * self.delta


@dataclass(frozen=True)
class DistillConfig:
    loss: str = "ucm"
    guidance_scale: float | None = None  # None: per-loss default
    class_id: int = 1
    schedule: SolverSchedule = field(default_factory=lambda: SolverSchedule.uniform("euler", 3))
    inversion_scale: float = 1.0
    t_min: float = 1e-3
    t_max: float = 1.0 - 1e-3
    warmup_steps: int = 0
    total_steps: int = 800
    learning_rate: float = 0.02
    include_jacobian: bool = False
    optimizer: str = "adam"
    seed: int = 0
    vf_ism: VfIsmConfig = field(default_factory=VfIsmConfig)

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps cannot exceed total_steps")
        if self.guidance_scale is not None and not np.isfinite(self.guidance_scale):
            raise ValueError("guidance scale must be finite")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def scale_for(self, loss: str) -> float:
        return DEFAULT_GUIDANCE[loss] if self.guidance_scale is None else float(self.guidance_scale)

    def guidance(self, loss: str | None = None) -> GuidanceConfig:
        return GuidanceConfig(self.scale_for(loss or self.loss), self.class_id)

    @property
    def inversion_guidance(self) -> GuidanceConfig:
        return GuidanceConfig(self.inversion_scale, self.class_id)


@dataclass
class DistillGradient:
    grad_x: np.ndarray
    t: float
    nfe: int
    residual: float = float("nan")  # norm of the bracketed velocity mismatch

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.grad_x))


def sample_t(rng: Stream, cfg: DistillConfig) -> float:
    return float(np.clip(rng.uniform(), cfg.t_min, cfg.t_max))


def _finite(v, what):
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"non-finite {what}")
    return v


def _matching_gradient(net, x, noise, t, guidance):
    """``v(x_t, t) - (noise - x)`` on the straight line from ``x`` to ``noise``."""
    xt = interpolate(x, noise, t)
    v = _finite(guided_velocity(net, xt, t, guidance), "velocity")
    return v - (noise - x), xt


def vfds_gradient(net, x, rng: Stream, cfg: DistillConfig, eps=None, t=None) -> DistillGradient:
    x = np.asarray(x, dtype=np.float64)
    _finite(x, "render")
    drawn = rng.normal(x.shape)
    eps = drawn if eps is None else np.asarray(eps, dtype=np.float64)
    t = sample_t(rng, cfg) if t is None else float(t)
    guidance = cfg.guidance("vfds")
    r, xt = _matching_gradient(net, x, eps, t, guidance)
    g = r
    if cfg.include_jacobian:
        # full chain: r (J_v dx_t/dx + I) with dx_t/dx = (1 - t)
        g = r + (1.0 - t) * guided_vjp(net, xt, t, guidance, r)
    return DistillGradient(g, t, 1, float(np.linalg.norm(r)))


def ucm_gradient(net, x, rng: Stream, cfg: DistillConfig, t=None, e_star=None) -> DistillGradient:
    x = np.asarray(x, dtype=np.float64)
    _finite(x, "render")
    if e_star is None:
        e_star = push_backward(net, x, cfg.schedule, cfg.inversion_guidance)
    t = sample_t(rng, cfg) if t is None else float(t)
    g, _ = _matching_gradient(net, x, e_star, t, cfg.guidance("ucm"))
    return DistillGradient(g, t, cfg.schedule.nfe + 1, float(np.linalg.norm(g)))


def vf_ism_inversion(net, x, vf_cfg: VfIsmConfig):
    """Unconditional Euler chain from ``t = 0`` to ``s``; returns ``(x_s, v(x_s, s, null))``."""
    xs = np.asarray(x, dtype=np.float64)
    for i in range(vf_cfg.steps):
        xs = xs + net_velocity(net, xs, i * vf_cfg.delta, 0) * vf_cfg.delta
    return xs, net_velocity(net, xs, vf_cfg.s, 0)


def net_velocity(net, x, t, class_id):
    v = net.velocity(x, t, class_id) if hasattr(net, "velocity") else net(x, t)
    return _finite(np.asarray(v, dtype=np.float64), "velocity")


def vf_ism_gradient(net, x, rng: Stream, vf_cfg: VfIsmConfig, cfg: DistillConfig, t=None) -> DistillGradient:
    x = np.asarray(x, dtype=np.float64)
    _finite(x, "render")
    s = vf_cfg.s
    if t is None:
        t = s + (1.0 - s) * sample_t(rng, cfg)
    t = float(t)
    if t <= s:
        raise ValueError(f"VF-ISM needs t > s (t={t}, s={s})")
    xs, v_s = vf_ism_inversion(net, x, vf_cfg)
    xt = xs + v_s * (t - s)
    r = _finite(guided_velocity(net, xt, t, cfg.guidance("vf_ism")), "velocity") - v_s
    g = r * (t - s) if vf_cfg.scale_by_interval else r
    return DistillGradient(g, t, vf_cfg.steps + 2, float(np.linalg.norm(r)))


def distill_gradient(loss: str, net, x, rng: Stream, cfg: DistillConfig) -> DistillGradient:
    if loss == "vfds":
        return vfds_gradient(net, x, rng, cfg)
    if loss == "ucm":
        return ucm_gradient(net, x, rng, cfg)
    return vf_ism_gradient(net, x, rng, cfg.vf_ism, cfg)


def coupled_residual(net, x, cfg: DistillConfig) -> float:
    """Mean ``|v(x_t, t) - (#[x] - x)|`` over fixed times along the coupled line.

    Zero exactly when ``x`` lies on a straight trajectory of the (inversion-
    guided) field; used as a loss-agnostic convergence measure.
    """
    guidance = cfg.inversion_guidance
    e_star = push_backward(net, x, cfg.schedule, guidance)
    total = 0.0
    for t in RESIDUAL_TIMES:
        g, _ = _matching_gradient(net, x, e_star, t, guidance)
        total += float(np.linalg.norm(g))
    return total / len(RESIDUAL_TIMES)


def mean_pairwise_cosine(grads) -> float:
    g = np.asarray(grads, dtype=np.float64)
    if len(g) < 2:
        raise ValueError("need at least two gradients")
    norms = np.linalg.norm(g, axis=1)
    zero = norms == 0
    unit = np.where(zero[:, None], 0.0, g / np.where(zero, 1.0, norms)[:, None])
    sim = unit @ unit.T
    sim[np.ix_(zero, zero)] = 1.0
    iu = np.triu_indices(len(g), k=1)
    return float(np.clip(sim[iu].mean(), -1.0, 1.0))


def gradient_coherence(net, x, cfg: DistillConfig, trials: int, loss: str | None = None) -> float:
    """Mean pairwise cosine similarity of ``grad_x`` over independent draws.

    Trial ``i`` uses its own stream ``(cfg.seed, 0xC0DE + i)`` so the result
    does not depend on evaluation order.
    """
    if trials < 2:
        raise ValueError("trials must be >= 2")
    loss = loss or cfg.loss
    x = np.asarray(x, dtype=np.float64)
    e_star = push_backward(net, x, cfg.schedule, cfg.inversion_guidance) if loss == "ucm" else None
    grads = []
    for i in range(trials):
        rng = Stream(cfg.seed, 0xC0DE + i)
        if loss == "ucm":
            grads.append(ucm_gradient(net, x, rng, cfg, e_star=e_star).grad_x)
        else:
            grads.append(distill_gradient(loss, net, x, rng, cfg).grad_x)
    return mean_pairwise_cosine(grads)


def distill_run(
    asset,
    net,
    view_ranges: ViewRanges,
    cfg: DistillConfig,
    coherence_every: int = 0,
    coherence_trials: int = 8,
    target_distance=None,
):
    """Optimise ``asset`` against the frozen field.  Returns ``(asset, RunMetrics)``.

    Step ``k`` (1-based) uses VFDS while ``k <= cfg.warmup_steps`` and
    ``cfg.loss`` afterwards.  ``target_distance(asset)``, when given, is
    recorded per step in the ``target`` column.
    """
    if asset.output_dim != _field_dim(net, asset.output_dim):
        raise ValueError("asset render dimension does not match the prior")
    views = Stream(cfg.seed, 1)
    noise = Stream(cfg.seed, 2)
    metrics = RunMetrics()
    params = asset.params.copy()
    opt = adam_init(params, learning_rate=cfg.learning_rate)
    for k in range(1, cfg.total_steps + 1):
        t0 = time.perf_counter()
        loss = "vfds" if k <= cfg.warmup_steps else cfg.loss
        view = sample_view(views, view_ranges)
        x = render(asset, view)
        try:
            grad = distill_gradient(loss, net, x, noise, cfg)
        except FloatingPointError as exc:
            raise NumericalAbort(k, str(exc)) from exc
        pgrad = backprop_view(asset, view, grad.grad_x)
        if not np.all(np.isfinite(pgrad)):
            raise NumericalAbort(k, "non-finite parameter gradient")
        if cfg.optimizer == "sgd":
            params = params - cfg.learning_rate * pgrad
        else:
            params, opt = adam_step(opt, params, pgrad)
        if not np.all(np.isfinite(params)):
            raise NumericalAbort(k, "non-finite asset parameters")
        asset = asset.with_params(params)
        coherence = None
        if coherence_every and k % coherence_every == 0:
            coherence = gradient_coherence(net, render(asset, view), replace(cfg, seed=cfg.seed + k), coherence_trials, loss)
        metrics.add_row(
            step=k,
            loss=loss,
            residual=grad.residual,
            grad_norm=grad.norm,
            coherence=coherence,
            nfe=grad.nfe,
            target=None if target_distance is None else float(target_distance(asset)),
            wall_ms=1000.0 * (time.perf_counter() - t0),
        )
    metrics.summary["param_norm"] = float(np.linalg.norm(asset.params))
    metrics.summary["final_residual"] = coupled_residual(net, render(asset, IDENTITY_VIEW), cfg)
    return asset, metrics


def _field_dim(net, fallback: int) -> int:
    spec = getattr(net, "spec", None)
    if spec is not None:
        return spec.input_dim
    return getattr(net, "dim", fallback)
