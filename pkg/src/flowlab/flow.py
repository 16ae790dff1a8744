"""Rectified-flow mathematics: interpolation, prior training, guidance and ODE solvers.

Conventions
-----------
``x_t = t * eps + (1 - t) * x0`` with data at ``t = 0`` and noise at ``t = 1``.
Velocities point from data toward noise (the regression target is
``eps - x0``), so inversion ("push-backward") integrates ``t: 0 -> 1`` with
``+v`` and generation integrates ``t: 1 -> 0`` with negative steps.

A *field* is any object with ``velocity(x, t, class_id)``; class 0 is the
unconditional (null) slot.  Plain callables ``f(x, t)`` are accepted as
unconditional fields.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import AdamState, NetworkParams, adam_step, backward_params, forward
from .rng import Stream

METHODS = ("euler", "midpoint", "rk4")
EVALS_PER_STEP = {"euler": 1, "midpoint": 2, "rk4": 4}
_RK4_WEIGHTS = (1 / 6, 2 / 6, 2 / 6, 1 / 6)


def interpolate(x0, eps, t):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"dimension mismatch: {x0.shape} vs {eps.shape}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return t * eps + (1.0 - t) * x0


# ---------------------------------------------------------------- guidance


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 1.0
    class_id: int = 1

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ValueError("guidance scale must be finite and non-negative")


def _raw_velocity(field, x, t, class_id):
    if hasattr(field, "velocity"):
        return field.velocity(x, t, class_id)
    return field(x, t)


def guided_velocity(field, x, t, guidance: GuidanceConfig):
    """Classifier-free guidance ``v_u + s (v_c - v_u)``.

    Written as ``(1 - s) v_u + s v_c`` so that ``s = 0`` and ``s = 1`` reproduce
    the unconditional and conditional velocities bit-for-bit.
    """
    if guidance.class_id < 1:
        raise ValueError("guidance needs a conditional class id >= 1 (0 is the null class)")
    s = guidance.scale
    if s == 1.0:
        return np.asarray(_raw_velocity(field, x, t, guidance.class_id), dtype=np.float64)
    v_u = np.asarray(_raw_velocity(field, x, t, 0), dtype=np.float64)
    if s == 0.0:
        return v_u
    v_c = np.asarray(_raw_velocity(field, x, t, guidance.class_id), dtype=np.float64)
    return (1.0 - s) * v_u + s * v_c


def guided_vjp(field, x, t, guidance: GuidanceConfig, upstream):
    """``upstream^T d(guided_velocity)/dx`` for fields exposing ``vjp_x``."""
    s = guidance.scale
    out = s * field.vjp_x(x, t, guidance.class_id, upstream)
    if s != 1.0:
        out = out + (1.0 - s) * field.vjp_x(x, t, 0, upstream)
    return out


def field_fn(field, guidance: GuidanceConfig | None = None) -> Callable:
    """Reduce a field (plus optional guidance) to ``f(x, t) -> velocity``."""
    if guidance is None:
        return lambda x, t: np.asarray(_raw_velocity(field, x, t, 0), dtype=np.float64)
    return lambda x, t: guided_velocity(field, x, t, guidance)


# ---------------------------------------------------------------- solvers


@dataclass(frozen=True)
class SolverSchedule:
    """Integrator plus a partition ``deltas`` of [0, 1]."""

    method: str
    deltas: tuple[float, ...]

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown solver {self.method!r}; expected one of {METHODS}")
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        if not self.deltas:
            raise ValueError("schedule needs at least one step")
        if any(not d > 0 for d in self.deltas):
            raise ValueError("schedule steps must be positive")
        if abs(sum(self.deltas) - 1.0) > 1e-12:
            raise ValueError(f"schedule steps sum to {sum(self.deltas)!r}, not 1")

    @classmethod
    def uniform(cls, method: str = "euler", n: int = 1) -> "SolverSchedule":
        if n < 1:
            raise ValueError("n must be positive")
        return cls(method, (1.0 / n,) * n)

    @property
    def n(self) -> int:
        return len(self.deltas)

    @property
    def nfe(self) -> int:
        return self.n * EVALS_PER_STEP[self.method]

    @property
    def knots(self) -> np.ndarray:
        """Left endpoints ``delta_{T_0} = 0, ..., delta_{T_{n-1}}`` followed by 1."""
        k = np.concatenate([[0.0], np.cumsum(self.deltas)])
        k[-1] = 1.0
        return k


def _checked(v):
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise FloatingPointError("non-finite field output")
    return v


def solver_step(method: str, f: Callable, x, t: float, dt: float):
    """Advance ``x`` from ``t`` to ``t + dt``; ``dt`` may be negative."""
    if dt == 0:
        raise ValueError("dt must be non-zero")
    x = np.asarray(x, dtype=np.float64)
    if method == "euler":
        return x + dt * _checked(f(x, t))
    if method == "midpoint":
        k1 = _checked(f(x, t))
        return x + dt * _checked(f(x + 0.5 * dt * k1, t + 0.5 * dt))
    if method == "rk4":
        k1 = _checked(f(x, t))
        k2 = _checked(f(x + 0.5 * dt * k1, t + 0.5 * dt))
        k3 = _checked(f(x + 0.5 * dt * k2, t + 0.5 * dt))
        k4 = _checked(f(x + dt * k3, t + dt))
        w1, w2, w3, w4 = _RK4_WEIGHTS
        return x + dt * (w1 * k1 + w2 * k2 + w3 * k3 + w4 * k4)
    raise ValueError(f"unknown solver {method!r}")


def push_backward(field, x, schedule: SolverSchedule, guidance: GuidanceConfig | None = None):
    """Map data ``x`` to its coupled noise by integrating ``t: 0 -> 1``."""
    f = field_fn(field, guidance)
    knots = schedule.knots
    x = np.asarray(x, dtype=np.float64)
    for i, dt in enumerate(schedule.deltas):
        x = solver_step(schedule.method, f, x, knots[i], dt)
    return x


def generate(field, eps, schedule: SolverSchedule, guidance: GuidanceConfig | None = None):
    """Map noise ``eps`` to data by integrating ``t: 1 -> 0`` over the reversed schedule."""
    f = field_fn(field, guidance)
    knots = schedule.knots
    x = np.asarray(eps, dtype=np.float64)
    for i in range(schedule.n - 1, -1, -1):
        x = solver_step(schedule.method, f, x, knots[i + 1], -schedule.deltas[i])
    return x


# ---------------------------------------------------------------- oracle fields


class GaussianMixtureOracle:
    """Exact marginal velocity when the data are a mixture of diagonal Gaussians.

    Component ``j`` has mean ``means[j]``, per-axis variance ``variances[j]``,
    mixing weight ``weights[j]`` and class label ``class_ids[j]``.  Class 0
    conditions on nothing; class ``k`` restricts to the components labelled
    ``k``.  With a single component every class sees the same field.
    """

    def __init__(self, means, variances, weights=None, class_ids=None):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.variances = np.broadcast_to(
            np.atleast_2d(np.asarray(variances, dtype=np.float64)), self.means.shape
        ).copy()
        k = self.means.shape[0]
        self.weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
        self.weights = self.weights / self.weights.sum()
        self.class_ids = np.arange(1, k + 1) if class_ids is None else np.asarray(class_ids)
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _components(self, class_id):
        if class_id == 0 or self.means.shape[0] == 1:
            return np.arange(self.means.shape[0])
        idx = np.flatnonzero(self.class_ids == class_id)
        if idx.size == 0:
            raise ValueError(f"oracle has no component for class {class_id}")
        return idx

    def _parts(self, x, t, class_id):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = float(t)
        idx = self._components(int(class_id))
        mu = self.means[idx]  # (K, d)
        s2 = self.variances[idx]
        var = t * t + (1.0 - t) ** 2 * s2  # marginal variance of x_t
        gain = (t - (1.0 - t) * s2) / var  # Cov(eps - x0, x_t) / Var(x_t)
        centred = x[:, None, :] - (1.0 - t) * mu[None]  # (B, K, d)
        v_j = -mu[None] + gain[None] * centred
        logp = np.log(self.weights[idx])[None] - 0.5 * np.sum(centred**2 / var + np.log(var), axis=2)
        logp -= logp.max(axis=1, keepdims=True)
        r = np.exp(logp)
        r /= r.sum(axis=1, keepdims=True)
        return x, r, v_j, gain, -centred / var

    def velocity(self, x, t, class_id=0):
        single = np.ndim(x) == 1
        _, r, v_j, _, _ = self._parts(x, t, class_id)
        v = np.einsum("bk,bkd->bd", r, v_j)
        return v[0] if single else v

    def vjp_x(self, x, t, class_id, upstream):
        single = np.ndim(x) == 1
        _, r, v_j, gain, score_j = self._parts(x, t, class_id)
        u = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        out = np.einsum("bk,kd,bd->bd", r, gain, u)
        uv = np.einsum("bd,bkd->bk", u, v_j)
        mean_score = np.einsum("bk,bkd->bd", r, score_j)
        out += np.einsum("bk,bkd->bd", r * uv, score_j - mean_score[:, None, :])
        return out[0] if single else out

    def sample(self, n: int, rng: Stream):
        """Draw ``(x0, class_ids)`` from the data distribution."""
        cdf = np.cumsum(self.weights)
        comp = np.minimum(np.searchsorted(cdf, rng.uniform(n), side="right"), len(cdf) - 1)
        z = rng.normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp]) * z, self.class_ids[comp]


class GaussianFlowOracle(GaussianMixtureOracle):
    """Data distribution ``N(mean, diag(variance))``, noise ``N(0, I)``."""

    def __init__(self, mean, variance):
        super().__init__([mean], [variance])

    @property
    def mean(self):
        return self.means[0]

    @property
    def variance(self):
        return self.variances[0]


def analytic_gaussian_velocity(oracle: GaussianMixtureOracle, x, t, class_id=0):
    """``E[eps - x0 | x_t = x]`` in closed form."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    return oracle.velocity(x, t, class_id)


def conditional_variance_floor(oracle: GaussianMixtureOracle, n: int, seed: int, p_null: float = 0.1):
    """Monte Carlo estimate of the least achievable prior-training loss.

    The loss of a perfect field is ``E||(eps - x0) - E[eps - x0 | x_t, t, c]||^2``
    where the conditioning class is dropped to the null class with
    probability ``p_null``.  Returns ``(mean, standard error)``.
    """
    rng = Stream(seed, stream_id=0xF100)
    x0, cls = oracle.sample(n, rng)
    eps = rng.normal((n, oracle.dim))
    t = rng.uniform(n)
    cls = np.where(rng.uniform(n) < p_null, 0, cls)
    xt = interpolate(x0, eps, t)
    target = eps - x0
    res = np.empty(n)
    for i in range(n):
        res[i] = np.sum((target[i] - oracle.velocity(xt[i], t[i], cls[i])) ** 2)
    return float(res.mean()), float(res.std(ddof=1) / np.sqrt(n))


# ---------------------------------------------------------------- prior training


def prior_training_step(
    params: NetworkParams,
    x0,
    class_ids,
    rng: Stream,
    opt_state: AdamState,
    p_null: float = 0.1,
    eps=None,
    t=None,
):
    """One Adam step on the rectified-flow regression loss with ``w(t) = 1``.

    Draw order from ``rng``: noise ``(B, d)``, times ``(B,)``, null-class
    dropout uniforms ``(B,)``.  ``eps`` / ``t`` override the draws (tests).
    Returns ``(pre-step mean loss, new params, new optimizer state)``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    b, d = x0.shape
    if d != params.spec.input_dim:
        raise ValueError(f"dimension mismatch: batch has dim {d}, network expects {params.spec.input_dim}")
    drawn_eps = rng.normal((b, d))
    drawn_t = rng.uniform(b)
    drop = rng.uniform(b) < p_null
    eps = drawn_eps if eps is None else np.broadcast_to(np.asarray(eps, dtype=np.float64), (b, d))
    t = drawn_t if t is None else np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    cls = np.where(drop, 0, np.broadcast_to(np.asarray(class_ids), (b,)))

    xt = interpolate(x0, eps, t)
    resid = (eps - x0) - forward(params, xt, t, cls)
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite prior loss (step {opt_state.step + 1})")
    grads = backward_params(params, xt, t, cls, -2.0 * resid / b)
    params, opt_state = adam_step(opt_state, params, grads)
    return loss, params, opt_state


def train_prior(params: NetworkParams, x, class_ids, steps: int, batch: int, opt_state: AdamState, seed: int):
    """Minibatch training loop; returns ``(params, opt_state, per-step losses)``."""
    rng = Stream(seed, stream_id=0x7072)
    x = np.asarray(x, dtype=np.float64)
    class_ids = np.asarray(class_ids)
    losses = []
    for _ in range(steps):
        idx = rng.integers(len(x), batch)
        loss, params, opt_state = prior_training_step(params, x[idx], class_ids[idx], rng, opt_state)
        losses.append(loss)
    return params, opt_state, losses
