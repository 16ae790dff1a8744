"""Built-in oracle suites: finite differences, solver exactness, round-trip decay
and the forced-coupling identity.  Each suite is a list of named checks."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import flow
from .assets import SplatAsset, ViewPose, backprop_view, render
from .distill import DistillConfig, ucm_gradient, vfds_gradient
from .flow import GaussianMixtureOracle, SolverSchedule, generate, push_backward, solver_step
from .nn import NetworkSpec, backward_input, backward_params, forward, init_network
from .rng import Stream

FD_STEP = 1e-6
FD_TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    passed: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.passed + len(self.failures)

    @property
    def ok(self) -> bool:
        return not self.failures

    def check(self, label: str, ok: bool, detail: str = "") -> None:
        if ok:
            self.passed += 1
        else:
            self.failures.append(f"{label}{': ' + detail if detail else ''}")


def _rel(a, b) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def _directional_fd(f, p, d, h=FD_STEP):
    return (f(p + h * d) - f(p - h * d)) / (2 * h)


def fd_network_suite(probes: int = 40, seed: int = 11) -> SuiteResult:
    """Directional derivatives of ``<u, forward>`` wrt parameters and input."""
    res = SuiteResult("fd_network")
    rng = Stream(seed, 1)
    for i in range(probes):
        act = ("tanh", "silu")[i % 2]
        spec = NetworkSpec(3, (7, 5), 3, 2, act)
        net = init_network(spec, seed + i)
        x = rng.normal(3)
        t = float(rng.uniform())
        c = int(rng.integers(3))
        u = rng.normal(3)
        # parameters
        leaves = [a for _, a in net.leaves()]
        dirs = [rng.normal(a.shape) for a in leaves]
        grads = [a for _, a in backward_params(net, x, t, c, u).leaves()]
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))

        def f_params(scale):
            moved = net.with_leaves([a + scale * d for a, d in zip(leaves, dirs)])
            return float(u @ forward(moved, x, t, c))

        numeric = (f_params(FD_STEP) - f_params(-FD_STEP)) / (2 * FD_STEP)
        err = _rel(analytic, numeric)
        res.check(f"params[{i}]", err < FD_TOL, f"rel err {err:.2e}")
        # input
        d = rng.normal(3)
        analytic = float(backward_input(net, x, t, c, u) @ d)
        numeric = _directional_fd(lambda y: float(u @ forward(net, y, t, c)), x, d)
        err = _rel(analytic, numeric)
        res.check(f"input[{i}]", err < FD_TOL, f"rel err {err:.2e}")
    return res


def random_splat(rng: Stream, k: int = 3, width: int = 8) -> SplatAsset:
    s = np.empty((k, 6))
    s[:, 0:2] = rng.uniform((k, 2), low=0.3, high=0.7)
    s[:, 2:4] = np.log(0.15) + 0.3 * rng.normal((k, 2))
    s[:, 4] = rng.uniform(k, low=-np.pi, high=np.pi)
    s[:, 5] = rng.normal(k)
    return SplatAsset(s, float(0.2 * rng.normal()), width)


def random_view(rng: Stream) -> ViewPose:
    u = rng.uniform(3, low=-1.0, high=1.0)
    return ViewPose(np.pi / 8 * u[0], 0.05 * u[1], 0.05 * u[2])


def fd_splat_suite(probes: int = 30, seed: int = 12) -> SuiteResult:
    res = SuiteResult("fd_splat")
    rng = Stream(seed, 1)
    for i in range(probes):
        asset = random_splat(rng)
        view = random_view(rng)
        u = rng.normal(asset.output_dim)
        d = rng.normal(asset.params.size)
        analytic = float(backprop_view(asset, view, u) @ d)
        numeric = _directional_fd(lambda p: float(u @ render(asset.with_params(p), view)), asset.params, d)
        err = _rel(analytic, numeric)
        res.check(f"splat[{i}]", err < FD_TOL, f"rel err {err:.2e}")
    return res


def solver_suite() -> SuiteResult:
    """Constant-field exactness plus one-step Taylor values on ``dx/dt = x``."""
    res = SuiteResult("solvers")
    c = np.array([0.3, -1.25, 2.0])
    x = np.array([1.0, 2.0, -0.5])

    def const(y, t):
        return np.broadcast_to(c, np.shape(y)).copy()

    for method in flow.METHODS:
        for n in (1, 3, 7):
            sched = SolverSchedule.uniform(method, n)
            out = push_backward(const, x, sched)
            res.check(f"{method} constant n={n}", np.max(np.abs(out - (x + c))) <= 1e-12)
            back = generate(const, out, sched)
            res.check(f"{method} constant reverse n={n}", np.max(np.abs(back - x)) <= 1e-12)
    expected = {"euler": 2.0, "midpoint": 2.5, "rk4": 1.0 + 1.0 + 0.5 + 1.0 / 6.0 + 1.0 / 24.0}
    for method, want in expected.items():
        got = float(solver_step(method, lambda y, t: y, np.array([1.0]), 0.0, 1.0)[0])
        res.check(f"{method} exp step", abs(got - want) <= 1e-12, f"got {got!r}, want {want!r}")
    # rk4 is exact for a field quadratic in t
    got = float(solver_step("rk4", lambda y, t: np.array([3 * t * t]), np.array([0.0]), 0.0, 1.0)[0])
    res.check("rk4 quadratic quadrature", abs(got - 1.0) <= 1e-12, f"got {got!r}")
    return res


def _curved_oracle():
    return GaussianMixtureOracle([[1.5, -0.5], [-1.0, 1.0]], [[0.09, 0.09], [0.04, 0.04]])


def round_trip_suite(seed: int = 13) -> SuiteResult:
    res = SuiteResult("round_trip")
    oracle = _curved_oracle()
    x, _ = oracle.sample(64, Stream(seed, 1))
    errs = []
    for n in (4, 16, 64, 256):
        sched = SolverSchedule.uniform("euler", n)
        recon = generate(oracle, push_backward(oracle, x, sched), sched)
        errs.append(float(np.mean(np.linalg.norm(recon - x, axis=1) / np.linalg.norm(x, axis=1))))
    for i in range(3):
        res.check(f"decrease {i}", errs[i + 1] < errs[i], f"{errs[i + 1]:.3e} !< {errs[i]:.3e}")
    res.check("n=256 below 5%", errs[-1] < 0.05, f"{errs[-1]:.3e}")
    return res


def coupling_suite(probes: int = 10, seed: int = 14) -> SuiteResult:
    res = SuiteResult("forced_coupling")
    oracle = _curved_oracle()
    rng = Stream(seed, 1)
    for i in range(probes):
        method = flow.METHODS[i % 3]
        cfg = DistillConfig(loss="ucm", guidance_scale=3.0, schedule=SolverSchedule.uniform(method, 1 + i % 4))
        x = rng.normal(2)
        t = float(rng.uniform(low=0.01, high=0.99))
        e_star = push_backward(oracle, x, cfg.schedule, cfg.inversion_guidance)
        gv = vfds_gradient(oracle, x, Stream(0), cfg, eps=e_star, t=t).grad_x
        gu = ucm_gradient(oracle, x, Stream(0), cfg, t=t).grad_x
        diff = float(np.max(np.abs(gv - gu)))
        res.check(f"probe[{i}] {method}", diff <= 1e-12, f"max diff {diff:.2e}")
    return res


SUITES = (fd_network_suite, fd_splat_suite, solver_suite, round_trip_suite, coupling_suite)


def run_all() -> list[SuiteResult]:
    return [suite() for suite in SUITES]


@contextmanager
def perturbed_rk4():
    """Corrupt the rk4 weights for the duration of the block (test hook)."""
    saved = flow._RK4_WEIGHTS
    flow._RK4_WEIGHTS = (1 / 6, 2 / 6, 2 / 6, 1.01 / 6)
    try:
        yield
    finally:
        flow._RK4_WEIGHTS = saved
