"""Acceptance criteria 1-12.  Each test records one PASS/FAIL line."""

from __future__ import annotations

import time

import numpy as np

from flowlab import experiments as ex
from flowlab import flow, selfcheck
from flowlab.assets import LatentAsset, PriorMeta, ViewRanges, init_asset
from flowlab.cli import main
from flowlab.config import format_config
from flowlab.datasets import energy_distance, generate_dataset
from flowlab.distill import DistillConfig, distill_run, gradient_coherence, ucm_gradient, vf_ism_gradient, vfds_gradient
from flowlab.flow import (
    GaussianFlowOracle,
    GaussianMixtureOracle,
    SolverSchedule,
    conditional_variance_floor,
    generate,
    interpolate,
    push_backward,
)
from flowlab.metrics import strip_timing
from flowlab.nn import checkpoint_bytes, forward
from flowlab.rng import Stream

from test_distill import vf_ism_oracle

SEEDS = range(8)
CENTERS = np.array([[-2.0, 0.0], [2.0, 0.0]])


def _mode_distance(asset):
    return float(np.min(np.linalg.norm(CENTERS - asset.theta, axis=1)))


def _midpoint_start(seed):
    return LatentAsset(0.01 * Stream(seed, 9).normal(2))


def _round_trip(field, x, method, n):
    sched = SolverSchedule.uniform(method, n)
    recon = generate(field, push_backward(field, x, sched), sched)
    return np.linalg.norm(recon - x, axis=1)


# 1 -------------------------------------------------------------------------


def test_criterion_01_gradient_oracles(criterion):
    t0 = time.perf_counter()
    suites = [selfcheck.fd_network_suite(), selfcheck.fd_splat_suite()]
    elapsed = time.perf_counter() - t0
    probes = sum(s.total for s in suites)
    failures = [f for s in suites for f in s.failures]
    ok = probes >= 100 and not failures and elapsed < 60
    criterion(1, ok, f"{probes} finite-difference probes, {len(failures)} above 1e-4, {elapsed:.1f} s")


# 2 -------------------------------------------------------------------------


def test_criterion_02_endpoint_and_single_step_identities(criterion, constant_field, gauss2_net):
    rng = Stream(2, 1)
    checks = []
    for _ in range(50):
        x0, eps = rng.normal(5), rng.normal(5)
        checks.append(np.array_equal(interpolate(x0, eps, 0.0), x0))
        checks.append(np.array_equal(interpolate(x0, eps, 1.0), eps))
        c = rng.normal(5)
        field = constant_field(c)
        # euler and midpoint add dt * c exactly; rk4 sums four weighted stages (criterion 4 covers it)
        for method in ("euler", "midpoint"):
            one = SolverSchedule.uniform(method, 1)
            checks.append(np.array_equal(push_backward(field, x0, one), x0 + c))
    # one euler step of the trained field is x + v(x, 0)
    x = rng.normal((16, 2))
    checks.append(np.array_equal(push_backward(gauss2_net, x, SolverSchedule.uniform("euler", 1)), x + forward(gauss2_net, x, 0.0, 0)))
    criterion(2, all(checks), f"{sum(checks)}/{len(checks)} identities bit-exact")


# 3 -------------------------------------------------------------------------


def test_criterion_03_reversibility(criterion):
    oracle = GaussianFlowOracle([1.0, -2.0], [0.2, 0.5])
    x, _ = oracle.sample(256, Stream(3))
    scale = np.linalg.norm(x, axis=1)
    errs = [float(np.mean(_round_trip(oracle, x, "euler", n) / scale)) for n in (4, 16, 64, 256)]
    ok = all(b < a for a, b in zip(errs, errs[1:])) and errs[-1] < 0.05
    criterion(3, ok, "relative round-trip error " + ", ".join(f"n={n}: {e:.2e}" for n, e in zip((4, 16, 64, 256), errs)))


# 4 -------------------------------------------------------------------------


def test_criterion_04_solver_ordering(criterion, constant_field):
    oracle = GaussianMixtureOracle([[1.5, -0.5], [-1.0, 1.0]], [[0.09, 0.09], [0.04, 0.04]])
    x, _ = oracle.sample(200, Stream(4))
    ok, parts = True, []
    for budget in (12, 24, 48):
        e = {m: float(np.mean(_round_trip(oracle, x, m, budget // flow.EVALS_PER_STEP[m]))) for m in flow.METHODS}
        ok &= e["rk4"] <= e["midpoint"] <= e["euler"]
        parts.append(f"{budget} evals: rk4 {e['rk4']:.1e} <= mid {e['midpoint']:.1e} <= euler {e['euler']:.1e}")
    field = constant_field([0.7, -1.1])
    outs = [push_backward(field, x, SolverSchedule.uniform(m, 12 // flow.EVALS_PER_STEP[m])) for m in flow.METHODS]
    spread = max(float(np.max(np.abs(o - outs[0]))) for o in outs)
    ok &= spread <= 1e-12
    criterion(4, ok, "; ".join(parts) + f"; constant-field spread {spread:.1e}")


# 5 -------------------------------------------------------------------------


def test_criterion_05_trained_prior_quality(criterion, gauss2_cfg, gauss2_prior):
    t0 = time.perf_counter()
    net, losses = ex.train_prior_from_config(gauss2_cfg)
    elapsed = time.perf_counter() - t0
    assert checkpoint_bytes(net) == checkpoint_bytes(gauss2_prior[0])
    eps = Stream(5, 1).normal((10_000, 2))
    samples = generate(net, eps, SolverSchedule.uniform("rk4", 16))
    fresh = generate_dataset(gauss2_cfg.override("dataset", seed=1).dataset_spec()).x
    ed = energy_distance(samples, fresh)
    floor, _ = conditional_variance_floor(GaussianMixtureOracle(CENTERS, [[0.09, 0.09]] * 2), 20_000, seed=1)
    final = float(np.mean(losses[-100:]))
    gap = abs(final - floor) / floor
    ok = ed < 0.05 and gap <= 0.2 and elapsed < 180
    criterion(5, ok, f"energy distance {ed:.4f}; loss {final:.4f} vs floor {floor:.4f} ({100 * gap:.1f}% off); trained in {elapsed:.1f} s")


# 6 -------------------------------------------------------------------------


def test_criterion_06_over_smoothing(criterion, gauss2_net):
    wins, coh_u, coh_v = 0, [], []
    for seed in SEEDS:
        finals = {}
        for loss in ("ucm", "vfds"):
            cfg = DistillConfig(loss=loss, guidance_scale=0.0, inversion_scale=0.0, learning_rate=0.02, total_steps=800, seed=seed)
            asset, _ = distill_run(_midpoint_start(seed), gauss2_net, ViewRanges(0.0, 0.0), cfg)
            finals[loss] = _mode_distance(asset)
        wins += finals["ucm"] < finals["vfds"]
        cfg = DistillConfig(guidance_scale=0.0, inversion_scale=0.0, seed=seed)
        coh_u.append(gradient_coherence(gauss2_net, np.zeros(2), cfg, 16, "ucm"))
        coh_v.append(gradient_coherence(gauss2_net, np.zeros(2), cfg, 16, "vfds"))
    gap = float(np.mean(coh_u) - np.mean(coh_v))
    ok = wins >= 7 and gap >= 0.05
    criterion(6, ok, f"ucm closer to a mode in {wins}/8 seeds; coherence ucm {np.mean(coh_u):.3f} vs vfds {np.mean(coh_v):.3f} (gap {gap:.3f})")


# 7 -------------------------------------------------------------------------

RESIDUAL_THRESHOLD = 0.2
RESIDUAL_WINDOW = 25


def _steps_to_threshold(residuals, total, threshold=RESIDUAL_THRESHOLD):
    run = np.convolve(residuals, np.ones(RESIDUAL_WINDOW) / RESIDUAL_WINDOW, "valid")
    hit = np.flatnonzero(run < threshold)
    return int(hit[0]) + RESIDUAL_WINDOW if hit.size else total  # censored at the step budget


def test_criterion_07_faster_convergence(criterion, gauss2_net):
    steps = {"ucm": [], "vfds": []}
    loose = {"ucm": [], "vfds": []}
    for seed in SEEDS:
        for loss in steps:
            cfg = DistillConfig(loss=loss, guidance_scale=1.0, class_id=1, learning_rate=0.02, total_steps=800, seed=seed)
            _, m = distill_run(_midpoint_start(seed), gauss2_net, ViewRanges(0.0, 0.0), cfg)
            r = np.array(m.column("residual"))
            steps[loss].append(_steps_to_threshold(r, cfg.total_steps))
            loose[loss].append(_steps_to_threshold(r, cfg.total_steps, 0.3))
    u, v = float(np.median(steps["ucm"])), float(np.median(steps["vfds"]))
    ratio_loose = float(np.median(loose["ucm"]) / np.median(loose["vfds"]))
    ok = u <= 0.5 * v
    criterion(
        7,
        ok,
        f"median steps to residual < {RESIDUAL_THRESHOLD}: ucm {u:.0f}, vfds {v:.0f} (800 = never); "
        f"ratio at threshold 0.3 would be {ratio_loose:.2f}",
    )


# 8 -------------------------------------------------------------------------


def test_criterion_08_warmup(criterion, shapes_data, shapes_net):
    meta = PriorMeta(shapes_data.dim, shapes_data.x.mean(axis=0), float(shapes_data.x.mean()), 16)
    steps = 300
    finals = {0: [], int(0.15 * steps): []}
    for seed in SEEDS:
        for warm in finals:
            start = init_asset("splat", "out_of_distribution", seed, meta)
            cfg = DistillConfig(class_id=1 + seed % 4, total_steps=steps, warmup_steps=warm, learning_rate=0.02, seed=seed)
            _, m = distill_run(start, shapes_net, ViewRanges(), cfg)
            finals[warm].append(m.summary["final_residual"])
    cold, warm = (float(np.median(v)) for v in finals.values())
    criterion(8, warm < cold, f"median final residual with 45-step warm-up {warm:.3f} vs none {cold:.3f}")


# 9 -------------------------------------------------------------------------


def test_criterion_09_forced_coupling(criterion, gauss2_net):
    rng = Stream(9, 1)
    worst = 0.0
    for k in range(30):
        method = flow.METHODS[k % 3]
        cfg = DistillConfig(loss="ucm", guidance_scale=float(rng.uniform(high=100.0)), schedule=SolverSchedule.uniform(method, 1 + k % 5))
        x = 2.0 * rng.normal(2)
        t = float(rng.uniform(low=0.01, high=0.99))
        eps = push_backward(gauss2_net, x, cfg.schedule, cfg.inversion_guidance)
        gu = ucm_gradient(gauss2_net, x, Stream(k), cfg, t=t).grad_x
        gv = vfds_gradient(gauss2_net, x, Stream(k), DistillConfig(loss="vfds", guidance_scale=cfg.guidance_scale), eps=eps, t=t).grad_x
        worst = max(worst, float(np.max(np.abs(gu - gv))))
    criterion(9, worst <= 1e-12, f"max |vfds - ucm| on coupled pairs {worst:.1e} over 30 probes")


# 10 ------------------------------------------------------------------------


def test_criterion_10_vf_ism_oracle(criterion, gauss2_net):
    from flowlab.distill import VfIsmConfig

    rng = Stream(10, 1)
    worst = 0.0
    for k in range(50):
        m = int(rng.integers(5))
        delta = float(rng.uniform(low=0.01, high=0.15))
        vf = VfIsmConfig(delta, m, bool(k % 2))
        cfg = DistillConfig(loss="vf_ism", guidance_scale=float(rng.uniform(high=50.0)), class_id=1 + k % 2, vf_ism=vf)
        x = rng.normal(2)
        t = vf.s + (1 - vf.s) * float(rng.uniform(low=0.01, high=0.99))
        got = vf_ism_gradient(gauss2_net, x, Stream(k), vf, cfg, t=t).grad_x
        want = vf_ism_oracle(gauss2_net, x, delta, m, t, cfg.scale_for("vf_ism"), cfg.class_id, vf.scale_by_interval)
        worst = max(worst, float(np.max(np.abs(got - want))))
    criterion(10, worst <= 1e-10, f"max deviation from the term-by-term recurrence {worst:.1e} over 50 probes")


# 11 ------------------------------------------------------------------------


def test_criterion_11_jacobian_blow_up(criterion, shapes_data, shapes_net):
    meta = PriorMeta(shapes_data.dim, shapes_data.x.mean(axis=0), float(shapes_data.x.mean()), 16)
    ratios = []
    for seed in range(3):
        norms = []
        for jac in (False, True):
            start = init_asset("splat", "in_distribution", seed, meta)
            cfg = DistillConfig(loss="vfds", class_id=1 + seed % 4, total_steps=500, learning_rate=1e-3, optimizer="sgd", include_jacobian=jac, seed=seed)
            asset, m = distill_run(start, shapes_net, ViewRanges(), cfg)
            norms.append(m.summary["param_norm"])
        ratios.append(norms[1] / norms[0])
    ok = min(ratios) >= 10
    criterion(11, ok, "param-norm ratio jacobian/default after 500 steps: " + ", ".join(f"{r:.1f}x" for r in ratios))


# 12 ------------------------------------------------------------------------


def test_criterion_12_determinism(criterion, tmp_path, gauss2_cfg):
    cfg = tmp_path / "g.cfg"
    cfg.write_text(format_config(gauss2_cfg.override("prior", steps=200).override("distill", steps=100)))
    (tmp_path / "in.txt").write_text("-2 0.1\n1.9 -0.2\n0 0\n")
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        codes = [
            main(["train-prior", "--config", str(cfg), "--out", str(d / "prior.rfpr")]),
            main(["distill", "--config", str(cfg), "--prior", str(d / "prior.rfpr"), "--out", str(d / "distill")]),
            main(["invert", "--prior", str(d / "prior.rfpr"), "--in", str(tmp_path / "in.txt"), "--out", str(d / "noise.txt"), "--nfe", "16"]),
            main(["sweep", "--kind", "nfe", "--values", "2,4", "--config", str(cfg), "--prior", str(d / "prior.rfpr"), "--out", str(d / "sweep.csv")]),
        ]
        assert codes == [0, 0, 0, 0]
        files = sorted(p for p in d.rglob("*") if p.is_file())
        blobs = {}
        for p in files:
            data = p.read_bytes()
            if p.name == "metrics.csv":
                data = strip_timing(data.decode()).encode()
            blobs[str(p.relative_to(d))] = data
        outputs.append(blobs)
    same = outputs[0] == outputs[1]
    criterion(12, same, f"{len(outputs[0])} output files byte-identical across reruns (wall_ms column excluded)")
