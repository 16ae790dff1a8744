"""Experiment drivers behind the command-line tools.

Each function takes an :class:`ExperimentConfig` (plus a field where one is
needed) and returns plain data; the CLI layer owns files and exit codes.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import flow
from .assets import IDENTITY_VIEW, LatentAsset, PriorMeta, init_asset, render, sample_view
from .config import ConfigError, ExperimentConfig
from .datasets import Dataset, energy_distance, generate_dataset
from .distill import distill_run
from .flow import GaussianMixtureOracle, GuidanceConfig, SolverSchedule, generate, push_backward
from .metrics import fmt
from .nn import NetworkParams, adam_init, init_network
from .rng import Stream

SWEEP_KINDS = ("nfe", "solver", "cfg", "loss")
SWEEP_COLUMNS = ("sweep_kind", "value", "metric", "metric_value")
ENERGY_VIEWS = 64
ENERGY_REFERENCE = 512


# ---------------------------------------------------------------- prior


def train_prior_from_config(cfg: ExperimentConfig, dataset: Dataset | None = None):
    """Returns ``(params, per-step losses)``."""
    ds = dataset if dataset is not None else generate_dataset(cfg.dataset_spec())
    params = init_network(cfg.network_spec(), cfg.network.seed)
    opt = adam_init(params, learning_rate=cfg.prior.lr)
    params, _, losses = flow.train_prior(params, ds.x, ds.class_ids, cfg.prior.steps, cfg.prior.batch, opt, cfg.prior.seed)
    return params, losses


def loss_csv(losses) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step", "loss"))
    for i, loss in enumerate(losses, start=1):
        w.writerow((i, fmt(float(loss))))
    return buf.getvalue()


class ZeroField:
    """Debug prior whose velocity is identically zero."""

    def __init__(self, dim: int):
        self.dim = dim

    def velocity(self, x, t, class_id=0):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    def vjp_x(self, x, t, class_id, upstream):
        return np.zeros_like(np.asarray(upstream, dtype=np.float64))


def field_dim(field) -> int:
    spec = getattr(field, "spec", None)
    return spec.input_dim if spec is not None else field.dim


# ---------------------------------------------------------------- distill


def prior_meta(ds: Dataset, image_size: int | None = None) -> PriorMeta:
    x = ds.x.astype(np.float64)
    return PriorMeta(ds.dim, x.mean(axis=0), float(x.mean()), image_size)


def initial_asset(cfg: ExperimentConfig, ds: Dataset):
    a = cfg.asset
    if a.kind == "latent" and a.start:
        if len(a.start) != ds.dim:
            raise ConfigError(f"asset.start has {len(a.start)} entries, the prior expects {ds.dim}")
        return LatentAsset(np.asarray(a.start, dtype=np.float64))
    size = cfg.dataset.image_size if cfg.dataset.name == "shapes16" else None
    return init_asset(a.kind, a.mode, cfg.distill.seed, prior_meta(ds, size), a.splats)


def mode_distance_fn(cfg: ExperimentConfig, ds: Dataset):
    """Distance from an asset's identity render to the nearest target mode.

    gauss2: nearest configured centre.  Other datasets: RMS distance to the
    nearest sample of the target class.
    """
    if cfg.dataset.name == "gauss2":
        centers = np.asarray(cfg.dataset.centers, dtype=np.float64)
        return lambda asset: float(np.min(np.linalg.norm(centers - render(asset, IDENTITY_VIEW), axis=1)))
    ref = ds.class_samples(cfg.distill.class_id)
    scale = np.sqrt(ds.dim)
    return lambda asset: float(np.min(np.linalg.norm(ref - render(asset, IDENTITY_VIEW), axis=1)) / scale)


def distill_summary(cfg: ExperimentConfig, ds: Dataset, asset) -> dict:
    x = render(asset, IDENTITY_VIEW)
    out = {"mode_distance": mode_distance_fn(cfg, ds)(asset)}
    if cfg.dataset.name == "shapes16":
        ref = ds.class_samples(cfg.distill.class_id)
        out["mean_distance"] = float(np.linalg.norm(x - ref.mean(axis=0)) / np.sqrt(ds.dim))
        rng = Stream(cfg.distill.seed, 3)
        renders = np.stack([render(asset, sample_view(rng, cfg.view_ranges())) for _ in range(ENERGY_VIEWS)])
        out["energy_distance"] = energy_distance(renders, ref[:ENERGY_REFERENCE])
    else:
        out["mean_distance"] = float(np.linalg.norm(x - ds.x.astype(np.float64).mean(axis=0)))
    return out


@dataclass
class DistillResult:
    initial: object
    asset: object
    metrics: object


def run_distill(cfg: ExperimentConfig, net, ds: Dataset | None = None) -> DistillResult:
    ds = ds if ds is not None else generate_dataset(cfg.dataset_spec())
    if field_dim(net) != ds.dim:
        raise ConfigError(f"prior input dimension {field_dim(net)} does not match dataset dimension {ds.dim}")
    start = initial_asset(cfg, ds)
    d = cfg.distill
    asset, metrics = distill_run(
        start,
        net,
        cfg.view_ranges(),
        cfg.distill_config(),
        coherence_every=d.coherence_every,
        coherence_trials=d.coherence_trials,
        target_distance=mode_distance_fn(cfg, ds),
    )
    metrics.summary.update(distill_summary(cfg, ds, asset))
    metrics.summary["nfe_total"] = int(sum(metrics.column("nfe")))
    return DistillResult(start, asset, metrics)


# ---------------------------------------------------------------- invert


def round_trip(field, x, schedule: SolverSchedule, guidance: GuidanceConfig | None = None):
    """``(noise, reconstruction, per-row relative error)`` for rows of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    noise = push_backward(field, x, schedule, guidance)
    recon = generate(field, noise, schedule, guidance)
    err = np.linalg.norm(recon - x, axis=1)
    scale = np.linalg.norm(x, axis=1)
    rel = np.where(scale > 0, err / np.where(scale > 0, scale, 1.0), err)
    return noise, recon, rel


def invert_metrics(cfg: ExperimentConfig, field) -> dict:
    """Round-trip statistics on ``invert.samples`` dataset points."""
    ds = generate_dataset(cfg.dataset_spec())
    rng = Stream(cfg.invert.seed, 0x1271)
    idx = rng.integers(len(ds), cfg.invert.samples)
    d = cfg.distill
    schedule = SolverSchedule.uniform(d.solver, d.nfe)
    guidance = None
    if cfg.invert.class_id:
        guidance = GuidanceConfig(1.0 if d.cfg_scale is None else d.cfg_scale, cfg.invert.class_id)
    _, _, rel = round_trip(field, ds.x[idx], schedule, guidance)
    return {"round_trip_error": float(rel.mean()), "round_trip_max": float(rel.max()), "nfe": 2 * schedule.nfe}


def config_field(cfg: ExperimentConfig, net=None):
    """The prior a config refers to: the dataset oracle when ``invert.oracle`` is set."""
    if cfg.invert.oracle:
        try:
            return cfg.dataset_spec().oracle()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if net is None:
        raise ConfigError("this run needs a prior checkpoint (or invert.oracle = true)")
    return net


# ---------------------------------------------------------------- sweeps


def parse_sweep_values(kind: str, text: str) -> list:
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS}")
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise ConfigError("sweep needs at least one value")
    try:
        if kind == "nfe":
            values = [int(v) for v in items]
        elif kind == "cfg":
            values = [float(v) for v in items]
        elif kind == "loss":
            values = [v.replace("-", "_") for v in items]
        else:
            values = items
    except ValueError as exc:
        raise ConfigError(f"bad {kind} sweep value: {exc}") from exc
    return values


def sweep_config(cfg: ExperimentConfig, kind: str, value) -> ExperimentConfig:
    key = {"nfe": "nfe", "solver": "solver", "cfg": "cfg_scale", "loss": "loss"}[kind]
    out = cfg.override("distill", **{key: value})
    return out.validate()


def thread_count() -> int:
    raw = os.environ.get("FLOWLAB_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)


def run_sweep(cfg: ExperimentConfig, kind: str, values, target: str = "distill", net=None) -> list[tuple]:
    """One run per value; rows ``(kind, value, metric, metric_value)`` in value order."""
    if not values:
        raise ConfigError("sweep needs at least one value")
    if target not in ("distill", "invert"):
        raise ConfigError(f"unknown sweep target {target!r}")
    if target == "invert" and kind == "loss":
        raise ConfigError("a loss sweep needs the distill target")
    if target == "invert" and kind == "cfg" and not cfg.invert.class_id:
        raise ConfigError("a cfg sweep over inversion needs invert.class_id >= 1")
    configs = [sweep_config(cfg, kind, v) for v in values]
    field = config_field(cfg, net) if target == "invert" else net
    if target == "distill" and field is None:
        raise ConfigError("a distill sweep needs a prior checkpoint")
    ds = generate_dataset(cfg.dataset_spec()) if target == "distill" else None

    def one(c):
        if target == "invert":
            return invert_metrics(c, field)
        return run_distill(c, field, ds).metrics.summary

    with ThreadPoolExecutor(max_workers=min(thread_count(), len(configs))) as pool:
        results = list(pool.map(one, configs))
    rows = []
    for v, summary in zip(values, results):
        for name in sorted(summary):
            rows.append((kind, v, name, summary[name]))
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for kind, value, metric, mv in rows:
        w.writerow((kind, fmt(value), metric, fmt(mv)))
    return buf.getvalue()


# ---------------------------------------------------------------- vectors


def read_vectors(path) -> np.ndarray:
    """Whitespace-separated floats, one vector per line; ``#`` starts a comment."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append([float(v) for v in line.replace(",", " ").split()])
    if not rows:
        raise ValueError(f"{path}: no vectors")
    if len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: vectors have differing lengths")
    return np.asarray(rows, dtype=np.float64)


def vectors_text(x) -> str:
    return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in np.atleast_2d(x))


def gauss2_oracle(centers=((-2.0, 0.0), (2.0, 0.0)), sigma=0.3) -> GaussianMixtureOracle:
    c = np.asarray(centers, dtype=np.float64)
    return GaussianMixtureOracle(c, np.full_like(c, sigma**2))
