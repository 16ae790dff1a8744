"""``flowlab`` command-line entry point.

Exit codes: 0 success, 1 selfcheck failure, 2 configuration or usage error,
3 missing or unreadable artifact, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import selfcheck
from ._binary import FormatError
from .assets import IDENTITY_VIEW, render, save_asset, save_pgm
from .config import ConfigError, format_config, load_config
from .datasets import generate_dataset
from .distill import NumericalAbort
from .flow import GaussianFlowOracle, GuidanceConfig, SolverSchedule
from .nn import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_SELFCHECK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4


class MissingArtifact(Exception):
    pass


def _load_config(path):
    if not Path(path).is_file():
        raise MissingArtifact(f"config file not found: {path}")
    return load_config(path)


def _load_prior(spec: str, cfg=None, dim: int | None = None):
    """A checkpoint path, or one of the pseudo-priors ``oracle`` and ``zero``."""
    if spec == "zero":
        if dim is None:
            dim = cfg.dataset_spec().dim
        return ex.ZeroField(dim)
    if spec == "oracle":
        if cfg is not None:
            return ex.config_field(cfg.override("invert", oracle=True))
        return ex.gauss2_oracle()
    path = Path(spec)
    if not path.is_file():
        raise MissingArtifact(f"prior checkpoint not found: {spec}")
    try:
        return load_checkpoint(path)
    except FormatError as exc:
        raise MissingArtifact(f"unreadable prior checkpoint: {exc}") from exc


# ---------------------------------------------------------------- commands


def cmd_train_prior(args) -> int:
    cfg = _load_config(args.config)
    params, losses = ex.train_prior_from_config(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out)
    csv_path = out.with_suffix(".csv")
    csv_path.write_text(ex.loss_csv(losses))
    tail = losses[-100:]
    if tail:
        print(f"trained {len(losses)} steps; final 100-step mean loss {np.mean(tail):.4f}")
    print(f"wrote {out} and {csv_path}")
    return EXIT_OK


def _distill_overrides(cfg, args):
    d = {}
    if args.loss is not None:
        d["loss"] = args.loss.replace("-", "_")
    for key, attr in (("nfe", "nfe"), ("solver", "solver"), ("cfg_scale", "cfg_scale"), ("steps", "steps"), ("warmup", "warmup"), ("seed", "seed")):
        value = getattr(args, attr)
        if value is not None:
            d[key] = value
    if args.include_jacobian:
        d["include_jacobian"] = True
    return cfg.override("distill", **d).validate() if d else cfg


def cmd_distill(args) -> int:
    cfg = _distill_overrides(_load_config(args.config), args)
    net = _load_prior(args.prior, cfg)
    ds = generate_dataset(cfg.dataset_spec())
    result = ex.run_distill(cfg, net, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_asset(result.asset, out / "asset.rfas")
    result.metrics.write(out)
    (out / "config.txt").write_text(format_config(cfg))
    if result.asset.kind == "splat":
        w = result.asset.width
        save_pgm(render(result.initial, IDENTITY_VIEW), w, out / "initial.pgm")
        save_pgm(render(result.asset, IDENTITY_VIEW), w, out / "final.pgm")
    s = result.metrics.summary
    print(f"distilled {cfg.distill.steps} steps ({cfg.distill.loss}); mode distance {s['mode_distance']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_invert(args) -> int:
    x = _read_input(args.input)
    if args.oracle_mean is not None:
        mean = np.array([float(v) for v in args.oracle_mean.split(",")])
        field = GaussianFlowOracle(mean, args.oracle_var)
    else:
        field = _load_prior(args.prior, dim=x.shape[1])
    dim = ex.field_dim(field)
    if dim != x.shape[1]:
        raise ConfigError(f"dimension mismatch: input vectors have {x.shape[1]} entries, the prior expects {dim}")
    schedule = SolverSchedule.uniform(args.solver, args.nfe)
    guidance = GuidanceConfig(args.cfg_scale, args.class_id) if args.class_id else None
    noise, recon, rel = ex.round_trip(field, x, schedule, guidance)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(ex.vectors_text(noise))
    report = out.with_name(out.name + ".report.csv")
    abs_err = np.linalg.norm(recon - x, axis=1)
    lines = ["row,round_trip_error,relative_error\n"]
    lines += [f"{i},{e!r},{r!r}\n" for i, (e, r) in enumerate(zip(abs_err.tolist(), rel.tolist()))]
    report.write_text("".join(lines))
    print(f"inverted {len(x)} vectors ({args.solver}, n={args.nfe}); mean relative round-trip error {rel.mean():.3e}")
    return EXIT_OK


def _read_input(path):
    if not Path(path).is_file():
        raise MissingArtifact(f"input vector file not found: {path}")
    try:
        return ex.read_vectors(path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    values = ex.parse_sweep_values(args.kind, args.values)
    net = None
    if args.prior is not None:
        net = _load_prior(args.prior, cfg)
    elif args.target == "distill":
        raise ConfigError("a distill sweep needs --prior")
    rows = ex.run_sweep(cfg, args.kind, values, args.target, net)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(ex.sweep_csv(rows))
    print(f"swept {args.kind} over {len(values)} values; wrote {out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    if args.perturb_solver:
        with selfcheck.perturbed_rk4():
            results = selfcheck.run_all()
    else:
        results = selfcheck.run_all()
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.passed}/{r.total}")
        for f in r.failures:
            print(f"    failed check {r.name}/{f}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"selfcheck failed: {', '.join(failed)}")
        return EXIT_SELFCHECK
    print(f"selfcheck passed: {len(results)} suites")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-prior", help="train a velocity-field prior")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path; the loss CSV goes next to it")
    t.set_defaults(func=cmd_train_prior)

    d = sub.add_parser("distill", help="distill an asset from a prior")
    d.add_argument("--config", required=True)
    d.add_argument("--prior", required=True, help="checkpoint path, 'oracle' or 'zero'")
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--loss", choices=("vfds", "ucm", "vf-ism", "vf_ism"))
    d.add_argument("--nfe", type=int)
    d.add_argument("--solver", choices=("euler", "midpoint", "rk4"))
    d.add_argument("--cfg-scale", type=float)
    d.add_argument("--steps", type=int)
    d.add_argument("--warmup", type=int)
    d.add_argument("--seed", type=int)
    d.add_argument("--include-jacobian", action="store_true")
    d.set_defaults(func=cmd_distill)

    i = sub.add_parser("invert", help="push vectors to their coupled noise and report the round trip")
    i.add_argument("--prior", default="oracle", help="checkpoint path, 'oracle' (gauss2 mixture) or 'zero'")
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--nfe", type=int, default=64)
    i.add_argument("--solver", choices=("euler", "midpoint", "rk4"), default="euler")
    i.add_argument("--class-id", type=int, default=0, help="0 inverts the unconditional field")
    i.add_argument("--cfg-scale", type=float, default=1.0)
    i.add_argument("--oracle-mean", help="comma-separated mean of a single-Gaussian oracle prior")
    i.add_argument("--oracle-var", type=float, default=1.0)
    i.set_defaults(func=cmd_invert)

    s = sub.add_parser("sweep", help="one run per value, long-format CSV")
    s.add_argument("--kind", required=True, choices=ex.SWEEP_KINDS)
    s.add_argument("--values", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--target", choices=("distill", "invert"), default="distill")
    s.add_argument("--prior", help="checkpoint path, 'oracle' or 'zero'")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("selfcheck", help="run the built-in oracle suites")
    c.add_argument("--perturb-solver", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalAbort as exc:
        print(f"numerical abort at {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
