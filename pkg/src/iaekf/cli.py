"""Command-line entry points.

Subcommands:

* ``simulate``: generate a trajectory + sensor dump.
* ``filter``: run a filter over a trajectory dump, write step records.
* ``adapt``: fit noise covariances by EM on a window of a dump.
* ``montecarlo``: run one of the named experiments.

Configuration comes from an optional JSON file (``--config``) whose
schema mirrors :func:`iaekf.harness.config_to_dict`; individual flags
override file values. Exit codes: 0 success, 1 configuration error,
2 numerical-degeneracy abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .em import EmOptions, NoiseParams, em_fit, save_em_csv, save_em_json
from .exceptions import InvalidCovarianceError, NumericalDegeneracyError
from .filters import FilterState, initial_record, liekf_run, riekf_run, save_records_csv
from .harness import (
    EXPERIMENTS,
    config_from_dict,
    config_to_dict,
    default_config,
    run_experiment,
)
from .models import (
    NoiseSpec,
    TrajectoryConfig,
    WorldConstants,
    generate_trajectory,
    load_trajectory_csv,
    save_trajectory_csv,
)

__all__ = ["main"]


class _ConfigError(Exception):
    pass


def _load_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise _ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise _ConfigError(
            f"malformed config file {path}: line {exc.lineno}, column {exc.colno}: {exc.msg}"
        )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iaekf", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a trajectory and sensor dump")
    sim.add_argument("--config", help="JSON config file")
    sim.add_argument("--out", default="out", help="output directory")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--steps", type=int)
    sim.add_argument("--dt", type=float)
    sim.add_argument("--profile", choices=["zero", "constant", "sinusoid", "random_walk"])
    sim.add_argument("--var-eta", type=float, help="isotropic gyro noise variance")
    sim.add_argument("--var-meas", type=float, help="isotropic accel/mag noise variance")

    flt = sub.add_parser("filter", help="run a filter over a trajectory dump")
    flt.add_argument("--input", required=True, help="trajectory CSV from 'simulate'")
    flt.add_argument("--filter", choices=["ri", "li"], default="ri")
    flt.add_argument("--out", default="out")
    flt.add_argument("--var-eta", type=float, default=1e-1)
    flt.add_argument("--var-meas", type=float, default=1e-5)
    flt.add_argument("--p0", type=float, default=1.0, help="initial tangent variance")

    adp = sub.add_parser("adapt", help="EM noise-covariance fit on a dump window")
    adp.add_argument("--input", required=True, help="trajectory CSV from 'simulate'")
    adp.add_argument("--window", type=int, required=True)
    adp.add_argument("--out", default="out")
    adp.add_argument("--var-eta", type=float, default=1e-1, help="initial gyro variance guess")
    adp.add_argument("--var-meas", type=float, default=1e-5, help="initial accel/mag variance guess")
    adp.add_argument("--max-iter", type=int, default=EmOptions.max_iter)
    adp.add_argument("--tol-g", type=float, default=EmOptions.tol_G)
    adp.add_argument("--tol-theta", type=float, default=EmOptions.tol_theta)

    mc = sub.add_parser("montecarlo", help="run a named experiment")
    mc.add_argument("--experiment", choices=EXPERIMENTS, required=True)
    mc.add_argument("--config", help="JSON config file")
    mc.add_argument("--runs", type=int, help="Monte Carlo run count")
    mc.add_argument("--windows", help="comma-separated window lengths")
    mc.add_argument("--seed", type=int)
    mc.add_argument("--out", help="output directory")
    return parser


def _cmd_simulate(args) -> int:
    doc = _load_config_file(args.config) if args.config else {}
    doc.setdefault("experiment", "single-run")
    overrides = doc.setdefault("trajectory", {})
    if args.seed is not None:
        doc["seed"] = args.seed
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["n_steps"] = args.steps
    if args.dt is not None:
        overrides["dt"] = args.dt
    if args.profile is not None:
        overrides["profile"] = args.profile
    if args.var_eta is not None or args.var_meas is not None:
        noise = doc.setdefault("noise_true", {})
        if args.var_eta is not None:
            noise["sigma_eta"] = args.var_eta
        if args.var_meas is not None:
            noise["sigma_acc"] = args.var_meas
            noise["sigma_mag"] = args.var_meas
    cfg = config_from_dict(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth, samples = generate_trajectory(cfg.trajectory, cfg.world, cfg.noise_true)
    save_trajectory_csv(out / "trajectory.csv", truth, samples, cfg.trajectory.dt)
    with open(out / "config.json", "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out / 'trajectory.csv'} ({cfg.trajectory.n_steps} steps)")
    return 0


def _cmd_filter(args) -> int:
    truth, samples, dt = load_trajectory_csv(args.input)
    if not samples:
        raise _ConfigError(f"{args.input} contains no samples")
    spec = NoiseSpec.isotropic(args.var_eta, args.var_meas)
    world = WorldConstants()
    init = FilterState(q=np.array([1.0, 0.0, 0.0, 0.0]), P=args.p0 * np.eye(3))
    run = riekf_run if args.filter == "ri" else liekf_run
    records = run(samples, init, spec, world, dt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"records_{args.filter}.csv"
    save_records_csv(path, [initial_record(init)] + records)
    print(f"wrote {path} ({len(records)} steps)")
    return 0


def _cmd_adapt(args) -> int:
    truth, samples, dt = load_trajectory_csv(args.input)
    if args.window < 2 or args.window > len(samples):
        raise _ConfigError(
            f"window must be in [2, {len(samples)}] for this input, got {args.window}"
        )
    world = WorldConstants()
    theta0 = NoiseParams(
        mu0=np.zeros(3),
        sigma0=np.eye(3),
        sigma_eta=args.var_eta * np.eye(3),
        sigma_nu=args.var_meas * np.eye(6),
    )
    opts = EmOptions(max_iter=args.max_iter, tol_G=args.tol_g, tol_theta=args.tol_theta)
    report = em_fit(samples[: args.window], theta0, world, dt, opts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_em_csv(out / "em_history.csv", report)
    save_em_json(
        out / "em_result.json",
        report,
        config={
            "input": args.input,
            "window": args.window,
            "dt": dt,
            "var_eta0": args.var_eta,
            "var_meas0": args.var_meas,
            "max_iter": args.max_iter,
            "tol_G": args.tol_g,
            "tol_theta": args.tol_theta,
        },
    )
    print(
        f"wrote {out / 'em_result.json'} ({report.iterations} iterations, "
        f"converged by {report.converged_by})"
    )
    return 0


def _cmd_montecarlo(args) -> int:
    doc = _load_config_file(args.config) if args.config else {}
    doc["experiment"] = args.experiment
    if args.runs is not None:
        doc["mc_runs"] = args.runs
    if args.windows is not None:
        try:
            doc["window_lengths"] = [int(w) for w in args.windows.split(",") if w]
        except ValueError:
            raise _ConfigError(f"--windows must be comma-separated integers, got {args.windows!r}")
    if args.seed is not None:
        doc["seed"] = args.seed
        doc.setdefault("trajectory", {})["seed"] = args.seed
    if args.out is not None:
        doc["output_dir"] = args.out
    cfg = config_from_dict(doc, base=default_config(args.experiment))
    summary = run_experiment(cfg)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {
        "simulate": _cmd_simulate,
        "filter": _cmd_filter,
        "adapt": _cmd_adapt,
        "montecarlo": _cmd_montecarlo,
    }[args.command]
    try:
        return handler(args)
    except (_ConfigError, InvalidCovarianceError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericalDegeneracyError as exc:
        print(f"numerical degeneracy: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
