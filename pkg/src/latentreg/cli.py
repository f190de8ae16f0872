"""Command-line interface: ``latentreg estimate | simulate | diagnose``.

Reports are JSON documents validated against ``schemas/report.schema.json``.
Errors print a JSON object ``{"error": {...}}`` to stdout and exit with
2 (input), 3 (degenerate estimate) or 4 (unstable bootstrap).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import GroupedData, aggregate, load_grouped, load_observations, parse_schema
from .errors import InputError, LatentRegError
from .inference import EstimatorSpec, bootstrap, diagnose_precision
from .linear import ESTIMATOR_IDS, GaussianPrior, fit_gaussian_prior
from .moments import sample_moments
from .nonlinear import npeb_tau, plugin_tau
from .priors import NpmleConfig, Transform
from .schemas import validate_report
from .simulation import (
    LINEAR_MC_ESTIMATORS,
    NONLINEAR_MC_ESTIMATORS,
    DgpSpec,
    LinearMode,
    NonlinearMode,
    calibrate_dgp,
    default_linear_grid,
    default_spec,
    run_monte_carlo,
    scaled_linear_mode,
)

REPORT_SCHEMA_VERSION = 1
TAU_ESTIMATORS = ("npeb", "plugin")
DEFAULT_SCHEMA = "y=y,x=x,sigma=sigma"

# execution knobs that must not change the report
_NOT_ECHOED = {"threads", "out", "out_dir", "func", "omit_timing"}


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_ECHOED}


def _report(args, started, **body) -> dict:
    rep = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "tool": "latentreg",
        "version": __version__,
        "command": _echo(args),
    }
    rep.update(body)
    if not getattr(args, "omit_timing", False):
        rep["timing"] = {"seconds": time.perf_counter() - started}
    validate_report(rep)
    return rep


def _emit(rep, out):
    text = json.dumps(rep, indent=1, sort_keys=True, allow_nan=False) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load(args):
    schema = parse_schema(args.schema)
    if getattr(args, "weights", None):
        schema = type(schema)(**{**vars(schema), "weight": args.weights})
    if schema.group:
        return load_grouped(args.data, schema)
    return load_observations(args.data, schema)


def _csv_list(text, allowed, what):
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise InputError(f"no {what} given")
    bad = [s for s in items if s not in allowed]
    if bad:
        raise InputError(f"unknown {what} {', '.join(bad)}; choose from {', '.join(allowed)}")
    return items


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


class _TauSpec:
    """Picklable wrapper so tau estimators can be bootstrapped."""

    def __init__(self, name, transform):
        self.name, self.transform = name, transform

    def estimate(self, data):
        if isinstance(data, GroupedData):
            data = aggregate(data)
        if self.name == "npeb":
            return npeb_tau(data, self.transform, NpmleConfig(method="cnm"))
        prior = fit_gaussian_prior(sample_moments(data))
        return plugin_tau(data, prior, self.transform)

    def __call__(self, data):
        return self.estimate(data).tau


def cmd_estimate(args) -> dict:
    started = time.perf_counter()
    names = _csv_list(args.estimators, ESTIMATOR_IDS + TAU_ESTIMATORS, "estimator(s)")
    data = _load(args)
    transform = Transform.parse(args.transform)
    if args.boot is not None and args.seed is None:
        sys.stderr.write("latentreg: no --seed given, bootstrap disabled\n")
        args.boot = None
    estimates, boot = [], {}
    for name in names:
        if name in TAU_ESTIMATORS:
            spec = _TauSpec(name, transform)
        else:
            spec = EstimatorSpec(name, args.partial_out)
        est = spec.estimate(data)
        estimates.append(est.to_dict())
        if args.boot is not None:
            res = bootstrap(data, spec, args.boot, args.seed, args.level, args.threads)
            boot[name] = res.to_dict()
            if args.draws_out:
                _write_draws(Path(args.draws_out), name, res.draws)
    return _report(
        args,
        started,
        input={"path": Path(args.data).name, "sha256": _digest(args.data)},
        estimates=estimates,
        bootstrap=boot,
    )


def _write_draws(path: Path, name, draws):
    new = not path.exists()
    with path.open("a", encoding="utf-8") as fh:
        if new:
            fh.write("estimator,draw,estimate\n")
        for b, v in enumerate(draws):
            fh.write(f"{name},{b},{float(v)!r}\n")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _base_spec(args) -> DgpSpec:
    if args.spec and args.calibrate:
        raise InputError("give either --spec or --calibrate, not both")
    if args.spec:
        spec = DgpSpec.from_json(args.spec)
    elif args.calibrate:
        data = load_observations(args.calibrate, parse_schema(args.schema))
        spec = calibrate_dgp(data, seed=args.seed)
    else:
        spec = default_spec(seed=args.seed)
    if args.n is not None:
        spec = DgpSpec(
            spec.sigma_source, spec.cond_mean, spec.cond_var, spec.mode, args.n, args.seed,
            spec.calibration,
        )
    return spec


def _linear_cells(args, spec):
    if args.grid == "default":
        return [
            ((bm, bs), spec.with_mode(scaled_linear_mode(spec, bm, bs)))
            for bm, bs in default_linear_grid()
        ], ("scaled_beta_mu", "scaled_beta_sigma")
    if args.grid:
        raise InputError(f"unknown grid {args.grid!r}; only 'default' is defined")
    mode = spec.mode
    if not isinstance(mode, LinearMode) or mode.beta_mu is None or mode.beta_sigma is None:
        raise InputError("linear simulation needs --grid default or a spec with beta_mu and beta_sigma")
    return [((mode.beta_mu, mode.beta_sigma), spec)], ("beta_mu", "beta_sigma")


def _nonlinear_cells(args, spec):
    g = spec.unconditional_prior()
    qs = [float(q) for q in str(args.quantile).split(",")]
    cells = []
    for q in qs:
        if not 0 < q < 1:
            raise InputError(f"quantile must lie in (0, 1), got {q}")
        mode = spec.mode if isinstance(spec.mode, NonlinearMode) else NonlinearMode()
        m = NonlinearMode(q, args.effect if args.effect is not None else mode.effect,
                          mode.noise_sd, g.mu, g.sigma_mu2)
        cells.append(((m.tau, q), spec.with_mode(m)))
    return cells, ("tau", "quantile")


def cmd_simulate(args) -> dict:
    started = time.perf_counter()
    if args.seed is None:
        raise InputError("simulate needs --seed")
    spec = _base_spec(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.write_spec:
        spec.to_json(args.write_spec)
    body = {"spec": spec.to_dict()}
    if args.reps:
        mode = args.mode or ("nonlinear" if isinstance(spec.mode, NonlinearMode) else "linear")
        if mode == "linear":
            cells, coords = _linear_cells(args, spec)
            ests = LINEAR_MC_ESTIMATORS
        else:
            cells, coords = _nonlinear_cells(args, spec)
            ests = NONLINEAR_MC_ESTIMATORS
        summary = run_monte_carlo(cells, ests, args.reps, args.seed, args.threads, coords)
        summary.to_csv(out_dir / "summary.csv")
        if mode == "nonlinear" or args.draws:
            summary.draws_to_csv(out_dir / "draws.csv")
        body["monte_carlo"] = {
            "mode": mode,
            "cells": len(cells),
            "reps": args.reps,
            "flagged_cells": summary.flagged_cells(),
            "files": sorted(p.name for p in out_dir.glob("*.csv")),
        }
    rep = _report(args, started, **body)
    return rep


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------


def cmd_diagnose(args) -> dict:
    started = time.perf_counter()
    data = _load(args)
    if not hasattr(data, "sigma"):
        raise InputError("diagnose needs unit-level data (no group column)")
    reports = diagnose_precision(data, args.boot, args.seed)
    return _report(
        args,
        started,
        input={"path": Path(args.data).name, "sha256": _digest(args.data)},
        diagnostics=[r.to_dict() for r in reports],
    )


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentreg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--threads", type=int, default=1, help="worker processes")
        sp.add_argument("--out", help="write the JSON report here instead of stdout")
        sp.add_argument("--omit-timing", action="store_true", help="leave timing out of the report")

    e = sub.add_parser("estimate", help="run estimators on a CSV file")
    e.add_argument("--data", required=True)
    e.add_argument("--schema", default=DEFAULT_SCHEMA,
                   help="role=column list, e.g. y=y,x=x,sigma=se[,weight=n][,z=a+b][,group=id]")
    e.add_argument("--estimators", default="classical")
    e.add_argument("--partial-out", action="store_true", help="residualize y and x on Z first")
    e.add_argument("--weights", help="weight column (overrides the schema)")
    e.add_argument("--transform", default="identity", help="identity | indicator:MU0 | table:PATH")
    e.add_argument("--boot", type=int, help="bootstrap replications; ignored without --seed")
    e.add_argument("--seed", type=int)
    e.add_argument("--level", type=float, default=0.95)
    e.add_argument("--draws-out", help="append bootstrap draws to this CSV")
    common(e)
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="Monte Carlo comparison of estimators")
    s.add_argument("--spec", help="DgpSpec JSON")
    s.add_argument("--calibrate", help="calibrate a spec from this unit-level CSV")
    s.add_argument("--schema", default=DEFAULT_SCHEMA)
    s.add_argument("--write-spec", help="write the base spec as JSON")
    s.add_argument("--mode", choices=("linear", "nonlinear"))
    s.add_argument("--grid", help="'default' for the 11 x 7 scaled coefficient lattice")
    s.add_argument("--quantile", default="0.75", help="threshold quantile(s), comma separated")
    s.add_argument("--effect", type=float, help="normalized effect sd(1(mu > mu0)) * tau")
    s.add_argument("--reps", type=int, default=0)
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--draws", action="store_true", help="also write per-replication estimates")
    s.add_argument("--out-dir", default=".")
    common(s)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("diagnose", help="precision-independence diagnostics")
    d.add_argument("--data", required=True)
    d.add_argument("--schema", default=DEFAULT_SCHEMA)
    d.add_argument("--weights", help=argparse.SUPPRESS)
    d.add_argument("--boot", type=int, default=999)
    d.add_argument("--seed", type=int, default=0)
    common(d)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rep = args.func(args)
    except LatentRegError as err:
        sys.stdout.write(json.dumps({"error": err.to_dict()}, sort_keys=True) + "\n")
        sys.stderr.write(f"latentreg: {err.message}\n")
        return err.exit_code
    except ValueError as err:  # seed range and similar argument checks
        sys.stdout.write(json.dumps({"error": {"type": "InputError", "message": str(err), "context": {}}}) + "\n")
        sys.stderr.write(f"latentreg: {err}\n")
        return InputError.exit_code
    _emit(rep, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
