"""``dose-dr`` command-line interface.

Exit codes: 0 success, 1 estimation failure, 2 usage or input error,
3 infeasible configuration (no usable bandwidth, degenerate window).
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import ColumnRoles, Dataset, load_csv, names_to_indices, validate
from .errors import (
    BandwidthSelectionError,
    ConfigError,
    DataError,
    DegenerateWindowError,
    DoseDRError,
)
from .estimator import (
    CURVE_COLUMNS,
    EstimationConfig,
    crossfit_plugin,
    dr_estimate,
    selection_pseudo_outcomes,
    supervised_estimate,
)
from .simulation import (
    SimulationSpec,
    run_misspecification_study,
    run_rmse_experiment,
    run_supervised_comparison,
    write_results_csv,
)
from .smoother import default_bandwidth_grid, loocv_scores

log = logging.getLogger("dosedr")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INFEASIBLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _grid_spec(s: str) -> np.ndarray:
    try:
        lo, hi, count = s.split(":")
        lo, hi, count = float(lo), float(hi), int(count)
    except ValueError:
        raise UsageError(f"grid must look like lo:hi:count, got {s!r}") from None
    if count < 1 or hi < lo:
        raise UsageError(f"empty grid {s!r}")
    return np.linspace(lo, hi, count)


def _split_names(s: str | None) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip()) if s else ()


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting (repeatable)")
    p.add_argument("--threads", type=int, default=None, help="worker count (default: all cores)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="count", default=0)


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="CSV file with a header row")
    p.add_argument("--treatment", required=True, help="treatment column")
    p.add_argument("--outcome", required=True, help="outcome column (empty or NA = missing)")
    p.add_argument("--covariates", required=True, help="comma-separated covariate columns")
    p.add_argument("--surrogates", default="", help="comma-separated surrogate columns")
    p.add_argument("--label", default=None, help="optional 0/1 label column")


def _smoother_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kernel", choices=["epanechnikov", "uniform", "gaussian"])
    p.add_argument("--bandwidth", type=float, help="fixed bandwidth (skips cross-validation)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dose-dr", description="Doubly robust dose-response curves.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="estimate a curve from a CSV file")
    _data_args(p)
    _smoother_args(p)
    _common(p)
    p.add_argument("--method", choices=["dr", "plugin", "supervised"])
    p.add_argument("--grid", help="evaluation grid lo:hi:count (default: 25 points, 5th-95th pct)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="several methods on the same data (long-format CSV)")
    _data_args(p)
    _smoother_args(p)
    _common(p)
    p.add_argument("--methods", default="plugin,dr,supervised")
    p.add_argument("--grid")
    p.add_argument("--out", required=True)

    p = sub.add_parser("bandwidth", help="leave-one-out scores over a bandwidth grid")
    _data_args(p)
    _common(p)
    p.add_argument("--kernel", choices=["epanechnikov", "uniform", "gaussian"])
    g = p.add_mutually_exclusive_group()
    g.add_argument("--grid", help="explicit bandwidths lo:hi:count (linear)")
    g.add_argument("--grid-geom", help="multiples of range(A) lo:hi:count (geometric)")
    p.add_argument("--phi", help="score this column against the treatment instead of the "
                                 "doubly robust pseudo-outcomes")
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="run a Monte Carlo study")
    _common(p)
    p.add_argument("--spec", help="study settings file (simulation.* keys)")
    p.add_argument("--M", type=int, help="override the replication count")
    p.add_argument("--out", required=True)
    return ap


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _resolve(args, extra_file: str | None = None) -> dict:
    layers = []
    for path in (args.config, extra_file):
        if path:
            layers.append(cfgmod.load(path))
    over = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = cfgmod.parse_value(k.strip(), v)
    layers.append(over)
    return cfgmod.resolve(*layers)


def _threads(args) -> int:
    return args.threads if args.threads and args.threads > 0 else (os.cpu_count() or 1)


def _write_sidecar(cfg: dict, out: str, args) -> None:
    cfgmod.dump(cfg, str(out) + ".config", header=f"resolved settings for: dose-dr {args.command}")


def _load(args) -> Dataset:
    roles = ColumnRoles(args.treatment, args.outcome, _split_names(args.covariates),
                        _split_names(args.surrogates), args.label)
    data = load_csv(args.input, roles)
    validate(data).raise_if_fatal()
    return data


def _estimation_config(cfg: dict, args, data: Dataset) -> EstimationConfig:
    if getattr(args, "kernel", None):
        cfg["smoother.kernel"] = args.kernel
    if getattr(args, "bandwidth", None) is not None:
        cfg["smoother.bandwidth"] = args.bandwidth
    if getattr(args, "method", None):
        cfg["estimation.method"] = args.method
    if args.seed is not None:
        cfg["estimation.seed"] = args.seed
    inter = cfg["features.interactions"]
    grid = cfg["estimation.grid"]
    return EstimationConfig(
        method=cfg["estimation.method"], kernel=cfg["smoother.kernel"], bandwidth=cfg["smoother.bandwidth"],
        bandwidth_grid=cfg["smoother.bandwidth_grid"], grid_lo=cfg["smoother.grid_lo"],
        grid_hi=cfg["smoother.grid_hi"], grid_points=cfg["smoother.grid_points"],
        grid=tuple(_grid_spec(grid)) if grid else None,
        clip_rho_min=cfg["estimation.clip_rho_min"], clip_w_max=cfg["estimation.clip_w_max"],
        rotate=cfg["estimation.rotate"], ci_level=cfg["estimation.ci_level"], seed=cfg["estimation.seed"],
        quadratic_a=cfg["features.quadratic_a"],
        interactions=None if inter is None else names_to_indices(inter, data.covariate_names),
        degenerate=cfg["estimation.degenerate"], threads=_threads(args),
    )


def _run_method(method: str, data: Dataset, ec: EstimationConfig, grid):
    ec = replace(ec, method=method)
    if method == "dr":
        return dr_estimate(data, ec, grid)
    if method == "plugin":
        return crossfit_plugin(data, ec, grid)
    return supervised_estimate(data, ec, grid)


def cmd_estimate(args) -> int:
    cfg = _resolve(args)
    data = _load(args)
    ec = _estimation_config(cfg, args, data)
    grid = _grid_spec(args.grid) if args.grid else None
    if grid is not None:
        cfg["estimation.grid"] = args.grid
    est = _run_method(ec.method, data, ec, grid)
    est.to_csv(args.out)
    _write_sidecar(cfg, args.out, args)
    log.info("wrote %d grid points to %s", est.grid.size, args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _resolve(args)
    data = _load(args)
    ec = _estimation_config(cfg, args, data)
    grid = _grid_spec(args.grid) if args.grid else None
    methods = _split_names(args.methods)
    bad = set(methods) - {"dr", "plugin", "supervised"}
    if not methods or bad:
        raise UsageError(f"--methods must list dr, plugin or supervised (got {args.methods!r})")
    tmp = Path(str(args.out) + ".part")
    rows = []
    for m in methods:
        _run_method(m, data, ec, grid).to_csv(tmp)
        with tmp.open(newline="") as fh:
            rows.extend(list(csv.reader(fh))[1:])
    tmp.unlink()
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CURVE_COLUMNS)
        wr.writerows(rows)
    _write_sidecar(cfg, args.out, args)
    return EXIT_OK


def cmd_bandwidth(args) -> int:
    cfg = _resolve(args)
    if args.kernel:
        cfg["smoother.kernel"] = args.kernel
    kernel = cfg["smoother.kernel"]
    if args.phi:
        roles = ColumnRoles(args.treatment, args.phi, _split_names(args.covariates),
                            _split_names(args.surrogates))
        pts = load_csv(args.input, roles)
        if pts.n_labeled < pts.n:
            raise DataError(f"column {args.phi!r} has missing values")
        A, phi = pts.A, pts.Y
    else:
        data = _load(args)
        po = selection_pseudo_outcomes(data, _estimation_config(cfg, args, data))
        A, phi = po.A, po.phi
    if args.grid:
        grid = _grid_spec(args.grid)
    elif args.grid_geom:
        lo, hi, count = args.grid_geom.split(":") if args.grid_geom.count(":") == 2 else (None,) * 3
        if lo is None:
            raise UsageError(f"--grid-geom must look like lo:hi:count, got {args.grid_geom!r}")
        grid = default_bandwidth_grid(A, float(lo), float(hi), int(count))
    elif cfg["smoother.bandwidth_grid"]:
        grid = np.asarray(cfg["smoother.bandwidth_grid"])
    else:
        grid = default_bandwidth_grid(A, cfg["smoother.grid_lo"], cfg["smoother.grid_hi"],
                                      cfg["smoother.grid_points"])
    if np.size(grid) == 0 or np.any(~(np.asarray(grid) > 0)):
        raise UsageError("bandwidth grid must be non-empty and positive")
    scores = loocv_scores(A, phi, grid, kernel)
    feas = [s for s in scores if s.feasible]
    chosen = min(feas, key=lambda s: (s.score, s.h)).h if feas else None
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["h", "loocv_score", "feasible", "chosen"])
        for s in scores:
            wr.writerow([repr(s.h), "" if math.isnan(s.score) else repr(s.score),
                         int(s.feasible), int(s.h == chosen)])
    _write_sidecar(cfg, args.out, args)
    if chosen is None:
        raise BandwidthSelectionError("no feasible bandwidth in the grid")
    print(f"chosen h = {chosen!r}")
    return EXIT_OK


def spec_from_config(cfg: dict, threads: int = 1) -> SimulationSpec:
    est = cfg["simulation.estimators"] or ("plugin", "dr")
    return SimulationSpec(
        n=cfg["simulation.n"], alpha=cfg["simulation.alpha"], M=cfg["simulation.M"],
        variant=cfg["simulation.variant"], estimators=est,
        misspecify_outcome=cfg["simulation.misspecify_outcome"], seed=cfg["simulation.seed"],
        a_star=cfg["simulation.a_star"], kernel=cfg["smoother.kernel"], bandwidth=cfg["simulation.bandwidth"],
        label_prob=cfg["simulation.label_prob"], surrogate_scale=cfg["simulation.surrogate_scale"],
        clip_rho_min=cfg["estimation.clip_rho_min"], clip_w_max=cfg["estimation.clip_w_max"],
        rotate=cfg["estimation.rotate"], ci_level=cfg["estimation.ci_level"],
        grid_lo=cfg["smoother.grid_lo"], grid_hi=cfg["smoother.grid_hi"],
        grid_points=cfg["smoother.grid_points"], threads=threads,
    )


def cmd_simulate(args) -> int:
    cfg = _resolve(args, args.spec)
    if args.M is not None:
        cfg["simulation.M"] = args.M
    if args.seed is not None:
        cfg["simulation.seed"] = args.seed
    try:
        spec = spec_from_config(cfg, _threads(args))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    run = {"rmse": run_rmse_experiment, "misspecification": run_misspecification_study,
           "supervised": run_supervised_comparison}[cfg["simulation.study"]]
    res = run(spec, progress=lambda msg: print(msg, flush=True))
    write_results_csv(res.table, args.out)
    _write_sidecar(cfg, args.out, args)
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "compare": cmd_compare, "bandwidth": cmd_bandwidth,
            "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, DataError, OSError) as exc:
        print(f"dose-dr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BandwidthSelectionError, DegenerateWindowError) as exc:
        print(f"dose-dr: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DoseDRError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"dose-dr: estimation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
