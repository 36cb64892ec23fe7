"""Batch command-line front end over CSV files.

Subcommands: ``fit-mixture``, ``sdr``, ``simulate``, ``bench``, ``misspec``,
and ``r2``.  All numeric output is written with 17 significant digits so a
repeated run with the same inputs produces byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from dataclasses import replace

import numpy as np

from .benchmark import (
    ALL_METHODS,
    BenchConfig,
    misspec_experiment,
    oos_r2,
    run_benchmark,
    run_method,
)
from .datagen import FAMILIES, SHAPES, SimSpec, generate
from .gmm import EmConfig, GaussianMixtureFit, fit_best_bic

USAGE_ERROR = 1
NUMERIC_ERROR = 2

_SDR_METHODS = ALL_METHODS


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def _read_csv(path, response):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    if response not in header:
        raise ValueError(f"response column {response!r} not in header {header}")
    data = np.array([[float(v) for v in row] for row in rows])
    y_col = header.index(response)
    x_cols = [j for j in range(len(header)) if j != y_col]
    names = [header[j] for j in x_cols]
    return data[:, x_cols], data[:, y_col], names


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)


def _load_config_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {line!r}")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_config_defaults(args, parser):
    """Config-file values fill in anything the flags left at the default."""
    if not getattr(args, "config", None):
        return args
    values = _load_config_file(args.config)
    for key, raw in values.items():
        if not hasattr(args, key):
            continue
        default = parser.get_default(key)
        if getattr(args, key) == default:
            current = getattr(args, key)
            caster = type(default) if default is not None else (
                type(current) if current is not None else str
            )
            setattr(args, key, caster(raw) if caster is not bool else raw.lower() == "true")
    return args


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixsdr",
        description="Mixture-adjusted inverse regression toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit-mixture", help="fit a Gaussian mixture to the predictors")
    fit.add_argument("--data", required=True)
    fit.add_argument("--response", required=True)
    fit.add_argument("--q-max", type=int, default=4)
    fit.add_argument("--restarts", type=int, default=10)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--out", required=True, help="output JSON for the fit")
    fit.add_argument("--config", default=None)

    sdr = sub.add_parser("sdr", help="estimate the central subspace")
    sdr.add_argument("--method", required=True, choices=_SDR_METHODS)
    sdr.add_argument("--data", required=True)
    sdr.add_argument("--response", required=True)
    sdr.add_argument("--d", type=int, required=True)
    sdr.add_argument("--H", type=int, default=5)
    sdr.add_argument("--q-max", type=int, default=4)
    sdr.add_argument("--rho", type=float, default=None)
    sdr.add_argument("--mixture-json", default=None, help="reuse a fit-mixture output")
    sdr.add_argument("--seed", type=int, default=0)
    sdr.add_argument("--out-basis", required=True, help="output CSV for the basis")
    sdr.add_argument("--out-meta", default=None, help="output JSON metadata")
    sdr.add_argument("--config", default=None)

    sim = sub.add_parser("simulate", help="write one simulated data set")
    sim.add_argument("--family", required=True, choices=FAMILIES)
    sim.add_argument("--shape", default="mixture", choices=SHAPES)
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--p", type=int, required=True)
    sim.add_argument("--u", type=float, default=None)
    sim.add_argument("--weights", default=None, help="comma-separated overrides")
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--replicate", type=int, default=0)
    sim.add_argument("--out-data", required=True, help="output CSV (X columns + y)")
    sim.add_argument("--out-truth", default=None, help="output JSON with beta0/d/support")
    sim.add_argument("--config", default=None)

    bench = sub.add_parser("bench", help="Monte Carlo benchmark table")
    bench.add_argument("--family", required=True, choices=FAMILIES)
    bench.add_argument("--shape", default="mixture", choices=SHAPES)
    bench.add_argument("--methods", required=True, help="comma-separated method list")
    bench.add_argument("--reps", type=int, required=True)
    bench.add_argument("--seed", type=int, required=True)
    bench.add_argument("--n", type=int, default=500)
    bench.add_argument("--p", type=int, default=10)
    bench.add_argument("--u", type=float, default=None)
    bench.add_argument("--H", type=int, default=5)
    bench.add_argument("--q-max", type=int, default=4)
    bench.add_argument("--rho", type=float, default=None)
    bench.add_argument("--squared", action="store_true", help="report delta^2")
    bench.add_argument("--jobs", type=int, default=1)
    bench.add_argument("--out", required=True, help="output CSV table")
    bench.add_argument("--out-json", default=None)
    bench.add_argument("--per-replicate", action="store_true")
    bench.add_argument("--config", default=None)

    mis = sub.add_parser("misspec", help="forced-order / oracle study")
    mis.add_argument("--family", required=True, choices=FAMILIES)
    mis.add_argument("--k-values", default="1,2,3,4")
    mis.add_argument("--oracle", action="store_true")
    mis.add_argument("--reps", type=int, required=True)
    mis.add_argument("--seed", type=int, required=True)
    mis.add_argument("--n", type=int, default=500)
    mis.add_argument("--p", type=int, default=10)
    mis.add_argument("--H", type=int, default=5)
    mis.add_argument("--out", required=True)
    mis.add_argument("--config", default=None)

    r2 = sub.add_parser("r2", help="leave-one-out predictive R2 of a basis")
    r2.add_argument("--data", required=True)
    r2.add_argument("--response", required=True)
    r2.add_argument("--basis", required=True, help="basis CSV from `sdr`")
    r2.add_argument("--config", default=None)

    return parser


def _cmd_fit_mixture(args) -> int:
    X, _, _ = _read_csv(args.data, args.response)
    cfg = EmConfig(restarts=args.restarts, seed=args.seed)
    fit = fit_best_bic(X, args.q_max, cfg)
    with open(args.out, "w") as fh:
        fh.write(fit.to_json())
        fh.write("\n")
    print(f"q={fit.q} loglik={_fmt(fit.loglik)}")
    return 0


def _cmd_sdr(args) -> int:
    X, Y, names = _read_csv(args.data, args.response)
    cfg = BenchConfig(H=args.H, q_max=args.q_max, rho=args.rho, em=EmConfig(seed=args.seed))
    fit = None
    if args.method.endswith("-m") or args.method.endswith("-rm"):
        if args.method.startswith("sparse"):
            fit = None  # sparse methods fit their own shared-covariance mixture
        elif args.mixture_json:
            with open(args.mixture_json) as fh:
                fit = GaussianMixtureFit.from_json(fh.read(), X=X)
        else:
            fit = fit_best_bic(X, args.q_max, replace(cfg.em, seed=args.seed))
    est, extras = run_method(args.method, X, Y, args.d, cfg, fit=fit, rho=args.rho)
    header = [f"dir{j + 1}" for j in range(est.dim)]
    _write_csv(args.out_basis, ["predictor"] + header,
               [[names[i]] + list(est.basis[i]) for i in range(len(names))])
    if args.out_meta:
        meta = {
            "method": args.method,
            "d": est.dim,
            "H": args.H,
            "seed": args.seed,
            "warning": est.warning,
            "oos_r2": oos_r2(X, Y, est),
        }
        if "diagnostics" in extras:
            meta["solver"] = extras["diagnostics"]
            meta["support"] = list(extras["support"])
        if fit is not None:
            meta["q"] = fit.q
        _write_json(args.out_meta, meta)
    return 0


def _cmd_simulate(args) -> int:
    weights = None
    if args.weights:
        weights = tuple(float(w) for w in args.weights.split(","))
    spec = SimSpec(
        family=args.family, n=args.n, p=args.p, shape=args.shape,
        weights=weights, u=args.u, seed=args.seed,
    )
    X, Y, truth = generate(spec, replicate=args.replicate)
    header = [f"x{j + 1}" for j in range(args.p)] + ["y"]
    rows = [list(X[i]) + [Y[i]] for i in range(args.n)]
    _write_csv(args.out_data, header, rows)
    if args.out_truth:
        _write_json(
            args.out_truth,
            {
                "family": args.family,
                "d": truth.d,
                "support": list(truth.support),
                "beta0": truth.beta0,
                "seed": args.seed,
                "replicate": args.replicate,
            },
        )
    return 0


def _spec_from_args(args) -> SimSpec:
    return SimSpec(
        family=args.family,
        n=args.n,
        p=args.p,
        shape=getattr(args, "shape", "mixture"),
        u=args.u if hasattr(args, "u") else None,
        seed=args.seed,
    )


def _cmd_bench(args) -> int:
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    cfg = BenchConfig(
        H=args.H, q_max=args.q_max, rho=args.rho, squared=args.squared, jobs=args.jobs,
    )
    result = run_benchmark(_spec_from_args(args), methods, args.reps, args.seed, cfg)
    result.to_csv(args.out)
    if args.out_json:
        result.to_json(args.out_json, include_replicates=args.per_replicate)
    for row in result.rows:
        mean = "NA" if row["mean"] is None else f"{row['mean']:.3f}"
        sd = f"{row['sd']:.3f}" if row["n_ok"] > 1 else "0.000"
        print(f"{row['method']:>14s}  {mean}({sd})  ok={row['n_ok']}")
    return 0


def _cmd_misspec(args) -> int:
    k_values = [int(k) for k in args.k_values.split(",") if k.strip()]
    spec = SimSpec(family=args.family, n=args.n, p=args.p, seed=args.seed)
    cfg = BenchConfig(H=args.H)
    result = misspec_experiment(spec, k_values, args.reps, args.seed, cfg, oracle=args.oracle)
    result.to_csv(args.out)
    for row in result.rows:
        mean = "NA" if row["mean"] is None else f"{row['mean']:.3f}"
        print(f"{row['method']:>16s}  {mean}({row['sd']:.3f})")
    return 0


def _cmd_r2(args) -> int:
    X, Y, names = _read_csv(args.data, args.response)
    with open(args.basis, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    if [r[0] for r in rows] != names:
        raise ValueError("basis predictors do not match the data columns")
    basis = np.array([[float(v) for v in row[1:]] for row in rows])
    value = oos_r2(X, Y, basis)
    print(_fmt(value))
    return 0


_COMMANDS = {
    "fit-mixture": _cmd_fit_mixture,
    "sdr": _cmd_sdr,
    "simulate": _cmd_simulate,
    "bench": _cmd_bench,
    "misspec": _cmd_misspec,
    "r2": _cmd_r2,
}


def dispatch(argv=None) -> int:
    """Parse arguments and execute exactly one subcommand.

    Exit codes: 0 success, 1 usage error, 2 numerical failure.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_defaults(args, parser)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default", RuntimeWarning)
            return _COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
