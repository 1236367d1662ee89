"""Batch command-line front end.

Three subcommands, all emitting machine-readable output with a
versioned schema and atomic write-then-rename file handling:

* ``test``      - run CI tests on a delimited table (explicit column
                  mapping; precomputed conditional-mean columns let any
                  external model plug in);
* ``simulate``  - run a named simulation scenario and emit per-replicate
                  p-values plus a summary table;
* ``bench``     - per-hypothesis wall-time comparison of the methods'
                  test stages on simulated data.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal
numerical failure beyond the fallback policy.  Errors print one JSON
line on stderr.  Seeds are mandatory for simulate/bench so results are
reproducible; ``test`` output is byte-identical across reruns unless
``--with-timing`` is requested.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import tempfile
import time

import numpy as np

from . import __version__
from .citest import (
    Dataset,
    FittedConditionals,
    dcrt,
    fit_conditionals,
    gcm,
    score_test_nb,
    spacrt,
)
from .nef import NefFamily, dA
from .sim import (
    CrisprParams,
    GwasParams,
    run_gwas_replications,
    run_replications,
    simulate_crispr,
)

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "detail": message}) + "\n")
    return code


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".spacrt-")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("SPACRT_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- input ----


def _read_table(path: str, delimiter: str | None):
    if delimiter is None:
        delimiter = "\t" if path.endswith((".tsv", ".tab")) else ","
    try:
        with open(path, newline="") as handle:
            reader = csv.reader(handle, delimiter=delimiter)
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read input: {exc}") from exc
    if not rows:
        raise DataError("input table is empty")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise DataError("input table has no data rows")
    return header, body


def _column(header, body, name):
    if name not in header:
        raise ConfigError(f"column {name!r} not found in input header")
    idx = header.index(name)
    out = np.empty(len(body))
    for i, row in enumerate(body):
        if idx >= len(row):
            raise DataError(f"row {i + 2} is short: no field {name!r}")
        try:
            out[i] = float(row[idx])
        except ValueError as exc:
            raise DataError(f"row {i + 2}, column {name!r}: unparseable value {row[idx]!r}") from exc
    return out


# ----------------------------------------------------------------- test ----


def _parse_y_fit(spec: str):
    if spec in ("negbin-mom", "negbin-ml", "poisson", "logistic", "precomputed"):
        return spec
    if spec.startswith("negbin:"):
        return ("negbin", float(spec.split(":", 1)[1]))
    if spec == "krr:linear":
        return ("krr", ("linear",))
    if spec.startswith("krr:gaussian:"):
        return ("krr", ("gaussian", float(spec.split(":")[2])))
    raise ConfigError(f"unknown --y-fit {spec!r}")


def cmd_test(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    known = {"spacrt", "dcrt", "gcm", "score_nb"}
    for m in methods:
        if m not in known:
            raise ConfigError(f"unknown method {m!r}")
    if "dcrt" in methods and args.dcrt_m < 1:
        raise ConfigError("--dcrt-m must be >= 1 when dcrt is requested")
    header, body = _read_table(args.input, args.delimiter)
    x = _column(header, body, args.x_col)
    y = _column(header, body, args.y_col)
    z_cols = [c.strip() for c in args.z_cols.split(",") if c.strip()] if args.z_cols else []
    z = (
        np.column_stack([_column(header, body, c) for c in z_cols])
        if z_cols
        else np.empty((len(body), 0))
    )
    try:
        data = Dataset(x=x, y=y, z=z)
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    family = NefFamily(args.family)
    expected_x_fit = "logistic" if family is NefFamily.BERNOULLI else "poisson"
    if args.x_fit not in ("precomputed", expected_x_fit):
        raise ConfigError(f"--x-fit {args.x_fit!r} does not match --family {args.family!r}")

    from . import glm

    mu_x_exact = None
    if args.x_fit == "precomputed":
        if args.theta_x_col:
            theta_x = _column(header, body, args.theta_x_col)
        elif args.mu_x_col:
            # keep the supplied means bit-exact; theta is derived from them
            mu_x_exact = _column(header, body, args.mu_x_col)
            if family is NefFamily.BERNOULLI:
                if np.any((mu_x_exact <= 0) | (mu_x_exact >= 1)):
                    raise DataError("--mu-x-col values must lie strictly in (0, 1)")
                theta_x = np.log(mu_x_exact / (1 - mu_x_exact))
            else:
                if np.any(mu_x_exact <= 0):
                    raise DataError("--mu-x-col values must be positive")
                theta_x = np.log(mu_x_exact)
        else:
            raise ConfigError("precomputed x-fit needs --theta-x-col or --mu-x-col")
    else:
        xfit = glm.fit_logistic(data.z, data.x) if args.x_fit == "logistic" else glm.fit_poisson(data.z, data.x)
        theta_x = glm.predict_natural(xfit, data.z)

    if args.y_fit == "precomputed":
        if not args.mu_y_col:
            raise ConfigError("precomputed y-fit needs --mu-y-col")
        mu_y = _column(header, body, args.mu_y_col)
    else:
        spec = _parse_y_fit(args.y_fit)
        if spec == "negbin-mom":
            yfit = glm.fit_negbin(data.z, data.y, size="mom")
        elif spec == "negbin-ml":
            yfit = glm.fit_negbin(data.z, data.y, size="ml")
        elif isinstance(spec, tuple) and spec[0] == "negbin":
            yfit = glm.fit_negbin(data.z, data.y, size=spec[1])
        elif spec == "poisson":
            yfit = glm.fit_poisson(data.z, data.y)
        elif spec == "logistic":
            yfit = glm.fit_logistic(data.z, data.y)
        else:
            yfit = glm.fit_krr(data.z, data.y, kernel=spec[1])
        mu_y = glm.predict_mean(yfit, data.z)

    try:
        if mu_x_exact is not None:
            fits = FittedConditionals(theta_x=theta_x, mu_x=mu_x_exact, mu_y=mu_y, family=family)
        else:
            fits = FittedConditionals.from_theta(theta_x, mu_y, family)
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    rng = np.random.default_rng(args.seed)
    records = []
    for m in methods:
        try:
            if m == "spacrt":
                out = spacrt(data, fits)
            elif m == "dcrt":
                out = dcrt(data, fits, M=args.dcrt_m, rng=rng)
            elif m == "gcm":
                out = gcm(data, fits)
            else:
                out = score_test_nb(data)
        except Exception as exc:
            raise NumericalFailure(f"method {m} failed: {exc!r}") from exc
        rec = {
            "schema_version": SCHEMA_VERSION,
            "method": m,
            "statistic": out.statistic,
            "p_left": out.p_left,
            "p_right": out.p_right,
            "p_two": out.p_two,
            "fallback": bool(out.fallback_used),
            "degenerate": bool(out.degenerate),
        }
        if out.spa_detail is not None:
            rec["s_hat"] = out.spa_detail.s_hat
            rec["lambda"] = out.spa_detail.lam
            rec["r"] = out.spa_detail.r
            rec["solver_status"] = out.spa_detail.status.value
        if args.with_timing:
            rec["elapsed_s"] = out.elapsed
        records.append(rec)
    _atomic_write(args.output, "".join(json.dumps(_jsonable(r)) + "\n" for r in records))
    return EXIT_OK


class NumericalFailure(Exception):
    pass


# ------------------------------------------------------------- simulate ----


def cmd_simulate(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    alphas = tuple(float(a) for a in args.alpha.split(","))
    if args.scenario == "crispr":
        scenario = CrisprParams(
            gamma0=args.gamma0,
            beta0=args.beta0,
            rho=args.rho,
            size=args.size,
            n=args.n,
            seed=args.seed,
        )
        report = run_replications(
            scenario,
            methods,
            n_reps=args.reps,
            alpha_grid=alphas,
            parallelism=args.threads,
            dcrt_m=args.dcrt_m,
        )
        payload = {
            "schema_version": SCHEMA_VERSION,
            "tool_version": __version__,
            "scenario": {"kind": "crispr", **scenario.__dict__},
            "n_reps": report.n_reps,
            "n_failed": report.n_failed,
            "per_replicate": report.p_values,
            "summary": {
                "rejection": {
                    m: {s: {str(a): report.rejection[m][s][a] for a in alphas} for s in ("left", "right", "two")}
                    for m in report.methods
                },
                "mean_test_time_s": report.mean_time,
                "mean_fit_time_s": report.fit_time,
                "fallback_rate": report.fallback_rate,
            },
        }
    elif args.scenario == "gwas":
        params = GwasParams(
            d=args.d,
            n=args.n,
            n_states=args.k_states,
            stay_prob=args.stay_prob,
            emission_alpha=args.emission_alpha,
            emission_beta=args.emission_beta,
            gamma0=args.gamma0,
            eta=args.eta,
            seed=args.seed,
        )
        report = run_gwas_replications(
            params, methods, n_reps=args.reps, q=args.q, dcrt_m=args.dcrt_m, lasso_rule=args.lasso_rule
        )
        payload = {
            "schema_version": SCHEMA_VERSION,
            "tool_version": __version__,
            "scenario": {"kind": "gwas", **params.__dict__},
            "n_reps": report.n_reps,
            "per_replicate": {"fdr": report.fdr, "power": report.power},
            "summary": {
                "fdr_mean": {m: float(report.fdr[m].mean()) for m in report.methods},
                "power_mean": {m: float(report.power[m].mean()) for m in report.methods},
                "mean_test_time_s": report.mean_time,
                "fallback_rate": report.fallback_rate,
            },
        }
    else:
        raise ConfigError(f"unknown scenario {args.scenario!r}")
    _atomic_write(args.output, json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ----------------------------------------------------------------- bench ----


def cmd_bench(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    known = {"spacrt", "dcrt", "gcm", "score_nb"}
    for m in methods:
        if m not in known:
            raise ConfigError(f"unknown method {m!r}")
    scenario = CrisprParams(
        gamma0=args.gamma0, beta0=args.beta0, rho=args.rho, size=args.size, n=args.n, seed=args.seed
    )
    times = {m: [] for m in methods}
    for k in range(args.hypotheses):
        rng = np.random.default_rng(args.seed ^ k)
        data = simulate_crispr(scenario, rng)
        fits = fit_conditionals(data)
        for m in methods:
            t0 = time.perf_counter()
            if m == "spacrt":
                spacrt(data, fits)
            elif m == "dcrt":
                dcrt(data, fits, M=args.dcrt_m, rng=rng)
            elif m == "gcm":
                gcm(data, fits)
            else:
                score_test_nb(data)
            times[m].append(time.perf_counter() - t0)
    table = {
        m: {"mean_s": float(np.mean(v)), "std_s": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0}
        for m, v in times.items()
    }
    payload = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "config": {"n": args.n, "hypotheses": args.hypotheses, "dcrt_m": args.dcrt_m, "seed": args.seed},
        "per_test_seconds": table,
    }
    _atomic_write(args.output, json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ----------------------------------------------------------------- parser ----


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spacrt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_test = sub.add_parser("test", help="run CI tests on a delimited table")
    p_test.add_argument("--input", required=True)
    p_test.add_argument("--output", required=True)
    p_test.add_argument("--methods", default="spacrt,gcm")
    p_test.add_argument("--delimiter", default=None)
    p_test.add_argument("--x-col", required=True)
    p_test.add_argument("--y-col", required=True)
    p_test.add_argument("--z-cols", default="")
    p_test.add_argument("--family", choices=["bernoulli", "poisson"], default="bernoulli")
    p_test.add_argument("--x-fit", choices=["logistic", "poisson", "precomputed"], default="logistic")
    p_test.add_argument("--y-fit", default="negbin-mom",
                        help="negbin-mom | negbin-ml | negbin:R | poisson | logistic | "
                             "krr:linear | krr:gaussian:BW | precomputed")
    p_test.add_argument("--theta-x-col", default=None)
    p_test.add_argument("--mu-x-col", default=None)
    p_test.add_argument("--mu-y-col", default=None)
    p_test.add_argument("--dcrt-m", type=int, default=10000)
    p_test.add_argument("--seed", type=int, default=0)
    p_test.add_argument("--with-timing", action="store_true",
                        help="include wall times in records (breaks byte-level determinism)")
    p_test.set_defaults(func=cmd_test)

    p_sim = sub.add_parser("simulate", help="run a named simulation scenario")
    p_sim.add_argument("--scenario", choices=["crispr", "gwas"], required=True)
    p_sim.add_argument("--output", required=True)
    p_sim.add_argument("--methods", default="spacrt,gcm")
    p_sim.add_argument("--reps", type=int, default=50)
    p_sim.add_argument("--alpha", default="0.05,0.005")
    p_sim.add_argument("--q", type=float, default=0.1)
    p_sim.add_argument("--dcrt-m", type=int, default=10000)
    p_sim.add_argument("--seed", type=int, required=True)
    p_sim.add_argument("--threads", type=int, default=_default_threads())
    p_sim.add_argument("--gamma0", type=float, default=-5.0)
    p_sim.add_argument("--beta0", type=float, default=-5.0)
    p_sim.add_argument("--rho", type=float, default=0.0)
    p_sim.add_argument("--size", type=float, default=1.0)
    p_sim.add_argument("--n", type=int, default=5000)
    p_sim.add_argument("--d", type=int, default=500)
    p_sim.add_argument("--eta", type=float, default=0.0)
    p_sim.add_argument("--k-states", type=int, default=10)
    p_sim.add_argument("--stay-prob", type=float, default=0.9)
    p_sim.add_argument("--emission-alpha", type=float, default=1.0)
    p_sim.add_argument("--emission-beta", type=float, default=3.0)
    p_sim.add_argument("--lasso-rule", choices=["1se", "min"], default="1se")
    p_sim.set_defaults(func=cmd_simulate)

    p_bench = sub.add_parser("bench", help="benchmark per-hypothesis test times")
    p_bench.add_argument("--output", required=True)
    p_bench.add_argument("--methods", default="spacrt,dcrt,gcm")
    p_bench.add_argument("--hypotheses", type=int, default=20)
    p_bench.add_argument("--dcrt-m", type=int, default=10000)
    p_bench.add_argument("--seed", type=int, required=True)
    p_bench.add_argument("--n", type=int, default=5000)
    p_bench.add_argument("--gamma0", type=float, default=-3.0)
    p_bench.add_argument("--beta0", type=float, default=-5.0)
    p_bench.add_argument("--rho", type=float, default=0.0)
    p_bench.add_argument("--size", type=float, default=1.0)
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed a message; map its failure to config
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except DataError as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except NumericalFailure as exc:
        return _fail(EXIT_NUMERICAL, "numerical", str(exc))
    except ValueError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))


if __name__ == "__main__":
    sys.exit(main())
