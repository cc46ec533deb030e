"""Command-line front end: ``pmme-lab <command> [options]``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure, 64 unknown command.
Commands that draw random numbers need ``--seed`` (or ``PMME_LAB_SEED``).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._io import read_json, write_json
from .experiment import TABLE_I, PreparationSet, ReadoutModel, load_dataset, save_dataset, simulate_dataset
from .experiment import write_probabilities_csv
from .fit import (
    FitConfig,
    FitResult,
    aic_rank,
    fit_model,
    ranking_to_dict,
    validate_predictions,
    write_reports_csv,
)
from .model import ModelParams
from .nonmark import (
    DEFAULT_PAIRS,
    model_distance_series,
    n_measure_data_ci,
    n_measure_model,
    write_distance_csv,
)
from .qstate import NAMED_STATES
from .recon import DEFAULT_RESAMPLES, bayes_unfold, reconstruct_series
from .solver import build_propagator, choi_check, trajectory, write_trajectory_csv

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2, 64
SEED_ENV = "PMME_LAB_SEED"
COMMANDS = ("simulate", "mitigate", "tomo", "fit", "predict", "validate", "nonmark", "cpcheck", "report")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- argument helpers ---------------------------------------------------------

def parse_times(spec: str) -> np.ndarray:
    """``log:a:b:n`` (geometric), ``lin:a:b:n`` (uniform) or a comma list, in us."""
    try:
        if spec.startswith(("log:", "lin:")):
            kind, a, b, n = spec.split(":")
            a, b, n = float(a), float(b), int(n)
            return np.geomspace(a, b, n) if kind == "log" else np.linspace(a, b, n)
        return np.array([float(x) for x in spec.split(",") if x.strip()])
    except ValueError:
        raise UsageError(f"cannot parse times {spec!r}; use log:a:b:n, lin:a:b:n or a comma list") from None


def parse_preps(spec: str) -> PreparationSet:
    if spec == "tableI":
        return TABLE_I
    if spec.endswith(".json") or Path(spec).is_file():
        return PreparationSet.from_list(read_json(spec))
    entries = []
    for name in spec.split(","):
        if name in TABLE_I.labels:
            entries.append((name, TABLE_I[name]))
        elif name in NAMED_STATES:
            entries.append((name, NAMED_STATES[name]))
        else:
            raise UsageError(f"unknown preparation {name!r}")
    return PreparationSet(tuple(entries))


def parse_state(spec: str) -> tuple[str, np.ndarray]:
    if spec in TABLE_I.labels:
        return spec, TABLE_I[spec].as_array()
    if spec in NAMED_STATES:
        return spec, np.array(NAMED_STATES[spec])
    try:
        v = np.array([float(x) for x in spec.split(",")])
    except ValueError:
        raise UsageError(f"unknown state {spec!r}") from None
    if v.shape != (3,):
        raise UsageError("a Bloch vector needs three components")
    return spec, v


def parse_list(spec: str) -> list[str]:
    return [s for s in spec.split(",") if s]


def resolve_seed(args, required: bool = True):
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer") from None
    if required:
        raise UsageError(f"command {args.command!r} draws random numbers: pass --seed or set {SEED_ENV}")
    return None


def _provenance(args, extra: dict | None = None) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config_file")}
    doc = {"tool": "pmme-lab", "version": __version__, "command": args.command, "config": config}
    if not args.no_timestamp:
        doc["timestamp"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    doc.update(extra or {})
    return doc


def _load_theta(path) -> ModelParams:
    doc = read_json(path)
    if isinstance(doc, dict) and "theta" in doc and isinstance(doc["theta"], dict):
        doc = doc["theta"]
    return ModelParams.from_dict(doc)


def _load_fits(path) -> tuple[list[FitResult], dict]:
    doc = read_json(path)
    if not isinstance(doc, dict) or "fits" not in doc:
        raise UsageError(f"{path} is not a fits document")
    return [FitResult.from_dict(d) for d in doc["fits"]], doc


def _select_fit(fits: list[FitResult], model: str | None) -> FitResult:
    if model is None:
        return min(fits, key=lambda r: (r.aic, r.n_params))
    for r in fits:
        if r.model_id == model:
            return r
    raise UsageError(f"no {model} fit in the fits file")


def _out(args, default: str) -> str:
    return args.output or default


# -- commands -----------------------------------------------------------------

def cmd_simulate(args) -> dict:
    seed = resolve_seed(args)
    theta = _load_theta(args.theta)
    readout = None
    if args.readout:
        readout = ReadoutModel(read_json(args.readout))
    elif args.readout_error:
        p10, p01 = (float(x) for x in args.readout_error.split(","))
        readout = ReadoutModel.from_error_rates(p10, p01)
    meta = {"spectator": args.spectator} if args.spectator else {}
    if not args.no_timestamp:
        meta["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    ds = simulate_dataset(theta, parse_preps(args.preps), parse_times(args.times), args.shots, readout, seed, meta)
    out = _out(args, "data.json")
    save_dataset(ds, out)
    if args.probabilities_csv:
        write_probabilities_csv(ds, args.probabilities_csv)
    return {"output": out, "records": len(ds.records)}


def cmd_mitigate(args) -> dict:
    ds = load_dataset(args.data)
    M = ds.readout.matrix if ds.readout is not None else np.eye(2)
    rows = []
    for r in ds.records:
        f = r.frequency
        t = bayes_unfold([1 - f, f], M, args.iterations)
        rows.append({"prep": r.prep_label, "t": r.t, "basis": r.basis, "f_observed": f, "f_mitigated": t[1]})
    doc = _provenance(args, {"readout_present": ds.readout is not None, "records": rows})
    out = _out(args, "mitigated.json")
    write_json(doc, out)
    return {"output": out, "records": len(rows)}


def _series(ds, labels, args, seed):
    return [reconstruct_series(ds, lbl, mitigate=not args.no_mitigate, resamples=args.resamples, seed=seed)
            for lbl in labels]


def cmd_tomo(args) -> dict:
    seed = resolve_seed(args)
    ds = load_dataset(args.data)
    labels = ds.preps.labels if args.prep == "all" else parse_list(args.prep)
    series = _series(ds, labels, args, seed)
    doc = _provenance(args, {"seed": seed, "series": [s.to_dict() for s in series]})
    out = _out(args, "series.json")
    write_json(doc, out)
    if args.csv_prefix:
        for s in series:
            s.write_csv(f"{args.csv_prefix}{s.prep_label}.csv")
    return {"output": out, "series": labels}


def _fit_config(args, model: str, seed: int) -> FitConfig:
    return FitConfig(model, args.multistart, args.tol, seed, args.max_iter, args.jobs, args.bootstrap)


def _fit_all(series, models, args, seed) -> list[FitResult]:
    done: dict[str, FitResult] = {}
    for m in sorted(models, key=lambda m: {"M0": 0, "M1": 1, "M2": 2}[m]):
        done[m] = fit_model(series, _fit_config(args, m, seed), [r.theta for r in done.values()])
    return [done[m] for m in models]


def cmd_fit(args) -> dict:
    seed = resolve_seed(args)
    ds = load_dataset(args.data)
    labels = parse_list(args.prep)
    models = parse_list(args.models)
    series = _series(ds, labels, args, seed)
    fits = _fit_all(series, models, args, seed)
    ranking = aic_rank(fits)
    doc = _provenance(args, {
        "seed": seed,
        "tomography": {"preps": labels, "resamples": args.resamples, "mitigate": not args.no_mitigate},
        "fits": [f.to_dict() for f in fits],
        "ranking": ranking_to_dict(ranking),
    })
    out = _out(args, "fits.json")
    write_json(doc, out)
    return {"output": out, "best": ranking[0].model_id}


def cmd_predict(args) -> dict:
    fits, _ = _load_fits(args.fits)
    fit = _select_fit(fits, args.model)
    label, v0 = parse_state(args.state)
    times = parse_times(args.times)
    traj = trajectory(fit.theta, v0, times)
    out = _out(args, "trajectory.csv")
    if out.endswith(".json"):
        write_json(_provenance(args, {"model": fit.model_id, "state": label,
                                      "t": times, "bloch": traj}), out)
    else:
        write_trajectory_csv(out, times, traj)
    return {"output": out, "model": fit.model_id}


def cmd_validate(args) -> dict:
    fits, fdoc = _load_fits(args.fits)
    ds = load_dataset(args.data)
    labels = parse_list(args.preps)
    tomo = fdoc.get("tomography", {})
    # distances do not depend on the bootstrap, so no resampling here
    series = [reconstruct_series(ds, lbl, mitigate=tomo.get("mitigate", True), resamples=0) for lbl in labels]
    models = parse_list(args.models) if args.models else [f.model_id for f in fits]
    reports = [validate_predictions(_select_fit(fits, m), series) for m in models]
    out = _out(args, "validation.csv")
    if out.endswith(".json"):
        write_json(_provenance(args, {"reports": [r.to_dict() for r in reports]}), out)
    else:
        write_reports_csv(reports, out)
    return {"output": out, "medians": {r.model_id: r.p50 for r in reports}}


def cmd_nonmark(args) -> dict:
    results = []
    pairs = [tuple(parse_list(p)) for p in args.pair] if args.pair else list(DEFAULT_PAIRS)
    for pair in pairs:
        if len(pair) != 2:
            raise UsageError(f"a pair needs two states, got {pair}")
    if args.fits:
        fits, _ = _load_fits(args.fits)
        models = parse_list(args.models) if args.models else [f.model_id for f in fits]
        for m in models:
            fit = _select_fit(fits, m)
            for pair in pairs:
                rep = n_measure_model(fit.theta, [parse_state(p)[1] for p in pair], args.horizon)
                d = rep.to_dict()
                d.update(model=m, pair=list(pair))
                results.append(d)
    if args.data:
        seed = resolve_seed(args)
        ds = load_dataset(args.data)
        for pair in [tuple(parse_list(p)) for p in args.data_pair]:
            s1, s2 = (reconstruct_series(ds, lbl, resamples=args.resamples, seed=seed) for lbl in pair)
            rep = n_measure_data_ci(s1, s2, args.ci_resamples, seed)
            d = rep.to_dict()
            d.update(model="data", pair=list(pair))
            results.append(d)
    if not results:
        raise UsageError("nonmark needs --fits and/or --data")
    out = _out(args, "nonmark.json")
    write_json(_provenance(args, {"results": results}), out)
    return {"output": out, "N": [r["N"] for r in results]}


def cmd_cpcheck(args) -> dict:
    if args.theta:
        theta, model = _load_theta(args.theta), None
    elif args.fits:
        fit = _select_fit(_load_fits(args.fits)[0], args.model)
        theta, model = fit.theta, fit.model_id
    else:
        raise UsageError("cpcheck needs --theta or --fits")
    prop = build_propagator(theta)
    rows = []
    for t in parse_times(args.times):
        rep = choi_check(prop, theta, float(t))
        rows.append({"t": rep.time, "eigenvalues": [complex(x) for x in rep.eigenvalues],
                     "cp_ok": rep.cp_ok, "margin": rep.margin})
    doc = _provenance(args, {"model": model, "theta": theta.to_dict(), "all_cp": all(r["cp_ok"] for r in rows),
                             "violations": [r["t"] for r in rows if not r["cp_ok"]], "checks": rows})
    out = _out(args, "cpcheck.json")
    write_json(doc, out)
    return {"output": out, "all_cp": doc["all_cp"]}


def cmd_report(args) -> dict:
    """Full pipeline bundle: series, fits, ranking, trajectories, prediction distances, BLP measure."""
    seed = resolve_seed(args)
    ds = load_dataset(args.data)
    outdir = Path(_out(args, "report"))
    outdir.mkdir(parents=True, exist_ok=True)
    fit_labels = parse_list(args.prep)
    test_labels = parse_list(args.test_preps) if args.test_preps else [
        lbl for lbl in ds.preps.labels if lbl not in fit_labels]
    models = parse_list(args.models)
    fit_series = _series(ds, fit_labels, args, seed)
    test_series = _series(ds, test_labels, args, seed)
    fits = _fit_all(fit_series, models, args, seed)
    ranking = aic_rank(fits)
    files = []

    for s in fit_series + test_series:
        name = f"series_{s.prep_label}.csv"
        s.write_csv(outdir / name)
        files.append(name)
    dense = np.linspace(0.0, float(max(s.times[-1] for s in fit_series)), 501)
    for f in fits:
        for s in fit_series + test_series:
            name = f"trajectory_{f.model_id}_{s.prep_label}.csv"
            write_trajectory_csv(outdir / name, dense, trajectory(f.theta, s.v0, dense))
            files.append(name)
    fit_reports = [validate_predictions(f, fit_series, allow_fit_series=True) for f in fits]
    test_reports = [validate_predictions(f, test_series) for f in fits] if test_series else []
    write_reports_csv(fit_reports, outdir / "distances_fit.csv")
    files.append("distances_fit.csv")
    if test_reports:
        write_reports_csv(test_reports, outdir / "distances_test.csv")
        files.append("distances_test.csv")
    nm = []
    for f in fits:
        for pair in DEFAULT_PAIRS:
            rep = n_measure_model(f.theta, pair, args.horizon)
            d = rep.to_dict()
            d.update(model=f.model_id)
            nm.append(d)
            name = f"distance_{f.model_id}_{pair[0]}_{pair[1]}.csv"
            write_distance_csv(model_distance_series(f.theta, pair, dense), outdir / name)
            files.append(name)
    cp = {}
    grid = np.linspace(0.0, args.horizon, 201)
    for f in fits:
        prop = build_propagator(f.theta)
        cp[f.model_id] = [float(t) for t in grid if not choi_check(prop, f.theta, float(t)).cp_ok]
    doc = _provenance(args, {
        "seed": seed,
        "fit_preps": fit_labels,
        "test_preps": test_labels,
        "fits": [f.to_dict() for f in fits],
        "ranking": ranking_to_dict(ranking),
        "fit_distances": [r.to_dict() for r in fit_reports],
        "test_distances": [r.to_dict() for r in test_reports],
        "nonmarkovianity": nm,
        "cp_violation_times": cp,
        "files": sorted(files),
    })
    write_json(doc, outdir / "report.json")
    return {"output": str(outdir), "best": ranking[0].model_id}


# -- parser -------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, seed: bool = False):
    p.add_argument("-o", "--output", help="output path")
    p.add_argument("--config", dest="config_file", help="JSON file of defaults keyed by flag name")
    p.add_argument("--no-timestamp", action="store_true", help="omit wall-clock timestamps (reproducible output)")
    p.add_argument("-v", "--verbose", action="store_true")
    if seed:
        p.add_argument("--seed", type=int, help=f"random seed (falls back to ${SEED_ENV})")


def _fit_flags(p):
    p.add_argument("--models", default="M0,M1,M2")
    p.add_argument("--multistart", type=int, default=16)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iter", type=int, default=20000)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--bootstrap", type=int, default=0, help="parametric-bootstrap refits for CIs")


def _tomo_flags(p):
    p.add_argument("--resamples", type=int, default=DEFAULT_RESAMPLES)
    p.add_argument("--no-mitigate", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pmme-lab", description="Post-Markovian master equation tomography toolkit")
    parser.add_argument("--version", action="version", version=f"pmme-lab {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic tomography dataset")
    _common(p, seed=True)
    p.add_argument("--theta", required=True, help="JSON parameter file")
    p.add_argument("--preps", default="tableI")
    p.add_argument("--times", default="log:0.1:100:25")
    p.add_argument("--shots", type=int, default=8192, help="0 stores exact probabilities")
    p.add_argument("--readout", help="JSON 2x2 response matrix")
    p.add_argument("--readout-error", help="P(1|0),P(0|1)")
    p.add_argument("--spectator", help="spectator configuration label stored in metadata")
    p.add_argument("--probabilities-csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mitigate", help="Bayesian unfolding of every record")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--iterations", type=int, default=100)
    p.set_defaults(func=cmd_mitigate)

    p = sub.add_parser("tomo", help="reconstruct Bloch series")
    _common(p, seed=True)
    _tomo_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--prep", default="all")
    p.add_argument("--csv-prefix")
    p.set_defaults(func=cmd_tomo)

    p = sub.add_parser("fit", help="fit models and rank them by AIC")
    _common(p, seed=True)
    _tomo_flags(p)
    _fit_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--prep", default="psi0")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="trajectory from a fitted model")
    _common(p)
    p.add_argument("--fits", required=True)
    p.add_argument("--model")
    p.add_argument("--state", default="psi0")
    p.add_argument("--times", default="lin:0:100:501")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("validate", help="prediction distances on held-out preparations")
    _common(p)
    p.add_argument("--fits", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--preps", default="psi1,psi2,psi3,psi4")
    p.add_argument("--models")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("nonmark", help="BLP non-Markovianity from models and/or data")
    _common(p, seed=True)
    p.add_argument("--fits")
    p.add_argument("--models")
    p.add_argument("--pair", action="append", help="two states, e.g. plus,minus (repeatable)")
    p.add_argument("--horizon", type=float, default=100.0)
    p.add_argument("--data")
    p.add_argument("--data-pair", action="append", default=[], help="two preparation labels in the dataset")
    p.add_argument("--resamples", type=int, default=DEFAULT_RESAMPLES)
    p.add_argument("--ci-resamples", type=int, default=200)
    p.set_defaults(func=cmd_nonmark)

    p = sub.add_parser("cpcheck", help="Choi-matrix positivity over a time grid")
    _common(p)
    p.add_argument("--theta")
    p.add_argument("--fits")
    p.add_argument("--model")
    p.add_argument("--times", default="lin:0:100:101")
    p.set_defaults(func=cmd_cpcheck)

    p = sub.add_parser("report", help="end-to-end bundle of JSON and plot-ready CSV")
    _common(p, seed=True)
    _tomo_flags(p)
    _fit_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--prep", default="psi0")
    p.add_argument("--test-preps")
    p.add_argument("--horizon", type=float, default=100.0)
    p.set_defaults(func=cmd_report)
    return parser


def _config_path(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Install ``--config`` values as subcommand defaults, then parse so explicit flags win."""
    path = _config_path(argv)
    if path and argv and argv[0] in COMMANDS:
        cfg = read_json(path)
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        command = argv[0]
        sub = parser._subparsers._group_actions[0].choices[command]
        known = {a.dest for a in sub._actions}
        defaults = {}
        for key, value in cfg.items():
            dest = key.lstrip("-").replace("-", "_")
            if dest not in known or dest in ("config_file", "help"):
                raise UsageError(f"unknown config key {key!r} for {command}")
            defaults[dest] = value
        sub.set_defaults(**defaults)
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv or (argv[0] not in COMMANDS and not argv[0].startswith("-")):
        parser.print_usage(sys.stderr)
        if argv:
            print(f"pmme-lab: unknown command {argv[0]!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = _apply_config(parser, argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        summary = args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (ArithmeticError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"pmme-lab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"pmme-lab: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.verbose:
        print(json.dumps(summary, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
