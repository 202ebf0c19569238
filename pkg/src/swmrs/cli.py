"""Command-line interface: ``swmrs analyze | ics-test | simulate | validate``.

Exit codes: 0 success, 1 unexpected error, 2 invalid input or configuration,
3 model fitting failure.  With ``--json`` the report (or a structured error)
is printed to stdout; human-readable messages go to stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .data import atomic_write_text, derive_layout, load_trial_csv
from .errors import FitError, InvalidConfig, SwmrsError, ValidationError
from .estimands import ALL_KINDS, EstimandKind, resolve_weights
from .inference import (
    LOCO_POLICIES, global_test_from_replicates, loco_replicates, pairwise_test_from_replicates,
    summarize,
)
from .models import WorkingModelSpec, preset
from .simulation import SCENARIOS, ScenarioConfig, run_monte_carlo, true_estimands
from .standardization import Method, parse_method

EXIT_OK, EXIT_UNEXPECTED, EXIT_VALIDATION, EXIT_FIT = 0, 1, 2, 3

DATA_DEFAULTS = {
    "input": None, "col_cluster": "cluster", "col_period": "period",
    "col_treatment": "treatment", "col_outcome": "outcome", "covariates": None,
}
DEFAULTS = {
    "analyze": {**DATA_DEFAULTS, "estimand": "all", "scale": "rd", "model": "W1",
                "methods": None, "no_covariates": False, "include_unadjusted": False,
                "loco_degenerate": "error", "out": None, "csv": None, "seed": 0,
                "threads": None, "dump_replicates": None},
    "ics-test": {**DATA_DEFAULTS, "test": "all", "scale": "rd", "model": None,
                 "no_covariates": False, "loco_degenerate": "error", "out": None, "seed": 0,
                 "threads": None, "dump_replicates": None},
    "simulate": {"scenario": "C1", "reps": 200, "clusters": 30, "periods": None, "seed": 2024,
                 "delta": 0.0, "truth_clusters": 100_000, "x2_var": None, "methods": "unadj",
                 "estimand": "all", "loco_degenerate": "error", "no_jackknife": False,
                 "out": None, "long_out": None, "dump": None, "report": None, "threads": None},
    "validate": {**DATA_DEFAULTS, "out": None},
}


# helpers ---------------------------------------------------------------------------

def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, Path):
        return str(o)
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"not serializable: {type(o).__name__}")


def dumps(obj):
    return json.dumps(obj, indent=2, default=_jsonable, allow_nan=True)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_config(command, given: dict, config_path=None):
    """Defaults, overridden by the JSON config file, overridden by flags."""
    cfg = dict(DEFAULTS[command])
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config {config_path}: {exc}", path=str(config_path))
        if not isinstance(loaded, dict):
            raise InvalidConfig("config file must hold a JSON object", path=str(config_path))
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise InvalidConfig(f"unknown config keys: {', '.join(unknown)}", keys=",".join(unknown))
        cfg.update(loaded)
    cfg.update({k: v for k, v in given.items() if k in cfg})
    return cfg


def _split(v):
    if v is None:
        return None
    if isinstance(v, (list, tuple)):
        return [str(x).strip() for x in v]
    return [x.strip() for x in str(v).split(",") if x.strip()]


def _kinds(token):
    toks = _split(token) or ["all"]
    if any(t.lower() == "all" for t in toks):
        return list(ALL_KINDS)
    try:
        return [EstimandKind.parse(t) for t in toks]
    except ValueError as exc:
        raise InvalidConfig(str(exc))


def _load(cfg):
    if not cfg.get("input"):
        raise InvalidConfig("an input CSV is required (--input)")
    path = Path(cfg["input"])
    if not path.is_file():
        raise InvalidConfig(f"input file not found: {path}", path=str(path))
    schema = {r: cfg[f"col_{r}"] for r in ("cluster", "period", "treatment", "outcome")}
    return load_trial_csv(path, schema, _split(cfg.get("covariates"))), file_sha256(path)


def _model_spec(model, no_covariates=False):
    if model is None:
        return None, None
    if isinstance(model, dict):
        spec, name = WorkingModelSpec.from_dict(model), str(model.get("preset", "custom")).upper()
    else:
        spec, name = preset(model), str(model).upper()
    spec.validate()
    if no_covariates:
        spec, name = spec.without_covariates(), name + "-nocov"
    return spec, name


def _methods(cfg):
    methods = []
    nocov = cfg.get("no_covariates", False)
    if cfg.get("methods"):
        for tok in _split(cfg["methods"]):
            try:
                m = parse_method(tok)
            except ValueError as exc:
                raise InvalidConfig(str(exc))
            if nocov and m.model is not None:
                m = Method(m.kind, m.model.without_covariates(), m.name + "-nocov")
            methods.append(m)
    else:
        spec, name = _model_spec(cfg.get("model"), nocov)
        methods.append(Method("unadj", None, "unadj") if spec is None else
                       Method("mrs", spec, f"mrs:{name}"))
        if cfg.get("include_unadjusted") and spec is not None:
            methods.append(Method("unadj", None, "unadj"))
    return methods


def _emit(report, cfg, args, human):
    if cfg.get("out"):
        atomic_write_text(cfg["out"], dumps(report) + "\n")
    if args.json:
        print(dumps(report))
    else:
        print(human)


def _fits_report(fits):
    return [fit.to_dict() for fit in fits.values()]


# commands -----------------------------------------------------------------------------

def cmd_analyze(cfg, args):
    data, digest = _load(cfg)
    methods = _methods(cfg)
    kinds = _kinds(cfg["estimand"])
    reps = loco_replicates(data, methods, cfg["scale"], kinds, cfg["loco_degenerate"],
                           cfg["threads"])
    results = summarize(reps)
    rows = [r.to_dict() for r in results]
    if cfg.get("csv"):
        frame = pd.DataFrame([{k: v for k, v in r.items() if k != "sigma"} for r in rows])
        atomic_write_text(cfg["csv"], frame.to_csv(index=False))
    if cfg.get("dump_replicates"):
        atomic_write_text(cfg["dump_replicates"], reps.to_frame().to_csv(index=False))
    report = {"command": "analyze", "version": __version__, "config": cfg,
              "input_sha256": digest, "n_clusters": data.n_clusters,
              "n_periods": data.n_periods, "n_rows": data.n_rows, "estimates": rows,
              "models": _fits_report(reps.fits),
              "dropped_replicates": [data.cluster_labels[g] for g in np.flatnonzero(~reps.valid)],
              "dropped_periods": {str(data.cluster_labels[g]): p
                                  for g, p in reps.dropped_periods.items()}}
    lines = [f"{'method':<16}{'estimand':<9}{'estimate':>11}{'se':>10}   95% CI"]
    for r in results:
        lines.append(f"{r.method:<16}{r.kind.value:<9}{r.estimate:>11.4f}{r.se:>10.4f}"
                     f"   [{r.ci[0]:.4f}, {r.ci[1]:.4f}]")
    _emit(report, cfg, args, "\n".join(lines))
    return report


def cmd_ics_test(cfg, args):
    data, digest = _load(cfg)
    spec, name = _model_spec(cfg.get("model"), cfg.get("no_covariates", False))
    method = Method("unadj", None, "unadj") if spec is None else Method("mrs", spec, f"mrs:{name}")
    tests = _split(cfg["test"]) or ["all"]
    tests = ["h", "v", "global"] if "all" in [t.lower() for t in tests] else [t.lower() for t in tests]
    bad = [t for t in tests if t not in ("h", "v", "global")]
    if bad:
        raise InvalidConfig(f"unknown test {bad[0]!r}; use h, v, global or all")
    reps = loco_replicates(data, [method], cfg["scale"], ALL_KINDS, cfg["loco_degenerate"],
                           cfg["threads"])
    out = []
    for t in tests:
        res = global_test_from_replicates(reps) if t == "global" else \
            pairwise_test_from_replicates(reps, t)
        out.append(res.to_dict())
    if cfg.get("dump_replicates"):
        atomic_write_text(cfg["dump_replicates"], reps.to_frame().to_csv(index=False))
    report = {"command": "ics-test", "version": __version__, "config": cfg,
              "input_sha256": digest, "method": method.name, "tests": out}
    human = "\n".join(f"{r['test']:<8} statistic={r['statistic']:.4f} df=({r['df_num']}, "
                      f"{r['df_den']}) p={r['p_value']:.4g}" for r in out)
    _emit(report, cfg, args, human)
    return report


def cmd_simulate(cfg, args):
    scenario = str(cfg["scenario"]).upper()
    if scenario not in SCENARIOS:
        raise InvalidConfig(f"scenario must be one of {', '.join(SCENARIOS)}")
    config = ScenarioConfig(scenario, int(cfg["clusters"]), cfg["periods"], int(cfg["seed"]),
                            int(cfg["reps"]), float(cfg["delta"]), int(cfg["truth_clusters"]),
                            cfg["x2_var"])
    methods = _split(cfg["methods"])
    truth = true_estimands(config)
    table = run_monte_carlo(config, methods, truth.as_dict(), _kinds(cfg["estimand"]),
                            cfg["threads"], not cfg["no_jackknife"], cfg["loco_degenerate"])
    if cfg.get("out"):
        table.to_csv(cfg["out"])
        long_out = cfg.get("long_out") or str(Path(cfg["out"]).with_suffix("")) + ".long.csv"
        long = table.frame.melt(id_vars=["estimand", "method"],
                                value_vars=["truth", "mean", "rbias", "mcsd", "aese", "cp",
                                            "completion"],
                                var_name="metric", value_name="value")
        atomic_write_text(long_out, long.to_csv(index=False))
    if cfg.get("dump"):
        atomic_write_text(cfg["dump"], table.replicates.to_csv(index=False))
    digest = hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()
    report = {"command": "simulate", "version": __version__, "config": cfg,
              "scenario": config.to_dict(), "input_sha256": digest,
              "truth": {"values": truth.as_dict(),
                        "se": dict(zip([k.value for k in ALL_KINDS], truth.se.tolist())),
                        "h-cate_cluster_mean": truth.hcate_cluster_mean},
              "metrics": table.frame.to_dict(orient="records")}
    if cfg.get("report"):
        atomic_write_text(cfg["report"], dumps(report) + "\n")
    if args.json:
        print(dumps(report))
    else:
        print(table.frame.to_string(index=False))
    return report


def cmd_validate(cfg, args):
    data, digest = _load(cfg)
    layout = derive_layout(data)
    schemes = {}
    for k in ALL_KINDS:
        try:
            resolve_weights(data, k, layout)
            schemes[k.value] = "ok"
        except ValidationError as exc:
            schemes[k.value] = str(exc)
    report = {"command": "validate", "version": __version__, "config": cfg,
              "input_sha256": digest, "n_rows": data.n_rows, "n_clusters": data.n_clusters,
              "n_periods": data.n_periods, "covariates": list(data.covariate_names),
              "treated_per_period": layout.treated_count.tolist(),
              "rollout_periods": layout.rollout_periods.tolist(),
              "min_cell_size": int(data.counts.min()), "estimands": schemes}
    human = (f"valid: {data.n_rows} rows, {data.n_clusters} clusters, {data.n_periods} periods; "
             f"treated per period {layout.treated_count.tolist()}")
    _emit(report, cfg, args, human)
    return report


COMMANDS = {"analyze": cmd_analyze, "ics-test": cmd_ics_test, "simulate": cmd_simulate,
            "validate": cmd_validate}


# parser -------------------------------------------------------------------------------

def _data_flags(p):
    p.add_argument("--input", "-i", help="long-format CSV, one row per individual")
    p.add_argument("--col-cluster")
    p.add_argument("--col-period")
    p.add_argument("--col-treatment")
    p.add_argument("--col-outcome")
    p.add_argument("--covariates", help="comma-separated covariate columns (default: all others)")


def _common(p):
    p.add_argument("--config", help="JSON file with option values", default=argparse.SUPPRESS)
    p.add_argument("--json", action="store_true", help="print the report as JSON on stdout")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="swmrs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"swmrs {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    kinds = "comma-separated subset of h-iate,h-cate,v-iate,v-cate or 'all'"

    a = sub.add_parser("analyze", argument_default=argparse.SUPPRESS,
                       help="estimate the four estimands with jackknife inference")
    _data_flags(a)
    a.add_argument("--estimand", help=kinds)
    a.add_argument("--scale", choices=("rd", "rr", "or"))
    a.add_argument("--model", help="working model preset (W1-W12, ANCOVA-I, ANCOVA-III)")
    a.add_argument("--methods", help="comma-separated methods, e.g. mrs:W4,coef:W4,unadj")
    a.add_argument("--no-covariates", action="store_true", help="drop covariates from the model")
    a.add_argument("--include-unadjusted", action="store_true")
    a.add_argument("--loco-degenerate", choices=LOCO_POLICIES)
    a.add_argument("--csv", help="write the estimate table as CSV")
    a.add_argument("--dump-replicates", help="write leave-one-out estimates as CSV")
    a.add_argument("--seed", type=int)
    a.add_argument("--threads", type=int)
    _common(a)

    t = sub.add_parser("ics-test", argument_default=argparse.SUPPRESS,
                       help="test for informative cluster size")
    _data_flags(t)
    t.add_argument("--test", help="h, v, global or all")
    t.add_argument("--scale", choices=("rd", "rr", "or"))
    t.add_argument("--model", help="working model preset; omit for the unadjusted estimator")
    t.add_argument("--no-covariates", action="store_true")
    t.add_argument("--loco-degenerate", choices=LOCO_POLICIES)
    t.add_argument("--dump-replicates", help="write leave-one-out estimates as CSV")
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=int)
    _common(t)

    s = sub.add_parser("simulate", argument_default=argparse.SUPPRESS,
                       help="Monte Carlo evaluation under a simulation scenario")
    s.add_argument("--scenario", help=", ".join(SCENARIOS))
    s.add_argument("--reps", type=int)
    s.add_argument("--clusters", type=int)
    s.add_argument("--periods", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--delta", type=float, help="informative-size effect multiplier")
    s.add_argument("--truth-clusters", type=int, help="super-population size for the truth")
    s.add_argument("--x2-var", type=float)
    s.add_argument("--methods", help="comma-separated, e.g. mrs:W1,coef:W1,unadj")
    s.add_argument("--estimand", help=kinds)
    s.add_argument("--loco-degenerate", choices=LOCO_POLICIES)
    s.add_argument("--no-jackknife", action="store_true", help="point estimates only")
    s.add_argument("--long-out", help="long-format metrics CSV (default: <out>.long.csv)")
    s.add_argument("--dump", help="per-replicate estimates CSV")
    s.add_argument("--report", help="JSON report path")
    s.add_argument("--threads", type=int)
    s.add_argument("--config", default=argparse.SUPPRESS)
    s.add_argument("--json", action="store_true")
    s.add_argument("--out", help="metrics CSV path")
    s.add_argument("-v", "--verbose", action="store_true")

    v = sub.add_parser("validate", argument_default=argparse.SUPPRESS,
                       help="check a dataset and report its design layout")
    _data_flags(v)
    _common(v)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.json = getattr(args, "json", False)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    given = {k: v for k, v in vars(args).items()
             if k not in ("command", "json", "config", "verbose")}
    try:
        cfg = resolve_config(args.command, given, getattr(args, "config", None))
        COMMANDS[args.command](cfg, args)
        return EXIT_OK
    except SwmrsError as exc:
        code = EXIT_FIT if isinstance(exc, FitError) else EXIT_VALIDATION
        err = {**exc.to_dict(), "exit_code": code}
    except Exception as exc:  # noqa: BLE001 - last-resort report
        code = EXIT_UNEXPECTED
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(f"swmrs {args.command}: {err['error']}: {err['message']}", file=sys.stderr)
    if args.json:
        print(dumps(err))
    return code


if __name__ == "__main__":
    sys.exit(main())
