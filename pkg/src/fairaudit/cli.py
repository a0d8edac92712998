"""Command-line front end.

Subcommands:

* ``audit``     — full metric-posterior report (JSON) plus figures.
* ``stability`` — bootstrap stability curves (CSV + JSON + figure).
* ``synth``     — semi-synthetic generation with analytic ground truth.
* ``crossent``  — held-out negative cross-entropy model comparison.
* ``mechanism`` — train a reference logistic-regression mechanism and
  emit the relabeled audit half.

Option resolution order: command line, then ``FAIRAUDIT_*`` environment
variables, then a ``--config`` JSON file, then built-in defaults.  Every
output embeds the resolved configuration and the seed; outputs are
byte-reproducible for a fixed config except for the ``generated_at``
timestamp.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from datetime import datetime, timezone

import numpy as np

from .data import (
    DataError,
    GroupIndex,
    Schema,
    bootstrap_sample,
    build_counts,
    load_dataset,
    write_dataset_csv,
)
from .harness import (
    FAMILY_BY_CODE,
    HarnessError,
    audit,
    default_grid,
    heldout_cross_entropy,
    l1_deviation,
    make_estimators,
    stability_curve,
    train_mechanism,
)
from .inference import FitOptions, InferenceError
from .metrics import EIGHTY_PERCENT_RULE_EPSILON, MetricError, empirical_table, epsilon_df, gamma_sf, GroupWeights
from .models import ModelError
from .seeds import derive_seed
from .synth import SynthError, SynthSpec, analytic_truth, generate, make_weights

ENV_PREFIX = "FAIRAUDIT_"

_OPTION_TYPES = {
    "schema": str,
    "data": str,
    "test": str,
    "out": str,
    "config": str,
    "mechanism_column": str,
    "models": str,
    "alpha": float,
    "favorable_only": bool,
    "threshold": float,
    "seed": int,
    "workers": int,
    "fraction": float,
    "bootstraps": int,
    "grid": str,
    "samples": int,
    "max_iters": int,
    "target": str,
    "metric": str,
    "delta": float,
    "cutoff": float,
    "scale": float,
    "check": bool,
    "features": str,
    "include_sample_values": bool,
    "no_figures": bool,
}

_DEFAULTS = {
    "models": "edf,nb,lr,hlr,dnn",
    "alpha": 1.0,
    "favorable_only": False,
    "threshold": EIGHTY_PERCENT_RULE_EPSILON,
    "seed": 0,
    "workers": os.cpu_count() or 1,
    "fraction": None,
    "bootstraps": 10,
    "grid": None,
    "samples": 1000,
    "max_iters": 3000,
    "target": "data",
    "metric": "df",
    "delta": 0.01,
    "cutoff": 2.5,
    "scale": 1.0,
    "check": False,
    "features": None,
    "mechanism_column": None,
    "include_sample_values": False,
    "no_figures": False,
    "out": "fairaudit-out",
}


def _coerce(key: str, raw):
    t = _OPTION_TYPES.get(key, str)
    if raw is None or isinstance(raw, bool) or not isinstance(raw, str):
        return raw
    if t is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if t is int:
        return int(raw)
    if t is float:
        return float(raw)
    return raw


def resolve_options(args: argparse.Namespace, keys: list[str]) -> dict:
    """Merge CLI args, environment, config file, and defaults."""
    cfg = {}
    config_path = getattr(args, "config", None) or os.environ.get(
        ENV_PREFIX + "CONFIG"
    )
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    resolved = {}
    for key in keys:
        val = getattr(args, key, None)
        if val is None:
            env = os.environ.get(ENV_PREFIX + key.upper())
            if env is not None:
                val = _coerce(key, env)
            elif key in cfg:
                val = _coerce(key, cfg[key])
        if val is None:
            val = _DEFAULTS.get(key)
        resolved[key] = val
    if config_path:
        resolved["config"] = config_path
    return resolved


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)!r}")


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        if math.isnan(obj):
            return "NaN"
        return "Infinity" if obj > 0 else "-Infinity"
    return obj


def dump_json(payload: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            _sanitize(payload), fh, indent=2, sort_keys=True, default=_json_default
        )
        fh.write("\n")


def _fail(errors: list[str], code: int = 2) -> int:
    print(json.dumps({"status": "error", "errors": errors}, indent=2))
    return code


def _validate_common(opts: dict, errors: list[str], need_data: bool = True) -> None:
    if not opts.get("schema"):
        errors.append("missing --schema")
    elif not os.path.exists(opts["schema"]):
        errors.append(f"schema file not found: {opts['schema']}")
    if need_data:
        if not opts.get("data"):
            errors.append("missing --data")
        elif not os.path.exists(opts["data"]):
            errors.append(f"data file not found: {opts['data']}")
    if opts.get("seed") is not None and opts["seed"] < 0:
        errors.append("--seed must be >= 0")
    if opts.get("workers") is not None and opts["workers"] < 1:
        errors.append("--workers must be >= 1")
    if opts.get("samples") is not None and opts["samples"] < 1:
        errors.append("--samples must be >= 1")
    if opts.get("alpha") is not None and opts["alpha"] <= 0:
        errors.append("--alpha must be > 0")
    models = opts.get("models")
    if models:
        for token in str(models).split(","):
            code = token.strip().upper().split("-")[0]
            if code and code not in FAMILY_BY_CODE:
                errors.append(
                    f"unknown model family {token.strip()!r}; allowed: "
                    + ", ".join(sorted(FAMILY_BY_CODE))
                )


def _load_inputs(opts: dict):
    schema = Schema.from_json(opts["schema"])
    if opts.get("mechanism_column"):
        schema = dataclasses.replace(
            schema, mechanism_column=opts["mechanism_column"]
        )
    dataset = load_dataset(opts["data"], schema)
    return schema, dataset


def _fit_options(opts: dict) -> FitOptions:
    return FitOptions(
        max_iters=opts["max_iters"],
        num_samples=opts["samples"],
        seed=opts["seed"],
    )


def _estimators(opts: dict, groups: GroupIndex, n_outcomes: int):
    tokens = str(opts["models"]).split(",")
    hyper = {
        "alpha": opts["alpha"],
        "alpha_class": opts["alpha"],
        "alpha_attr": opts["alpha"],
    }
    return make_estimators(tokens, groups, n_outcomes, hyper)


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


def _outdir(opts: dict) -> str:
    out = opts["out"]
    os.makedirs(out, exist_ok=True)
    return out


# ----------------------------------------------------------------------
# Subcommand runners
# ----------------------------------------------------------------------

_AUDIT_KEYS = [
    "schema", "data", "out", "mechanism_column", "models", "alpha",
    "favorable_only", "threshold", "seed", "workers", "samples",
    "max_iters", "include_sample_values", "no_figures",
]


def _run_audit(args) -> int:
    opts = resolve_options(args, _AUDIT_KEYS)
    errors: list[str] = []
    _validate_common(opts, errors)
    if errors:
        return _fail(errors)
    schema, dataset = _load_inputs(opts)
    groups = GroupIndex.from_schema(schema)
    estimators = _estimators(opts, groups, schema.n_outcomes)
    report = audit(
        dataset,
        estimators,
        _fit_options(opts),
        seed=opts["seed"],
        favorable_only=opts["favorable_only"],
        threshold=opts["threshold"],
        workers=opts["workers"],
    )
    out = _outdir(opts)
    payload = {
        "config": opts,
        "generated_at": _timestamp(),
        "report": report.to_dict(include_samples=opts["include_sample_values"]),
    }
    report_path = os.path.join(out, "audit_report.json")
    dump_json(payload, report_path)
    written = [report_path]
    if not opts["no_figures"]:
        from .plots import save_audit_figures

        written += save_audit_figures(report, os.path.join(out, "audit"))
    print(json.dumps({"status": "ok", "outputs": written}))
    return 0


_STABILITY_KEYS = [
    "schema", "data", "out", "mechanism_column", "models", "alpha",
    "favorable_only", "seed", "workers", "samples", "max_iters",
    "bootstraps", "grid", "fraction", "target", "metric", "no_figures",
]


def _run_stability(args) -> int:
    opts = resolve_options(args, _STABILITY_KEYS)
    errors: list[str] = []
    _validate_common(opts, errors)
    if opts.get("bootstraps") is not None and opts["bootstraps"] < 1:
        errors.append("--bootstraps must be >= 1")
    if opts.get("target") not in ("data", "mechanism"):
        errors.append("--target must be 'data' or 'mechanism'")
    if opts.get("metric") not in ("df", "sf"):
        errors.append("--metric must be 'df' or 'sf'")
    if errors:
        return _fail(errors)
    schema, dataset = _load_inputs(opts)
    groups = GroupIndex.from_schema(schema)
    estimators = _estimators(opts, groups, schema.n_outcomes)
    if opts["grid"]:
        grid = tuple(int(v) for v in str(opts["grid"]).split(","))
    else:
        frac = opts["fraction"] if opts["fraction"] else 0.01
        grid = default_grid(dataset.n_rows, min_fraction=frac)
    curve = stability_curve(
        dataset,
        estimators,
        grid,
        opts["bootstraps"],
        opts["seed"],
        target=opts["target"],
        metric=opts["metric"],
        opts=_fit_options(opts),
        favorable_only=opts["favorable_only"],
        workers=opts["workers"],
    )
    deviation = l1_deviation(curve)
    out = _outdir(opts)
    csv_path = os.path.join(out, "stability_curve.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["model", "estimator_mode", "n", "replicate", "value",
                        "censored"],
        )
        writer.writeheader()
        writer.writerows(curve.to_rows())
    json_path = os.path.join(out, "stability_report.json")
    dump_json(
        {
            "config": opts,
            "generated_at": _timestamp(),
            "curve": curve.to_dict(),
            "l1_deviation": deviation.to_dict(),
        },
        json_path,
    )
    written = [csv_path, json_path]
    if not opts["no_figures"]:
        from .plots import save_stability_figure

        written.append(
            save_stability_figure(curve, os.path.join(out, "stability_curve.png"))
        )
    print(json.dumps({"status": "ok", "outputs": written}))
    return 0


_SYNTH_KEYS = [
    "schema", "data", "out", "seed", "delta", "cutoff", "scale", "check",
    "no_figures",
]


def _run_synth(args) -> int:
    opts = resolve_options(args, _SYNTH_KEYS)
    errors: list[str] = []
    _validate_common(opts, errors)
    if opts.get("delta") is not None and not 0 < opts["delta"] < 0.5:
        errors.append("--delta must lie in (0, 0.5)")
    if opts.get("scale") is not None and opts["scale"] <= 0:
        errors.append("--scale must be > 0")
    if errors:
        return _fail(errors)
    schema, reference = _load_inputs(opts)
    groups, counts = build_counts(reference)
    weights = make_weights(counts, opts["delta"])
    scaled = np.maximum(
        np.round(counts.group_totals * opts["scale"]).astype(np.int64), 0
    )
    spec = SynthSpec(
        groups=groups,
        counts=scaled,
        weights=weights,
        threshold=opts["cutoff"],
        seed=opts["seed"],
    )
    dataset = generate(spec)
    table, eps_true, gam_true = analytic_truth(spec)
    _, syn_counts = build_counts(dataset)
    emp = empirical_table(syn_counts)
    emp_weights = GroupWeights.from_counts(syn_counts)
    try:
        eps_emp = epsilon_df(emp)
    except MetricError:
        eps_emp = math.nan
    gam_emp = gamma_sf(emp, emp_weights)

    out = _outdir(opts)
    csv_path = os.path.join(out, "synthetic.csv")
    write_dataset_csv(dataset, csv_path)
    truth_path = os.path.join(out, "synth_truth.json")
    dump_json(
        {
            "config": opts,
            "generated_at": _timestamp(),
            "generator": spec.to_dict(),
            "analytic": {
                "epsilon": eps_true,
                "gamma": gam_true,
                "positive_rates": table.probs[:, 1].tolist(),
            },
            "empirical": {"epsilon": eps_emp, "gamma": gam_emp},
        },
        truth_path,
    )
    written = [csv_path, truth_path]
    if not opts["no_figures"]:
        from .plots import save_synth_figure

        written.append(
            save_synth_figure(
                {"epsilon": eps_true, "gamma": gam_true},
                {"epsilon": eps_emp, "gamma": gam_emp},
                os.path.join(out, "synth_check.png"),
            )
        )
    if opts["check"]:
        print(
            f"analytic epsilon={eps_true:.5f} gamma={gam_true:.5f} | "
            f"empirical (N={dataset.n_rows}) epsilon={eps_emp:.5f} "
            f"gamma={gam_emp:.5f}"
        )
    print(json.dumps({"status": "ok", "outputs": written}))
    return 0


_CROSSENT_KEYS = [
    "schema", "data", "test", "out", "mechanism_column", "models", "alpha",
    "seed", "samples", "max_iters", "fraction", "target", "no_figures",
]


def _run_crossent(args) -> int:
    opts = resolve_options(args, _CROSSENT_KEYS)
    errors: list[str] = []
    _validate_common(opts, errors)
    if not opts.get("test"):
        errors.append("missing --test")
    elif not os.path.exists(opts["test"]):
        errors.append(f"test file not found: {opts['test']}")
    if opts.get("target") not in ("data", "mechanism"):
        errors.append("--target must be 'data' or 'mechanism'")
    if opts.get("fraction") is not None and not 0 < opts["fraction"] <= 1:
        errors.append("--fraction must lie in (0, 1]")
    if errors:
        return _fail(errors)
    schema, train = _load_inputs(opts)
    test = load_dataset(opts["test"], train.schema)
    if opts["fraction"] and opts["fraction"] < 1:
        n = max(1, int(round(opts["fraction"] * train.n_rows)))
        train = bootstrap_sample(train, n, derive_seed(opts["seed"], "subsample"))
    groups = GroupIndex.from_schema(train.schema)
    estimators = _estimators(opts, groups, train.schema.n_outcomes)
    scores = heldout_cross_entropy(
        train,
        test,
        estimators,
        target=opts["target"],
        opts=_fit_options(opts),
        seed=opts["seed"],
    )
    out = _outdir(opts)
    json_path = os.path.join(out, "crossent_report.json")
    dump_json(
        {
            "config": opts,
            "generated_at": _timestamp(),
            "train_rows": train.n_rows,
            "scores": scores,
        },
        json_path,
    )
    written = [json_path]
    if not opts["no_figures"]:
        from .plots import save_crossent_figure

        written.append(
            save_crossent_figure(
                scores,
                os.path.join(out, "crossent.png"),
                f"held-out fit ({opts['target']} labels)",
            )
        )
    print(json.dumps({"status": "ok", "outputs": written}))
    return 0


_MECHANISM_KEYS = [
    "schema", "data", "out", "seed", "fraction", "features",
    "mechanism_column",
]


def _run_mechanism(args) -> int:
    opts = resolve_options(args, _MECHANISM_KEYS)
    errors: list[str] = []
    _validate_common(opts, errors)
    frac = opts["fraction"] if opts["fraction"] is not None else 0.5
    if not 0 < frac < 1:
        errors.append("--fraction must lie in (0, 1)")
    if errors:
        return _fail(errors)
    schema, train = _load_inputs(opts)
    features = (
        [c.strip() for c in str(opts["features"]).split(",") if c.strip()]
        if opts["features"]
        else None
    )
    labeled = train_mechanism(
        train,
        frac,
        opts["seed"],
        feature_columns=features,
        mechanism_column=opts["mechanism_column"] or "mechanism",
    )
    out = _outdir(opts)
    csv_path = os.path.join(out, "mechanism_labeled.csv")
    write_dataset_csv(labeled, csv_path)
    agree = float(np.mean(labeled.mechanism == labeled.outcomes))
    json_path = os.path.join(out, "mechanism_report.json")
    dump_json(
        {
            "config": opts,
            "generated_at": _timestamp(),
            "audit_rows": labeled.n_rows,
            "mechanism_positive_rate": float(np.mean(labeled.mechanism)),
            "agreement_with_labels": agree,
        },
        json_path,
    )
    print(json.dumps({"status": "ok", "outputs": [csv_path, json_path]}))
    return 0


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, *, data: bool = True) -> None:
    p.add_argument("--schema", help="schema JSON path")
    if data:
        p.add_argument("--data", help="coded CSV path")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--config", help="JSON config file mirroring the flags")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--models", help="comma list: edf,nb,lr,hlr,dnn or e.g. lr-fb")
    p.add_argument("--alpha", type=float, help="Dirichlet pseudo-count")
    p.add_argument("--samples", type=int, help="posterior sample count S")
    p.add_argument("--max-iters", dest="max_iters", type=int,
                   help="optimizer iteration budget")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairaudit",
        description="Bayesian measurement of intersectional fairness metrics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit", help="metric posteriors, verdicts, ensemble")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--mechanism-column", dest="mechanism_column",
                   help="mechanism label column name")
    p.add_argument("--favorable-only", dest="favorable_only",
                   action="store_true", default=None,
                   help="restrict the DF scan to the favorable outcome")
    p.add_argument("--threshold", type=float,
                   help="verdict constant (default -log 0.8)")
    p.add_argument("--workers", type=int, help="parallel fit workers")
    p.add_argument("--include-sample-values", dest="include_sample_values",
                   action="store_true", default=None,
                   help="embed raw posterior samples in the report")
    p.add_argument("--no-figures", dest="no_figures", action="store_true",
                   default=None)
    p.set_defaults(run=_run_audit)

    p = sub.add_parser("stability", help="bootstrap stability curves")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--mechanism-column", dest="mechanism_column")
    p.add_argument("--favorable-only", dest="favorable_only",
                   action="store_true", default=None)
    p.add_argument("--bootstraps", type=int, help="replicates per grid point")
    p.add_argument("--grid", help="comma list of replicate sizes")
    p.add_argument("--fraction", type=float,
                   help="smallest grid size as a fraction of N")
    p.add_argument("--target", choices=("data", "mechanism"))
    p.add_argument("--metric", choices=("df", "sf"))
    p.add_argument("--workers", type=int)
    p.add_argument("--no-figures", dest="no_figures", action="store_true",
                   default=None)
    p.set_defaults(run=_run_stability)

    p = sub.add_parser("synth", help="semi-synthetic data + analytic truth")
    _add_common(p)
    p.add_argument("--delta", type=float, help="weight shift added to rates")
    p.add_argument("--cutoff", type=float, help="decision threshold t")
    p.add_argument("--scale", type=float, help="multiply reference counts")
    p.add_argument("--check", action="store_true", default=None,
                   help="print analytic vs empirical metrics")
    p.add_argument("--no-figures", dest="no_figures", action="store_true",
                   default=None)
    p.set_defaults(run=_run_synth)

    p = sub.add_parser("crossent", help="held-out cross-entropy comparison")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--test", help="held-out coded CSV path")
    p.add_argument("--mechanism-column", dest="mechanism_column")
    p.add_argument("--target", choices=("data", "mechanism"))
    p.add_argument("--fraction", type=float,
                   help="subsample this fraction of the training rows")
    p.add_argument("--no-figures", dest="no_figures", action="store_true",
                   default=None)
    p.set_defaults(run=_run_crossent)

    p = sub.add_parser("mechanism", help="train a reference mechanism")
    _add_common(p)
    p.add_argument("--fraction", type=float,
                   help="fraction of rows used to train the mechanism")
    p.add_argument("--features", help="comma list of feature columns")
    p.add_argument("--mechanism-column", dest="mechanism_column",
                   help="name of the emitted label column")
    p.set_defaults(run=_run_mechanism)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.run(args)
    except (DataError, HarnessError, ModelError, MetricError, SynthError,
            InferenceError, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail([f"{type(exc).__name__}: {exc}"], code=1)


if __name__ == "__main__":
    sys.exit(main())
