"""Experiment orchestration: audits, stability curves, sparse-data
deviation tables, held-out model comparison, and a reference mechanism
trainer.

The audit pipeline fits every requested estimator on the true labels and
(when present) the mechanism labels, reports metric posteriors with
predictive points and 80%-rule verdicts, forms paired bias-amplification
posteriors by same-draw-index subtraction, and adds a model-averaging
ensemble section.  Every job derives its own seed from the run seed, so
partial re-runs reproduce the full run's numbers.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression as SkLogisticRegression

from .data import (
    CountTable,
    Dataset,
    GroupIndex,
    bootstrap_sample,
    build_counts,
)
from .ensemble import (
    EnsembleError,
    EnsembleFit,
    EnsembleMember,
    build_ensemble,
    ensemble_predictive,
    pool_samples,
)
from .inference import (
    FitOptions,
    InferenceError,
    PosteriorSampleSet,
    degenerate_sample_set,
    fit_variational,
    map_estimate,
    posterior_predictive,
    sample_posterior,
)
from .metrics import (
    EIGHTY_PERCENT_RULE_EPSILON,
    GroupWeights,
    MetricError,
    MetricPosterior,
    ProbTable,
    empirical_table,
    metric_value,
)
from .models import ModelError, ModelSpec, exact_posterior
from .seeds import derive_seed

__all__ = [
    "FAMILY_BY_CODE",
    "HarnessError",
    "EstimatorSpec",
    "FittedEstimator",
    "EstimatorReport",
    "DeltaReport",
    "EnsembleReport",
    "AuditReport",
    "StabilityCurve",
    "L1Deviation",
    "make_estimators",
    "fit_estimator",
    "audit",
    "stability_curve",
    "l1_deviation",
    "heldout_cross_entropy",
    "train_mechanism",
    "default_grid",
]

FAMILY_BY_CODE = {
    "EDF": "dirichlet_multinomial",
    "NB": "naive_bayes",
    "LR": "logistic_regression",
    "HLR": "hlr",
    "DNN": "bayes_nn",
}
CODE_BY_FAMILY = {v: k for k, v in FAMILY_BY_CODE.items()}
CONJUGATE = ("dirichlet_multinomial", "naive_bayes")

_PROB_FLOOR = 1e-12


class HarnessError(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorSpec:
    """One curve/report entry: a model family plus an estimation mode
    ("pe" point estimate or "fb" fully Bayesian)."""

    code: str
    mode: str
    spec: ModelSpec

    @property
    def name(self) -> str:
        return f"{self.code}-{self.mode.upper()}"


def make_estimators(
    tokens,
    groups: GroupIndex,
    n_outcomes: int,
    hyper: dict | None = None,
) -> list[EstimatorSpec]:
    """Expand model tokens into estimator specs.

    A bare family token ("edf", "lr", ...) expands to both modes; a
    qualified token ("lr-fb", "EDF-PE") selects one.  Raises listing the
    allowed families on an unknown token.
    """
    hyper = dict(hyper or {})
    out: list[EstimatorSpec] = []
    for token in tokens:
        t = token.strip()
        if not t:
            continue
        parts = t.upper().split("-")
        code = parts[0]
        if code not in FAMILY_BY_CODE:
            raise HarnessError(
                f"unknown model family {token!r}; allowed: "
                + ", ".join(sorted(FAMILY_BY_CODE))
            )
        if len(parts) == 1:
            modes = ["pe", "fb"]
        elif len(parts) == 2 and parts[1] in ("PE", "FB"):
            modes = [parts[1].lower()]
        else:
            raise HarnessError(
                f"bad model token {token!r}; use FAMILY or FAMILY-PE/FAMILY-FB"
            )
        family = FAMILY_BY_CODE[code]
        spec = ModelSpec.for_groups(family, groups, n_outcomes, **hyper)
        for mode in modes:
            est = EstimatorSpec(code=code, mode=mode, spec=spec)
            if est.name not in [e.name for e in out]:
                out.append(est)
    if not out:
        raise HarnessError("no estimators selected")
    return out


@dataclass(frozen=True)
class FittedEstimator:
    est: EstimatorSpec
    samples: PosteriorSampleSet
    predictive: ProbTable
    info: dict


def fit_estimator(
    est: EstimatorSpec,
    counts: CountTable,
    groups: GroupIndex,
    opts: FitOptions,
    fit_seed: int,
    sample_seed: int,
) -> FittedEstimator:
    """Fit one estimator on a count table.

    PE mode: the empirical table for the per-group model (preserving its
    unsupported-group and zero-probability semantics), MAP otherwise,
    rendered as a degenerate sample set.  FB mode: exact posterior for the
    conjugate families, variational otherwise; the predictive is analytic
    where exact and the sample average where variational.
    """
    spec = est.spec
    s = opts.num_samples
    fit_opts = dataclasses.replace(opts, seed=fit_seed)
    if est.mode == "pe":
        mf = map_estimate(spec, counts, fit_opts)
        if spec.family == "dirichlet_multinomial":
            table = empirical_table(counts)
        else:
            from .models import predict_table

            table = predict_table(spec, mf.params, groups)
        samples = degenerate_sample_set(table, mf.params, s)
        info = {
            "source": samples.source,
            "converged": mf.converged,
            "iterations": mf.n_iters,
            "grad_norm": mf.grad_norm,
        }
        if mf.note:
            info["note"] = mf.note
        return FittedEstimator(est=est, samples=samples, predictive=table, info=info)

    if spec.family in CONJUGATE:
        post = exact_posterior(spec, counts)
        samples = sample_posterior(post, spec, groups, s, sample_seed)
        predictive = post.predictive_table(groups)
        info = {"source": "exact"}
    else:
        vp = fit_variational(spec, counts, fit_opts)
        samples = sample_posterior(vp, spec, groups, s, sample_seed)
        predictive = posterior_predictive(samples)
        info = {
            "source": "variational",
            "converged": vp.converged,
            "improved": vp.improved,
            "iterations": int(vp.elbo_trace.size),
            "final_elbo": float(vp.elbo_trace[-1]),
        }
    return FittedEstimator(est=est, samples=samples, predictive=predictive, info=info)


# ----------------------------------------------------------------------
# Audit (full metric-posterior report)
# ----------------------------------------------------------------------


@dataclass
class EstimatorReport:
    name: str
    family: str
    mode: str
    epsilon: MetricPosterior | None
    gamma: MetricPosterior | None
    verdict: dict
    fit_info: dict
    error: str | None = None

    def to_dict(self, include_samples: bool = False) -> dict:
        return {
            "name": self.name,
            "family": self.family,
            "mode": self.mode,
            "epsilon": None
            if self.epsilon is None
            else self.epsilon.to_dict(include_samples),
            "gamma": None
            if self.gamma is None
            else self.gamma.to_dict(include_samples),
            "verdict": self.verdict,
            "fit_info": self.fit_info,
            "error": self.error,
        }


@dataclass
class DeltaReport:
    """Paired bias-amplification posterior: same-index draw differences
    between the mechanism fit and the data fit."""

    name: str
    epsilon: MetricPosterior | None
    gamma: MetricPosterior | None
    epsilon_censored: int
    gamma_censored: int
    epsilon_prob_positive: float | None
    gamma_prob_positive: float | None

    def to_dict(self, include_samples: bool = False) -> dict:
        return {
            "name": self.name,
            "epsilon": None
            if self.epsilon is None
            else self.epsilon.to_dict(include_samples),
            "gamma": None
            if self.gamma is None
            else self.gamma.to_dict(include_samples),
            "epsilon_censored": self.epsilon_censored,
            "gamma_censored": self.gamma_censored,
            "epsilon_prob_positive": self.epsilon_prob_positive,
            "gamma_prob_positive": self.gamma_prob_positive,
        }


@dataclass
class EnsembleReport:
    weights: dict
    epsilon: MetricPosterior | None
    gamma: MetricPosterior | None
    verdict: dict

    def to_dict(self, include_samples: bool = False) -> dict:
        return {
            "weights": self.weights,
            "epsilon": None
            if self.epsilon is None
            else self.epsilon.to_dict(include_samples),
            "gamma": None
            if self.gamma is None
            else self.gamma.to_dict(include_samples),
            "verdict": self.verdict,
        }


@dataclass
class AuditReport:
    targets: dict  # target -> name -> EstimatorReport
    bias_amplification: dict | None  # name -> DeltaReport
    ensembles: dict  # target -> EnsembleReport; "bias_amplification" -> DeltaReport
    metadata: dict

    def to_dict(self, include_samples: bool = False) -> dict:
        return {
            "targets": {
                tgt: {
                    name: rep.to_dict(include_samples)
                    for name, rep in sorted(reports.items())
                }
                for tgt, reports in self.targets.items()
            },
            "bias_amplification": None
            if self.bias_amplification is None
            else {
                name: rep.to_dict(include_samples)
                for name, rep in sorted(self.bias_amplification.items())
            },
            "ensembles": {
                key: rep.to_dict(include_samples)
                for key, rep in self.ensembles.items()
            },
            "metadata": self.metadata,
        }


def dataset_sha256(d: Dataset) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(d.schema.to_dict(), sort_keys=True).encode())
    h.update(np.ascontiguousarray(d.attributes).tobytes())
    h.update(np.ascontiguousarray(d.outcomes).tobytes())
    if d.mechanism is not None:
        h.update(np.ascontiguousarray(d.mechanism).tobytes())
    return h.hexdigest()


def _metric_samples(fitted: FittedEstimator, which, w, outcomes) -> list[float]:
    if fitted.samples.source == "map-degenerate":
        v = metric_value(which, fitted.samples.tables[0], w, outcomes)
        return [v] * fitted.samples.n_samples
    return [metric_value(which, t, w, outcomes) for t in fitted.samples.tables]


def _estimator_metrics(
    fitted: FittedEstimator,
    weights: GroupWeights,
    outcomes,
    threshold: float,
) -> EstimatorReport:
    est = fitted.est
    eps_samples = _metric_samples(fitted, "df", weights, outcomes)
    eps_point = metric_value("df", fitted.predictive, weights, outcomes)
    eps = MetricPosterior.from_samples(eps_samples, eps_point)
    gam = None
    if fitted.predictive.n_outcomes == 2:
        gam_samples = _metric_samples(fitted, "sf", weights, None)
        gam_point = metric_value("sf", fitted.predictive, weights, None)
        gam = MetricPosterior.from_samples(gam_samples, gam_point)
    verdict = {
        "threshold": threshold,
        "epsilon_predictive_exceeds": bool(eps.predictive_point > threshold),
        "epsilon_median_exceeds": bool(eps.summary["median"] > threshold),
    }
    return EstimatorReport(
        name=est.name,
        family=est.spec.family,
        mode=est.mode,
        epsilon=eps,
        gamma=gam,
        verdict=verdict,
        fit_info=fitted.info,
    )


def _paired_deltas(
    mech: MetricPosterior, data: MetricPosterior
) -> tuple[list[float], int]:
    deltas = []
    censored = 0
    for a, b in zip(mech.samples, data.samples):
        if math.isfinite(a) and math.isfinite(b):
            deltas.append(a - b)
        else:
            censored += 1
    return deltas, censored


def _delta_posterior(
    mech: MetricPosterior | None, data: MetricPosterior | None
) -> tuple[MetricPosterior | None, int, float | None]:
    if mech is None or data is None:
        return None, 0, None
    deltas, censored = _paired_deltas(mech, data)
    if not deltas:
        return None, censored, None
    point = None
    if (
        mech.predictive_point is not None
        and data.predictive_point is not None
        and math.isfinite(mech.predictive_point)
        and math.isfinite(data.predictive_point)
    ):
        point = mech.predictive_point - data.predictive_point
    posterior = MetricPosterior.from_samples(deltas, point)
    prob_pos = float(np.mean(np.asarray(deltas) > 0.0))
    return posterior, censored, prob_pos


def _fit_job(args):
    est, counts, groups, opts, fit_seed, sample_seed = args
    try:
        return fit_estimator(est, counts, groups, opts, fit_seed, sample_seed), None
    except (InferenceError, ModelError, MetricError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _default_ensemble_members(names: list[str]) -> list[str]:
    picked = [n for n in names if n.endswith("-FB")]
    if "EDF-PE" in names:
        picked.append("EDF-PE")
    return picked


def audit(
    d: Dataset,
    estimators: list[EstimatorSpec],
    opts: FitOptions,
    seed: int,
    *,
    audit_mechanism: bool | None = None,
    favorable_only: bool = False,
    threshold: float = EIGHTY_PERCENT_RULE_EPSILON,
    ensemble_members: list[str] | None = None,
    workers: int = 1,
) -> AuditReport:
    """Run the full audit pipeline on a dataset.

    Fits every estimator on the true labels and, when requested and
    present, on the mechanism labels; fit seeds are shared across the two
    targets so bias-amplification draws are paired.  Per-estimator fit
    failures are recorded and the run continues.
    """
    if audit_mechanism is None:
        audit_mechanism = d.mechanism is not None
    if audit_mechanism and d.mechanism is None:
        raise HarnessError("mechanism audit requested but dataset has no "
                           "mechanism labels")
    groups, counts_data = build_counts(d, use_mechanism_labels=False)
    weights = GroupWeights.from_counts(counts_data)
    targets = {"data": counts_data}
    if audit_mechanism:
        _, counts_mech = build_counts(d, use_mechanism_labels=True)
        targets["mechanism"] = counts_mech
    outcomes = (1,) if favorable_only else None

    jobs = []
    for tgt, counts in targets.items():
        for est in estimators:
            jobs.append(
                (
                    tgt,
                    est,
                    (
                        est,
                        counts,
                        groups,
                        opts,
                        derive_seed(seed, "fit", est.name),
                        derive_seed(seed, "sample", est.name),
                    ),
                )
            )
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_job, [j[2] for j in jobs]))
    else:
        results = [_fit_job(j[2]) for j in jobs]

    fitted: dict[str, dict[str, FittedEstimator]] = {t: {} for t in targets}
    reports: dict[str, dict[str, EstimatorReport]] = {t: {} for t in targets}
    for (tgt, est, _), (fit, err) in zip(jobs, results):
        if err is not None:
            reports[tgt][est.name] = EstimatorReport(
                name=est.name,
                family=est.spec.family,
                mode=est.mode,
                epsilon=None,
                gamma=None,
                verdict={},
                fit_info={},
                error=err,
            )
            continue
        fitted[tgt][est.name] = fit
        try:
            reports[tgt][est.name] = _estimator_metrics(
                fit, weights, outcomes, threshold
            )
        except MetricError as exc:
            reports[tgt][est.name] = EstimatorReport(
                name=est.name,
                family=est.spec.family,
                mode=est.mode,
                epsilon=None,
                gamma=None,
                verdict={},
                fit_info=fit.info,
                error=f"MetricError: {exc}",
            )

    bias = None
    if audit_mechanism:
        bias = {}
        for est in estimators:
            rd = reports["data"].get(est.name)
            rm = reports["mechanism"].get(est.name)
            if rd is None or rm is None or rd.error or rm.error:
                continue
            e_post, e_cens, e_prob = _delta_posterior(rm.epsilon, rd.epsilon)
            g_post, g_cens, g_prob = _delta_posterior(rm.gamma, rd.gamma)
            bias[est.name] = DeltaReport(
                name=est.name,
                epsilon=e_post,
                gamma=g_post,
                epsilon_censored=e_cens,
                gamma_censored=g_cens,
                epsilon_prob_positive=e_prob,
                gamma_prob_positive=g_prob,
            )

    member_names = ensemble_members
    if member_names is None:
        member_names = _default_ensemble_members([e.name for e in estimators])
    ensembles: dict[str, object] = {}
    ens_fits: dict[str, EnsembleFit] = {}
    for tgt, counts in targets.items():
        members = [
            EnsembleMember(
                name=n,
                spec=fitted[tgt][n].est.spec,
                samples=fitted[tgt][n].samples,
                predictive=fitted[tgt][n].predictive,
            )
            for n in member_names
            if n in fitted[tgt]
        ]
        if not members:
            continue
        try:
            fit = build_ensemble(members, counts)
        except EnsembleError:
            continue
        ens_fits[tgt] = fit
        ensembles[tgt] = _ensemble_report(fit, weights, outcomes, threshold)
    if audit_mechanism and "data" in ens_fits and "mechanism" in ens_fits:
        delta = _ensemble_delta(
            ens_fits["data"], ens_fits["mechanism"], reports, weights, outcomes
        )
        if delta is not None:
            ensembles["bias_amplification"] = delta

    metadata = {
        "seed": seed,
        "fit_options": opts.to_dict(),
        "n_rows": d.n_rows,
        "n_groups": groups.n_groups,
        "group_labels": groups.group_labels(),
        "group_counts": counts_data.group_totals.tolist(),
        "data_sha256": dataset_sha256(d),
        "source": d.provenance.source,
        "favorable_only": favorable_only,
        "threshold": threshold,
        "estimators": [e.name for e in estimators],
        "ensemble_members": member_names,
        "targets": list(targets),
    }
    return AuditReport(
        targets=reports,
        bias_amplification=bias,
        ensembles=ensembles,
        metadata=metadata,
    )


def _ensemble_report(
    fit: EnsembleFit, weights: GroupWeights, outcomes, threshold: float
) -> EnsembleReport:
    pred = ensemble_predictive(fit)
    total = max(m.samples.n_samples for m in fit.members)
    eps_lists = [
        [metric_value("df", t, weights, outcomes) for t in m.samples.tables]
        for m in fit.members
    ]
    eps = MetricPosterior.from_samples(
        pool_samples(eps_lists, fit.weights, total),
        metric_value("df", pred, weights, outcomes),
    )
    gam = None
    if pred.n_outcomes == 2:
        gam_lists = [
            [metric_value("sf", t, weights, None) for t in m.samples.tables]
            for m in fit.members
        ]
        gam = MetricPosterior.from_samples(
            pool_samples(gam_lists, fit.weights, total),
            metric_value("sf", pred, weights, None),
        )
    verdict = {
        "threshold": threshold,
        "epsilon_predictive_exceeds": bool(eps.predictive_point > threshold),
        "epsilon_median_exceeds": bool(eps.summary["median"] > threshold),
    }
    return EnsembleReport(
        weights=fit.to_dict(), epsilon=eps, gamma=gam, verdict=verdict
    )


def _ensemble_delta(
    fit_data: EnsembleFit,
    fit_mech: EnsembleFit,
    reports: dict,
    weights: GroupWeights,
    outcomes,
) -> DeltaReport | None:
    """Pool per-member paired deltas with weights proportional to the
    product of both targets' predictive likelihoods."""
    names = [m.name for m in fit_data.members]
    if names != [m.name for m in fit_mech.members]:
        names = [n for n in names if n in [m.name for m in fit_mech.members]]
    if not names:
        return None
    combined = []
    eps_lists, gam_lists = [], []
    eps_cens = gam_cens = 0
    for n in names:
        i = [m.name for m in fit_data.members].index(n)
        j = [m.name for m in fit_mech.members].index(n)
        score = fit_data.log_scores[i] + fit_mech.log_scores[j]
        rd, rm = reports["data"][n], reports["mechanism"][n]
        e_deltas, ec = _paired_deltas(rm.epsilon, rd.epsilon)
        g_deltas, gc = ([], 0)
        if rd.gamma is not None and rm.gamma is not None:
            g_deltas, gc = _paired_deltas(rm.gamma, rd.gamma)
        combined.append(score)
        eps_lists.append(e_deltas)
        gam_lists.append(g_deltas)
        eps_cens += ec
        gam_cens += gc
    combined = np.asarray(combined)
    total = max(m.samples.n_samples for m in fit_data.members)
    pd_data = ensemble_predictive(fit_data)
    pd_mech = ensemble_predictive(fit_mech)

    def pooled(sample_lists, point):
        usable = np.isfinite(combined) & np.array(
            [len(v) > 0 for v in sample_lists]
        )
        if not usable.any():
            return None, None
        w = np.where(usable, np.exp(combined - combined[usable].max()), 0.0)
        w /= w.sum()
        vals = pool_samples(sample_lists, w, total)
        post = MetricPosterior.from_samples(vals, point)
        return post, float(np.mean(np.asarray(vals) > 0.0))

    e_data = metric_value("df", pd_data, weights, outcomes)
    e_mech = metric_value("df", pd_mech, weights, outcomes)
    e_point = (
        e_mech - e_data
        if math.isfinite(e_data) and math.isfinite(e_mech)
        else None
    )
    eps_post, e_prob = pooled(eps_lists, e_point)
    if eps_post is None:
        return None
    gam_post = g_prob = None
    if pd_data.n_outcomes == 2:
        g_point = metric_value("sf", pd_mech, weights, None) - metric_value(
            "sf", pd_data, weights, None
        )
        gam_post, g_prob = pooled(gam_lists, g_point)
    return DeltaReport(
        name="Ensemble",
        epsilon=eps_post,
        gamma=gam_post,
        epsilon_censored=eps_cens,
        gamma_censored=gam_cens,
        epsilon_prob_positive=e_prob,
        gamma_prob_positive=g_prob,
    )


# ----------------------------------------------------------------------
# Stability curves and sparse-data deviations
# ----------------------------------------------------------------------


@dataclass
class StabilityCurve:
    """Metric estimates over bootstrap replicates at a grid of sizes.

    ``values[e, i, b]`` is estimator e's predictive metric on replicate b
    at grid point i; non-finite values (and failed fits, stored as NaN)
    are censored and excluded from the means.
    """

    metric: str
    target: str
    grid: tuple[int, ...]
    estimator_names: tuple[str, ...]
    values: np.ndarray  # (E, G, B)
    censored: np.ndarray  # (E, G, B) bool
    seed: int

    def means(self) -> np.ndarray:
        vals = np.where(self.censored, np.nan, self.values)
        with np.errstate(invalid="ignore"):
            return np.nanmean(vals, axis=2)

    def censored_counts(self) -> np.ndarray:
        return self.censored.sum(axis=2)

    def replicate_values(self, name: str, n: int) -> np.ndarray:
        e = self.estimator_names.index(name)
        i = self.grid.index(n)
        return self.values[e, i]

    def to_rows(self) -> list[dict]:
        rows = []
        for e, name in enumerate(self.estimator_names):
            code, mode = name.rsplit("-", 1)
            for i, n in enumerate(self.grid):
                for b in range(self.values.shape[2]):
                    v = self.values[e, i, b]
                    rows.append(
                        {
                            "model": code,
                            "estimator_mode": mode,
                            "n": n,
                            "replicate": b,
                            "value": "" if math.isnan(v) else repr(float(v)),
                            "censored": bool(self.censored[e, i, b]),
                        }
                    )
        return rows

    def to_dict(self) -> dict:
        means = self.means()
        return {
            "metric": self.metric,
            "target": self.target,
            "grid": list(self.grid),
            "seed": self.seed,
            "estimators": list(self.estimator_names),
            "means": {
                name: [
                    None if math.isnan(means[e, i]) else float(means[e, i])
                    for i in range(len(self.grid))
                ]
                for e, name in enumerate(self.estimator_names)
            },
            "censored_counts": {
                name: self.censored_counts()[e].tolist()
                for e, name in enumerate(self.estimator_names)
            },
        }


def default_grid(n: int, points: int = 8, min_fraction: float = 0.01) -> tuple[int, ...]:
    """Log-spaced replicate sizes from ``min_fraction * n`` up to ``n``."""
    lo = max(1, int(round(min_fraction * n)))
    raw = np.geomspace(lo, n, points)
    grid = sorted({int(round(v)) for v in raw})
    return tuple(grid)


_WORKER_STATE: dict = {}


def _stability_init(d, estimators, opts, seed, target, metric, outcomes):
    _WORKER_STATE["args"] = (d, estimators, opts, seed, target, metric, outcomes)


def _stability_point(job):
    i, b, n = job
    d, estimators, opts, seed, target, metric, outcomes = _WORKER_STATE["args"]
    rep = bootstrap_sample(d, n, derive_seed(seed, "boot", i, b))
    groups, counts = build_counts(rep, use_mechanism_labels=(target == "mechanism"))
    weights = GroupWeights.from_counts(counts)
    out = []
    for est in estimators:
        try:
            fitted = fit_estimator(
                est,
                counts,
                groups,
                opts,
                derive_seed(seed, "fit", i, b, est.name),
                derive_seed(seed, "sample", i, b, est.name),
            )
            v = metric_value(metric, fitted.predictive, weights, outcomes)
        except (InferenceError, ModelError, MetricError, ValueError):
            v = math.nan
        out.append(v)
    return i, b, out


def stability_curve(
    d: Dataset,
    estimators: list[EstimatorSpec],
    grid,
    b: int,
    seed: int,
    *,
    target: str = "data",
    metric: str = "df",
    opts: FitOptions | None = None,
    favorable_only: bool = False,
    workers: int = 1,
) -> StabilityCurve:
    """Predictive metric versus replicate size, averaged over ``b``
    bootstrap replicates per size (``b = 1`` gives the single-sample
    variant)."""
    opts = opts or FitOptions()
    grid = tuple(int(n) for n in grid)
    if not grid or any(n < 1 for n in grid):
        raise HarnessError("grid sizes must be positive")
    if list(grid) != sorted(set(grid)):
        raise HarnessError("grid must be strictly increasing")
    if b < 1:
        raise HarnessError("need >= 1 bootstrap replicates")
    if target == "mechanism" and d.mechanism is None:
        raise HarnessError("dataset has no mechanism labels")
    outcomes = (1,) if favorable_only else None

    jobs = [(i, rep, n) for i, n in enumerate(grid) for rep in range(b)]
    init_args = (d, estimators, opts, seed, target, metric, outcomes)
    if workers > 1:
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_stability_init,
            initargs=init_args,
        ) as pool:
            results = list(pool.map(_stability_point, jobs))
    else:
        _stability_init(*init_args)
        results = [_stability_point(j) for j in jobs]

    e_count = len(estimators)
    values = np.full((e_count, len(grid), b), np.nan)
    for i, rep, vals in results:
        for e in range(e_count):
            values[e, i, rep] = vals[e]
    censored = ~np.isfinite(values)
    return StabilityCurve(
        metric=metric,
        target=target,
        grid=grid,
        estimator_names=tuple(e.name for e in estimators),
        values=values,
        censored=censored,
        seed=seed,
    )


@dataclass
class L1Deviation:
    """Mean absolute deviation of small-data estimates from a reference."""

    reference: float
    smallest_n: int
    per_model: dict[str, float | None]
    censored: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "smallest_n": self.smallest_n,
            "per_model": self.per_model,
            "censored": self.censored,
        }


def l1_deviation(curve: StabilityCurve, reference: float | None = None) -> L1Deviation:
    """Per estimator: mean |metric - reference| over the replicates at the
    smallest grid size.  The default reference is the median of every
    estimator's full-size replicate values (censored values excluded);
    estimators with all replicates censored are flagged as None."""
    if reference is None:
        full = np.where(curve.censored[:, -1, :], np.nan, curve.values[:, -1, :])
        finite = full[np.isfinite(full)]
        if finite.size == 0:
            raise HarnessError("no finite full-size estimates to form a reference")
        reference = float(np.median(finite))
    if not math.isfinite(reference):
        raise HarnessError("reference must be finite")
    per_model: dict[str, float | None] = {}
    censored: dict[str, int] = {}
    for e, name in enumerate(curve.estimator_names):
        vals = curve.values[e, 0, :]
        cens = curve.censored[e, 0, :]
        finite_vals = vals[~cens]
        censored[name] = int(cens.sum())
        per_model[name] = (
            float(np.mean(np.abs(finite_vals - reference)))
            if finite_vals.size
            else None
        )
    return L1Deviation(
        reference=reference,
        smallest_n=curve.grid[0],
        per_model=per_model,
        censored=censored,
    )


# ----------------------------------------------------------------------
# Held-out model comparison
# ----------------------------------------------------------------------


def heldout_cross_entropy(
    train: Dataset,
    test: Dataset,
    estimators: list[EstimatorSpec],
    *,
    target: str = "data",
    opts: FitOptions | None = None,
    seed: int = 0,
    include_ensemble: bool = True,
) -> dict[str, float]:
    """Average negative cross-entropy per intersection on held-out data
    (higher is better).

    Fits on the training table, scores each supported test group against
    the test set's empirical conditionals; model probabilities (including
    rows the model leaves undefined) are floored at 1e-12 inside the log.
    """
    if train.schema != test.schema:
        raise HarnessError("train and test schemas differ")
    opts = opts or FitOptions()
    use_mech = target == "mechanism"
    groups, counts_train = build_counts(train, use_mechanism_labels=use_mech)
    _, counts_test = build_counts(test, use_mechanism_labels=use_mech)
    test_table = empirical_table(counts_test)
    if not test_table.support.any():
        raise HarnessError("no supported test groups")

    fits: dict[str, FittedEstimator] = {}
    scores: dict[str, float] = {}
    for est in estimators:
        fitted = fit_estimator(
            est,
            counts_train,
            groups,
            opts,
            derive_seed(seed, "fit", est.name),
            derive_seed(seed, "sample", est.name),
        )
        fits[est.name] = fitted
        scores[est.name] = _neg_cross_entropy(fitted.predictive, test_table)

    if include_ensemble and len(fits) >= 2:
        member_names = _default_ensemble_members(list(fits))
        members = [
            EnsembleMember(
                name=n,
                spec=fits[n].est.spec,
                samples=fits[n].samples,
                predictive=fits[n].predictive,
            )
            for n in member_names
            if n in fits
        ]
        if len(members) >= 1:
            fit = build_ensemble(members, counts_train)
            scores["Ensemble"] = _neg_cross_entropy(
                ensemble_predictive(fit), test_table
            )
    return scores


def _neg_cross_entropy(model: ProbTable, test: ProbTable) -> float:
    vals = []
    for j in np.flatnonzero(test.support):
        q = model.probs[j] if model.support[j] else np.zeros(model.n_outcomes)
        q = np.maximum(q, _PROB_FLOOR)
        vals.append(float(test.probs[j] @ np.log(q)))
    return float(np.mean(vals))


# ----------------------------------------------------------------------
# Reference mechanism trainer
# ----------------------------------------------------------------------


def _design_matrix(d: Dataset, feature_columns: list[str] | None) -> np.ndarray:
    """One-hot protected attributes plus extras (numeric columns
    standardized, text columns one-hot over observed values)."""
    blocks = []
    sizes = d.schema.attribute_sizes
    for dd, size in enumerate(sizes):
        onehot = np.zeros((d.n_rows, size))
        onehot[np.arange(d.n_rows), d.attributes[:, dd]] = 1.0
        blocks.append(onehot)
    names = list(d.extras) if feature_columns is None else feature_columns
    for name in names:
        if name not in d.extras:
            raise HarnessError(f"feature column {name!r} not in dataset extras")
        col = d.extras[name]
        try:
            x = np.array([float(v) for v in col])
            sd = x.std()
            blocks.append(((x - x.mean()) / (sd if sd > 0 else 1.0))[:, None])
        except ValueError:
            levels = sorted(set(col))
            idx = {v: i for i, v in enumerate(levels)}
            onehot = np.zeros((d.n_rows, len(levels)))
            onehot[np.arange(d.n_rows), [idx[v] for v in col]] = 1.0
            blocks.append(onehot)
    return np.concatenate(blocks, axis=1)


def train_mechanism(
    train: Dataset,
    holdout_fraction: float,
    seed: int,
    *,
    feature_columns: list[str] | None = None,
    mechanism_column: str = "mechanism",
) -> Dataset:
    """Train a plain logistic regression on a held-out fraction of the
    rows and label the remainder with thresholded (0.5) predictions.

    Returns the remainder as a dataset whose mechanism column carries the
    predicted labels — the audit half of the paper-style protocol.
    """
    if not 0 < holdout_fraction < 1:
        raise HarnessError("holdout fraction must lie in (0, 1)")
    if train.schema.n_outcomes != 2:
        raise HarnessError("mechanism training needs a binary outcome")
    n = train.n_rows
    n_fit = int(round(holdout_fraction * n))
    if n_fit < 1 or n_fit >= n:
        raise HarnessError("holdout fraction leaves an empty split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    fit_idx, audit_idx = perm[:n_fit], perm[n_fit:]

    x = _design_matrix(train, feature_columns)
    y = train.outcomes
    y_fit = y[fit_idx]
    if len(np.unique(y_fit)) < 2:
        raise HarnessError("mechanism training split contains a single class")
    clf = SkLogisticRegression(max_iter=2000, tol=1e-8)
    clf.fit(x[fit_idx], y_fit)
    labels = (clf.predict_proba(x[audit_idx])[:, 1] >= 0.5).astype(np.int64)

    schema = dataclasses.replace(train.schema, mechanism_column=mechanism_column)
    audited = train.take(
        audit_idx,
        dataclasses.replace(
            train.provenance, source=f"{train.provenance.source}#audit-half"
        ),
    )
    return Dataset(
        schema=schema,
        attributes=audited.attributes,
        outcomes=audited.outcomes,
        mechanism=labels,
        extras=audited.extras,
        provenance=dataclasses.replace(audited.provenance, seed=seed),
    )
