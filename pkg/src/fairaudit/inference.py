"""Fitting: MAP optimization and Gaussian mean-field variational inference.

The variational family is an independent Gaussian per unconstrained
coordinate.  The evidence lower bound is maximized by stochastic gradient
ascent with reparameterized draws (v = m + exp(w) * eta), a handful of
Monte Carlo samples per step, and Adam-style per-coordinate step sizes.
Everything is deterministic given (seed, options, data).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, asdict

import numpy as np
from scipy.optimize import minimize

from .data import CountTable, GroupIndex
from .metrics import ProbTable
from . import models
from .models import ModelSpec, ExactPosterior

__all__ = [
    "FitOptions",
    "MapFit",
    "VariationalPosterior",
    "PosteriorSampleSet",
    "InferenceError",
    "map_estimate",
    "fit_variational",
    "sample_posterior",
    "posterior_predictive",
]


class InferenceError(RuntimeError):
    """Raised on divergent or invalid fits."""


@dataclass(frozen=True)
class FitOptions:
    """Optimization budget and sampling sizes.

    ``tol`` is the relative change of the window-averaged ELBO between
    consecutive windows below which the variational fit stops early.
    ``num_samples`` is the posterior sample count S used downstream.
    """

    max_iters: int = 3000
    learning_rate: float = 0.05
    lr_decay: float = 0.005
    mc_samples: int = 8
    tol: float = 1e-4
    window: int = 100
    seed: int = 0
    num_samples: int = 1000
    map_grad_tol: float = 1e-7

    def __post_init__(self):
        if self.max_iters < 1 or self.mc_samples < 1 or self.window < 1:
            raise InferenceError("iteration/sample counts must be positive")
        if self.num_samples < 1:
            raise InferenceError("num_samples must be >= 1")
        if self.learning_rate <= 0 or self.tol <= 0 or self.map_grad_tol <= 0:
            raise InferenceError("rates and tolerances must be positive")
        if self.lr_decay < 0:
            raise InferenceError("lr_decay must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MapFit:
    """Point estimate with convergence report."""

    spec: ModelSpec
    params: np.ndarray
    value: float
    grad_norm: float
    n_iters: int
    converged: bool  # gradient norm below 1e-5 at return
    note: str = ""


@dataclass(frozen=True)
class VariationalPosterior:
    """Mean-field Gaussian over the unconstrained parameter space."""

    spec: ModelSpec
    mean: np.ndarray
    log_std: np.ndarray
    elbo_trace: np.ndarray
    converged: bool
    improved: bool

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise InferenceError("mean/log-std shape mismatch")
        if not math.isfinite(float(self.elbo_trace[-1])):
            raise InferenceError("non-finite final ELBO")

    def to_dict(self) -> dict:
        return {
            "family": self.spec.family,
            "mean": self.mean.tolist(),
            "log_std": self.log_std.tolist(),
            "elbo_trace": self.elbo_trace.tolist(),
            "converged": self.converged,
            "improved": self.improved,
        }


@dataclass(frozen=True)
class PosteriorSampleSet:
    """S posterior draws rendered as conditional tables, plus the draws
    themselves in the unconstrained layout."""

    tables: tuple[ProbTable, ...]
    params: np.ndarray  # (S, D)
    source: str  # "variational" | "exact" | "map-degenerate"
    seed: int | None

    def __post_init__(self):
        if len(self.tables) < 1:
            raise InferenceError("sample set needs >= 1 table")

    @property
    def n_samples(self) -> int:
        return len(self.tables)


def _empirical_probs(counts: CountTable) -> np.ndarray:
    sup = counts.group_totals > 0
    totals = np.where(sup, counts.group_totals, counts.n_outcomes)
    probs = np.where(
        sup[:, None],
        counts.counts / totals[:, None],
        1.0 / counts.n_outcomes,
    )
    return probs


def map_estimate(spec: ModelSpec, counts: CountTable, opts: FitOptions) -> MapFit:
    """Local maximizer of the log joint by line-searched gradient ascent.

    The per-group Dirichlet model skips optimization entirely: its point
    estimate is the table of empirical frequencies (uniform rows for empty
    groups), stored as the interior-clamped stick encoding.
    """
    if spec.family == "dirichlet_multinomial":
        probs = np.clip(_empirical_probs(counts), 1e-12, 1 - 1e-12)
        probs /= probs.sum(axis=1, keepdims=True)
        params = models._sb_inverse(probs).ravel()
        val, g = models.value_and_grad(spec, params, counts)
        return MapFit(
            spec=spec,
            params=params,
            value=val,
            grad_norm=float(np.linalg.norm(g)),
            n_iters=0,
            converged=True,
            note="empirical-frequency point estimate (no optimization)",
        )

    rng = np.random.default_rng(opts.seed)
    if spec.family == "bayes_nn":
        # zero init leaves rectifier units dead; break symmetry
        v0 = 0.1 * rng.standard_normal(models.param_length(spec))
    else:
        v0 = np.zeros(models.param_length(spec))

    val0 = models.log_joint(spec, v0, counts)
    if not math.isfinite(val0):
        raise InferenceError("non-finite objective at initialization")

    evals = 0

    def objective(v):
        nonlocal evals
        evals += 1
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                val, g = models.value_and_grad(spec, v, counts)
            except models.ModelError:
                return math.inf, np.zeros_like(v)
        if not math.isfinite(val):
            return math.inf, np.zeros_like(v)
        return -val, -g

    res = minimize(
        objective,
        v0,
        jac=True,
        method="L-BFGS-B",
        options={
            "maxiter": opts.max_iters,
            "ftol": 0.0,
            "gtol": opts.map_grad_tol,
            "maxcor": 20,
        },
    )
    v = res.x
    val, g = models.value_and_grad(spec, v, counts)
    if not math.isfinite(val):
        raise InferenceError(f"MAP search diverged after {evals} evaluations")
    gn = float(np.linalg.norm(g))
    return MapFit(
        spec=spec,
        params=v,
        value=val,
        grad_norm=gn,
        n_iters=int(res.nit),
        converged=gn < 1e-5,
        note="" if gn < 1e-5 else f"stopped with gradient norm {gn:.3e}",
    )


def _entropy(log_std: np.ndarray) -> float:
    d = log_std.size
    return float(log_std.sum()) + 0.5 * d * math.log(2 * math.pi * math.e)


def fit_variational(
    spec: ModelSpec, counts: CountTable, opts: FitOptions
) -> VariationalPosterior:
    """Maximize the ELBO over a mean-field Gaussian.

    Initialization: zero mean, log-std -1.  Stops early when the
    window-averaged ELBO stabilizes (relative change < ``opts.tol``).
    Forcing this path on a conjugate family is allowed (used to validate
    the engine against the exact posterior).
    """
    d = models.param_length(spec)
    m = np.zeros(d)
    w = np.full(d, -1.0)
    rng = np.random.default_rng(opts.seed)

    adam_m = np.zeros(2 * d)
    adam_v = np.zeros(2 * d)
    b1, b2, eps = 0.9, 0.999, 1e-8

    trace = []
    tail: deque[tuple[np.ndarray, np.ndarray]] = deque(maxlen=opts.window)
    converged = False
    for it in range(1, opts.max_iters + 1):
        sigma = np.exp(w)
        eta = rng.standard_normal((opts.mc_samples, d))
        draws = m + eta * sigma
        gm = np.zeros(d)
        gw = np.zeros(d)
        vals = 0.0
        for i in range(opts.mc_samples):
            val, g = models.value_and_grad(spec, draws[i], counts)
            vals += val
            gm += g
            gw += g * eta[i]
        gm /= opts.mc_samples
        gw = (gw / opts.mc_samples) * sigma + 1.0  # +1 from the entropy term
        elbo = vals / opts.mc_samples + _entropy(w)
        trace.append(elbo)

        grad = np.concatenate([gm, gw])
        gn = float(np.linalg.norm(grad))
        if not math.isfinite(gn):
            raise InferenceError(f"non-finite ELBO gradient at iteration {it}")
        if gn > 1e9:
            grad *= 1e9 / gn

        lr = opts.learning_rate / (1.0 + opts.lr_decay * it)
        adam_m = b1 * adam_m + (1 - b1) * grad
        adam_v = b2 * adam_v + (1 - b2) * grad**2
        mhat = adam_m / (1 - b1**it)
        vhat = adam_v / (1 - b2**it)
        upd = lr * mhat / (np.sqrt(vhat) + eps)
        m = m + upd[:d]
        w = w + upd[d:]
        tail.append((m, w))

        if it >= 2 * opts.window and it % opts.window == 0:
            cur = float(np.mean(trace[-opts.window :]))
            prev = float(np.mean(trace[-2 * opts.window : -opts.window]))
            if not math.isfinite(cur):
                raise InferenceError(f"non-finite ELBO around iteration {it}")
            if abs(cur - prev) / (abs(prev) + 1e-12) < opts.tol:
                converged = True
                break

    # Average the tail iterates: cancels the Monte Carlo jitter left at
    # the stationary point.
    m = np.mean([p[0] for p in tail], axis=0)
    w = np.mean([p[1] for p in tail], axis=0)

    trace_arr = np.asarray(trace)
    head = float(np.mean(trace_arr[: opts.window]))
    last = float(np.mean(trace_arr[-opts.window :]))
    return VariationalPosterior(
        spec=spec,
        mean=m,
        log_std=w,
        elbo_trace=trace_arr,
        converged=converged,
        improved=last >= head,
    )


def sample_posterior(
    post: VariationalPosterior | ExactPosterior | MapFit,
    spec: ModelSpec,
    groups: GroupIndex,
    s: int,
    seed: int,
) -> PosteriorSampleSet:
    """S parameter draws mapped through prediction; deterministic per seed.

    A MAP fit yields a degenerate set (S copies of the point estimate).
    """
    if s < 1:
        raise InferenceError("need S >= 1 samples")
    rng = np.random.default_rng(seed)
    if isinstance(post, VariationalPosterior):
        draws = post.mean + rng.standard_normal((s, post.mean.size)) * np.exp(
            post.log_std
        )
        tables = tuple(
            models.predict_table(spec, draws[i], groups) for i in range(s)
        )
        return PosteriorSampleSet(
            tables=tables, params=draws, source="variational", seed=seed
        )
    if isinstance(post, ExactPosterior):
        params, tables = post.sample(groups, s, rng)
        return PosteriorSampleSet(
            tables=tuple(tables), params=params, source="exact", seed=seed
        )
    if isinstance(post, MapFit):
        table = models.predict_table(spec, post.params, groups)
        return PosteriorSampleSet(
            tables=(table,) * s,
            params=np.tile(post.params, (s, 1)),
            source="map-degenerate",
            seed=seed,
        )
    raise InferenceError(f"cannot sample from {type(post).__name__}")


def degenerate_sample_set(
    table: ProbTable, params: np.ndarray, s: int
) -> PosteriorSampleSet:
    """Point-mass sample set around a fixed table (point-estimate mode)."""
    return PosteriorSampleSet(
        tables=(table,) * s,
        params=np.tile(params, (s, 1)),
        source="map-degenerate",
        seed=None,
    )


def posterior_predictive(samples: PosteriorSampleSet) -> ProbTable:
    """Entrywise mean of the sampled tables (the parameter-averaged
    conditional distribution)."""
    support = samples.tables[0].support
    for t in samples.tables[1:]:
        if not np.array_equal(t.support, support):
            raise InferenceError("sampled tables disagree on support")
    probs = np.mean([t.probs for t in samples.tables], axis=0)
    if support.any():
        drift = np.abs(probs[support].sum(axis=1) - 1.0).max()
        if drift > 1e-12:
            probs = probs.copy()
            probs[support] /= probs[support].sum(axis=1, keepdims=True)
    return ProbTable(probs=probs, support=support.copy())
