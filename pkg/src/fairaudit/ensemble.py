"""Bayesian model averaging over fitted estimators.

Model weights follow a uniform model prior: each member is scored by the
count-weighted log of its posterior-predictive table (a pseudo marginal
likelihood), and weights are the softmax of those log scores.  Metric
posteriors pool member samples in proportion to the weights; the ensemble
predictive is the weight-averaged table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .data import CountTable
from .inference import PosteriorSampleSet
from .metrics import (
    GroupWeights,
    MetricPosterior,
    ProbTable,
    metric_value,
)
from .models import ModelSpec

__all__ = [
    "EnsembleMember",
    "EnsembleFit",
    "EnsembleError",
    "model_weights",
    "build_ensemble",
    "ensemble_metric_posterior",
    "ensemble_predictive",
    "pool_samples",
]


class EnsembleError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleMember:
    name: str
    spec: ModelSpec
    samples: PosteriorSampleSet
    predictive: ProbTable


@dataclass(frozen=True)
class EnsembleFit:
    members: tuple[EnsembleMember, ...]
    weights: np.ndarray
    log_scores: np.ndarray
    zero_weight_members: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "members": [m.name for m in self.members],
            "weights": [float(w) for w in self.weights],
            "log_scores": [
                float(s) if math.isfinite(s) else "-Infinity" for s in self.log_scores
            ],
            "zero_weight_members": list(self.zero_weight_members),
        }


def model_weights(
    predictives: Sequence[ProbTable], counts: CountTable
) -> tuple[np.ndarray, np.ndarray]:
    """Log scores and softmax weights for a list of predictive tables.

    A member whose predictive assigns probability 0 (or is undefined)
    where the data has positive counts gets log score -inf and weight 0.
    """
    if not predictives:
        raise EnsembleError("no ensemble members")
    n = counts.counts.astype(np.float64)
    log_scores = np.empty(len(predictives))
    for k, table in enumerate(predictives):
        if table.probs.shape != n.shape:
            raise EnsembleError("predictive table shape mismatch")
        with np.errstate(divide="ignore"):
            logs = np.log(table.probs)
        observed = n > 0
        undefined = observed & ~table.support[:, None]
        impossible = observed & np.isneginf(logs)
        if undefined.any() or impossible.any():
            log_scores[k] = -math.inf
            continue
        log_scores[k] = float((n[observed] * logs[observed]).sum())
    finite = np.isfinite(log_scores)
    if not finite.any():
        raise EnsembleError("every member assigns zero likelihood to the data")
    shifted = log_scores - log_scores[finite].max()
    weights = np.where(finite, np.exp(np.where(finite, shifted, 0.0)), 0.0)
    weights /= weights.sum()
    return log_scores, weights


def build_ensemble(
    members: Sequence[EnsembleMember], counts: CountTable
) -> EnsembleFit:
    log_scores, weights = model_weights([m.predictive for m in members], counts)
    flagged = tuple(
        m.name for m, s in zip(members, log_scores) if not math.isfinite(s)
    )
    return EnsembleFit(
        members=tuple(members),
        weights=weights,
        log_scores=log_scores,
        zero_weight_members=flagged,
    )


def pool_samples(
    sample_lists: Sequence[Sequence[float]],
    weights: np.ndarray,
    total: int,
) -> list[float]:
    """Stratified pooling: round(weight_k * total) draws from member k,
    cycling a member's list if it holds fewer values."""
    pooled: list[float] = []
    for vals, w in zip(sample_lists, weights):
        take = int(round(float(w) * total))
        if take <= 0 or len(vals) == 0:
            continue
        reps = -(-take // len(vals))  # ceil
        pooled.extend((list(vals) * reps)[:take])
    if not pooled:
        raise EnsembleError("stratified pooling produced no samples")
    return pooled


def ensemble_metric_posterior(
    fit: EnsembleFit,
    which: Literal["df", "sf"],
    w: GroupWeights | None,
    outcomes: Sequence[int] | None = None,
) -> MetricPosterior:
    """Pooled metric posterior across members plus the metric of the
    ensemble predictive table."""
    if not fit.members:
        raise EnsembleError("empty ensemble")
    total = max(m.samples.n_samples for m in fit.members)
    per_member = [
        [metric_value(which, t, w, outcomes) for t in m.samples.tables]
        for m in fit.members
    ]
    pooled = pool_samples(per_member, fit.weights, total)
    point = metric_value(which, ensemble_predictive(fit), w, outcomes)
    return MetricPosterior.from_samples(pooled, point)


def ensemble_predictive(fit: EnsembleFit) -> ProbTable:
    """Weight-averaged posterior-predictive table.

    A group is supported only where every positive-weight member supports
    it (convexity keeps supported rows on the simplex).
    """
    if not fit.members:
        raise EnsembleError("empty ensemble")
    n_groups, n_out = fit.members[0].predictive.probs.shape
    support = np.ones(n_groups, dtype=bool)
    probs = np.zeros((n_groups, n_out))
    for m, w in zip(fit.members, fit.weights):
        if w <= 0:
            continue
        support &= m.predictive.support
        probs += w * m.predictive.probs
    probs[~support] = 0.0
    return ProbTable(probs=probs, support=support)
