"""Intersectional fairness metrics over conditional-probability tables.

Two metrics are implemented:

* ``epsilon_df`` — the smallest bound on all pairwise log-ratios of
  outcome probabilities across groups: ``max |log p(y|s_i) - log p(y|s_j)|``
  over every ordered pair of supported groups and every outcome.  Equals 0
  iff all supported rows agree; returns ``inf`` when one group assigns an
  outcome probability 0 while another assigns it positive mass.
* ``gamma_sf`` — the largest group-weighted statistical-parity gap:
  ``max_s |P(y=1) - P(y=1|s)| * w(s)`` with the marginal taken under the
  group weights (binary outcome, index 1 = positive).

Both use natural logarithms; the 80%-rule audit constant is
``-log 0.8 = 0.22314``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np

from .data import CountTable, GroupIndex

__all__ = [
    "EIGHTY_PERCENT_RULE_EPSILON",
    "ProbTable",
    "GroupWeights",
    "MetricPosterior",
    "MetricError",
    "epsilon_df",
    "gamma_sf",
    "smoothed_edf_table",
    "empirical_table",
    "bias_amplification",
    "metric_posterior",
    "metric_value",
    "marginalize",
]

# Disparate-impact threshold: evidence of discrimination when the
# favorable-outcome ratio between two groups falls below 80%.
EIGHTY_PERCENT_RULE_EPSILON = -math.log(0.8)

_ROW_SUM_TOL = 1e-9


class MetricError(ValueError):
    """Raised on metric preconditions (support, outcome arity, weights)."""


@dataclass(frozen=True)
class ProbTable:
    """Conditional distribution P(y|s) for every group.

    ``support`` flags the groups where the table is defined; unsupported
    rows are never read.  Supported rows must be valid distributions.
    """

    probs: np.ndarray  # (|A|, |Y|) float
    support: np.ndarray  # (|A|,) bool

    def __post_init__(self):
        p = self.probs
        if p.ndim != 2:
            raise MetricError("probability table must be 2-D")
        if self.support.shape != (p.shape[0],):
            raise MetricError("support flag length mismatch")
        sup = p[self.support]
        if sup.size:
            if (sup < -1e-12).any() or (sup > 1 + 1e-12).any():
                raise MetricError("probabilities outside [0, 1]")
            if np.abs(sup.sum(axis=1) - 1.0).max() > _ROW_SUM_TOL:
                raise MetricError("supported rows must sum to 1")

    @classmethod
    def dense(cls, probs: np.ndarray) -> "ProbTable":
        probs = np.asarray(probs, dtype=np.float64)
        return cls(probs=probs, support=np.ones(probs.shape[0], dtype=bool))

    @property
    def n_groups(self) -> int:
        return self.probs.shape[0]

    @property
    def n_outcomes(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class GroupWeights:
    """Group membership probabilities w(s); typically empirical N_s/N."""

    weights: np.ndarray  # (|A|,) float

    def __post_init__(self):
        if (self.weights < -1e-12).any():
            raise MetricError("negative group weight")

    @classmethod
    def from_counts(cls, c: CountTable) -> "GroupWeights":
        if c.grand_total == 0:
            raise MetricError("cannot weight an empty count table")
        return cls(weights=c.group_totals / c.grand_total)

    @classmethod
    def uniform(cls, n_groups: int) -> "GroupWeights":
        return cls(weights=np.full(n_groups, 1.0 / n_groups))

    def validate_for(self, t: ProbTable) -> None:
        if self.weights.shape != (t.n_groups,):
            raise MetricError("weight length does not match table")
        total = self.weights[t.support].sum()
        if abs(total - 1.0) > _ROW_SUM_TOL:
            raise MetricError(
                f"weights over supported groups sum to {total}, expected 1"
            )


def epsilon_df(t: ProbTable, outcomes: Sequence[int] | None = None) -> float:
    """Differential-fairness bound of a probability table.

    ``outcomes`` restricts the scan to the given outcome indices (the
    80% rule strictly audits the favorable outcome only); default is all.
    Returns ``inf`` when, for some outcome, a supported group has
    probability 0 and another has positive probability.
    """
    sup = t.probs[t.support]
    if sup.shape[0] < 2:
        raise MetricError("need >= 2 supported groups")
    cols = range(t.n_outcomes) if outcomes is None else outcomes
    eps = 0.0
    for y in cols:
        col = sup[:, y]
        zero = col <= 0.0
        if zero.all():
            continue  # every group agrees: no mass on this outcome
        if zero.any():
            return math.inf
        spread = float(np.log(col.max()) - np.log(col.min()))
        eps = max(eps, spread)
    return eps


def gamma_sf(t: ProbTable, w: GroupWeights) -> float:
    """Statistical-parity subgroup fairness over the intersectional
    partition: the largest ``|P(y=1) - P(y=1|s)| * w(s)``."""
    if t.n_outcomes != 2:
        raise MetricError("subgroup fairness needs a binary outcome")
    w.validate_for(t)
    ws = w.weights[t.support]
    ps = t.probs[t.support, 1]
    marginal = float(ws @ ps)
    return float(np.max(np.abs(marginal - ps) * ws))


def smoothed_edf_table(c: CountTable, alpha: float) -> ProbTable:
    """Additively smoothed conditional table:
    ``(N_{y,s} + alpha) / (N_s + |Y| * alpha)``.

    Defined for every group, including empty ones (prior-only rows);
    equals the posterior-predictive mean of a symmetric Dirichlet prior
    with per-outcome pseudo-count ``alpha``.
    """
    if alpha <= 0:
        raise MetricError("alpha must be > 0")
    k = c.n_outcomes
    probs = (c.counts + alpha) / (c.group_totals[:, None] + k * alpha)
    return ProbTable.dense(probs)


def empirical_table(c: CountTable) -> ProbTable:
    """Raw frequency table ``N_{y,s} / N_s``; empty groups unsupported."""
    support = c.group_totals > 0
    probs = np.zeros_like(c.counts, dtype=np.float64)
    totals = np.where(support, c.group_totals, 1)
    probs[:] = c.counts / totals[:, None]
    return ProbTable(probs=probs, support=support)


def bias_amplification(metric_mech: float, metric_data: float) -> float:
    """Mechanism metric minus data metric; positive means the mechanism
    amplifies the unfairness already present in the data."""
    if not (math.isfinite(metric_mech) and math.isfinite(metric_data)):
        raise MetricError("bias amplification needs finite metric values")
    return metric_mech - metric_data


@dataclass(frozen=True)
class MetricPosterior:
    """Posterior distribution of a metric plus its predictive point.

    ``samples`` holds one metric value per posterior draw; ``summary``
    is the boxplot statistic set (min, lower quartile, median, upper
    quartile, max, mean), always recomputable from the samples.
    ``predictive_point`` is the metric of the posterior-predictive table —
    a different estimate from the posterior median, and the two can
    genuinely disagree.
    """

    samples: tuple[float, ...]
    summary: dict[str, float]
    predictive_point: float | None

    @classmethod
    def from_samples(
        cls, samples: Iterable[float], predictive_point: float | None
    ) -> "MetricPosterior":
        vals = np.asarray(list(samples), dtype=np.float64)
        if vals.size == 0:
            raise MetricError("empty sample set")
        return cls(
            samples=tuple(float(v) for v in vals),
            summary=summarize_samples(vals),
            predictive_point=predictive_point,
        )

    def to_dict(self, include_samples: bool = False) -> dict:
        out = {
            "summary": {k: _jsonable_float(v) for k, v in self.summary.items()},
            "predictive_point": _jsonable_float(self.predictive_point),
        }
        if include_samples:
            out["samples"] = [_jsonable_float(v) for v in self.samples]
        return out


def _quantile(sorted_vals: np.ndarray, q: float) -> float:
    # linear interpolation, but robust to +/-inf entries (inf - inf would
    # otherwise yield NaN between equal-sign infinities)
    pos = (sorted_vals.size - 1) * q
    lo = int(math.floor(pos))
    hi = int(math.ceil(pos))
    a, b = float(sorted_vals[lo]), float(sorted_vals[hi])
    if a == b:
        return a
    return a + (pos - lo) * (b - a)


def summarize_samples(vals: np.ndarray) -> dict[str, float]:
    s = np.sort(np.asarray(vals, dtype=np.float64))
    return {
        "min": float(s[0]),
        "lower_quartile": _quantile(s, 0.25),
        "median": _quantile(s, 0.5),
        "upper_quartile": _quantile(s, 0.75),
        "max": float(s[-1]),
        "mean": float(np.mean(s)),
    }


def _jsonable_float(v: float | None):
    # json.dump would emit bare Infinity/NaN tokens, which are not JSON;
    # non-finite values become explicit strings instead.
    if v is None:
        return None
    if math.isfinite(v):
        return float(v)
    if math.isnan(v):
        return "NaN"
    return "Infinity" if v > 0 else "-Infinity"


def metric_value(
    which: Literal["df", "sf"],
    t: ProbTable,
    w: GroupWeights | None,
    outcomes: Sequence[int] | None = None,
) -> float:
    if which == "df":
        return epsilon_df(t, outcomes=outcomes)
    if which == "sf":
        if w is None:
            raise MetricError("subgroup fairness needs group weights")
        return gamma_sf(t, w)
    raise MetricError(f"unknown metric {which!r}")


def metric_posterior(
    tables: Sequence[ProbTable],
    which: Literal["df", "sf"],
    w: GroupWeights | None,
    predictive: ProbTable,
    outcomes: Sequence[int] | None = None,
) -> MetricPosterior:
    """Metric applied to each sampled table, summarized, with the metric
    of the posterior-predictive table reported alongside."""
    if len(tables) < 2:
        raise MetricError("need >= 2 posterior sample tables")
    samples = [metric_value(which, t, w, outcomes) for t in tables]
    point = metric_value(which, predictive, w, outcomes)
    return MetricPosterior.from_samples(samples, point)


def marginalize(
    t: ProbTable, w: GroupWeights, groups: GroupIndex, drop_attribute: int
) -> tuple[ProbTable, GroupWeights]:
    """Collapse one protected attribute out of the table.

    Each collapsed row is the weight-conditional mixture of its parent
    rows, so fairness of the coarser partition is measurable from the
    finer one; collapsed weights are the summed parent weights.
    """
    sizes = groups.attribute_sizes
    p = len(sizes)
    if not 0 <= drop_attribute < p:
        raise MetricError("attribute index out of range")
    w.validate_for(t)

    full = np.arange(groups.n_groups).reshape(sizes)
    # move the dropped axis last: rows of `cells` list the parents of one
    # collapsed group
    cells = np.moveaxis(full, drop_attribute, -1).reshape(-1, sizes[drop_attribute])

    n_out = t.n_outcomes
    probs = np.zeros((cells.shape[0], n_out))
    support = np.zeros(cells.shape[0], dtype=bool)
    weights = np.zeros(cells.shape[0])
    for j, members in enumerate(cells):
        sub = members[t.support[members]]
        weights[j] = w.weights[members].sum()
        if sub.size == 0:
            continue
        wsub = w.weights[sub]
        total = wsub.sum()
        if total <= 0:
            raise MetricError(
                f"all-zero weight within collapsed cell {j} (supported groups)"
            )
        probs[j] = (wsub / total) @ t.probs[sub]
        support[j] = True
    return ProbTable(probs=probs, support=support), GroupWeights(weights=weights)
