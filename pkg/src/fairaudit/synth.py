"""Semi-synthetic data with analytic ground-truth fairness metrics.

Each individual gets a latent risk score drawn from a unit-variance
Gaussian whose mean is a group-specific weight times the sum of the
group's 1-based category codes; the label is the threshold decision
``score >= t``.  The positive rate per group is then exactly
``1 - Phi(t - mean)``, so the true table — and hence the true metric
values — are available in closed form for validating estimators.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .data import CountTable, Dataset, GroupIndex, Provenance
from .metrics import GroupWeights, ProbTable, epsilon_df, gamma_sf

__all__ = ["SynthSpec", "SynthError", "make_weights", "generate", "analytic_truth"]


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    """Generator configuration: per-group sizes and weights, threshold,
    seed.  The score noise scale is fixed at 1."""

    groups: GroupIndex
    counts: np.ndarray  # (|A|,) int, instances per group
    weights: np.ndarray  # (|A|,) float in (0, 1)
    threshold: float = 2.5
    seed: int = 0

    def __post_init__(self):
        g = self.groups.n_groups
        if self.counts.shape != (g,) or self.weights.shape != (g,):
            raise SynthError("counts/weights must have one entry per group")
        if (self.counts < 0).any():
            raise SynthError("negative group count")
        if (self.weights <= 0).any() or (self.weights >= 1).any():
            raise SynthError("weights must lie strictly in (0, 1)")
        if not math.isfinite(self.threshold):
            raise SynthError("threshold must be finite")
        if self.groups.schema.n_outcomes != 2:
            raise SynthError("generator produces binary labels; "
                             "schema must have two outcome labels")

    def group_means(self) -> np.ndarray:
        codes = np.asarray(self.groups.groups) + 1  # 1-based category codes
        return self.weights * codes.sum(axis=1)

    def to_dict(self) -> dict:
        return {
            "schema": self.groups.schema.to_dict(),
            "counts": self.counts.tolist(),
            "weights": self.weights.tolist(),
            "threshold": self.threshold,
            "seed": self.seed,
        }

    def to_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        from .data import Schema

        return cls(
            groups=GroupIndex.from_schema(Schema.from_dict(d["schema"])),
            counts=np.asarray(d["counts"], dtype=np.int64),
            weights=np.asarray(d["weights"], dtype=np.float64),
            threshold=float(d["threshold"]),
            seed=int(d["seed"]),
        )


def make_weights(reference: CountTable, delta: float = 0.01) -> np.ndarray:
    """Group weights from a reference table's empirical positive rates,
    shifted by ``delta`` and clamped into (0, 1).  Groups with no data get
    weight ``delta``."""
    if not 0 < delta < 0.5:
        raise SynthError("delta must lie in (0, 0.5)")
    if reference.n_outcomes != 2:
        raise SynthError("reference table must be binary")
    sup = reference.group_totals > 0
    rate = np.where(
        sup,
        reference.counts[:, 1] / np.maximum(reference.group_totals, 1),
        0.0,
    )
    return np.clip(rate + delta, delta, 1.0 - delta)


def generate(spec: SynthSpec) -> Dataset:
    """Draw the configured number of scores per group and threshold them
    into labels.  The raw score is kept as a pass-through column so a
    reference mechanism can be trained on it."""
    rng = np.random.default_rng(spec.seed)
    means = spec.group_means()
    attr_rows = []
    labels = []
    scores = []
    tuples = np.asarray(spec.groups.groups)
    for j in range(spec.groups.n_groups):
        c = int(spec.counts[j])
        if c == 0:
            continue
        x = rng.normal(loc=means[j], scale=1.0, size=c)
        attr_rows.append(np.tile(tuples[j], (c, 1)))
        labels.append((x >= spec.threshold).astype(np.int64))
        scores.append(x)
    if not attr_rows:
        raise SynthError("spec generates no rows")
    attrs = np.concatenate(attr_rows, axis=0)
    outcomes = np.concatenate(labels)
    score_col = tuple(repr(float(x)) for x in np.concatenate(scores))
    return Dataset(
        schema=spec.groups.schema,
        attributes=attrs,
        outcomes=outcomes,
        extras={"risk_score": score_col},
        provenance=Provenance(source="synthetic", seed=spec.seed),
    )


def analytic_truth(spec: SynthSpec) -> tuple[ProbTable, float, float]:
    """Exact conditional table and the metric values it implies.

    ``p(y=1|s) = 1 - Phi(t - mean_s)``; group weights come from the
    configured per-group counts.
    """
    means = spec.group_means()
    p1 = 1.0 - ndtr(spec.threshold - means)
    table = ProbTable.dense(np.column_stack([1.0 - p1, p1]))
    total = spec.counts.sum()
    if total <= 0:
        raise SynthError("spec has no instances to weight groups by")
    weights = GroupWeights(weights=spec.counts / total)
    eps = epsilon_df(table)
    gam = gamma_sf(table, weights)
    return table, eps, gam
