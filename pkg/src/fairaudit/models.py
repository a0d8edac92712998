"""Probabilistic models of P(y|s) over intersectional groups.

Five families, ordered roughly from high statistical bias to high variance:

* ``dirichlet_multinomial`` — one outcome distribution per group with a
  symmetric Dirichlet prior (the smoothed-frequency baseline).
* ``naive_bayes`` — class distribution plus per-class, per-attribute
  categorical distributions, all with Dirichlet priors.  Trained
  generatively on (s, y) pairs; P(y|s) is recovered by Bayes rule.
* ``logistic_regression`` — Gaussian-prior coefficients on the one-hot
  group encoding; binary outcome.
* ``hlr`` — hierarchical logistic regression: per-group logits drawn from
  a Gaussian centered on a shared linear predictor, with an Exponential
  prior on the deviation scale.  Pools information across groups while
  letting well-observed groups deviate.
* ``bayes_nn`` — a small feed-forward network (rectifier hidden layers,
  logistic output) with independent Gaussian priors on all weights.

All families share one unconstrained flat parameter vector: probability
rows go through a stick-breaking transform (Jacobian included in the
density), positive scales through a log transform.  ``log_joint`` and
``grad_log_joint`` are therefore densities over R^D, ready for
gradient-based MAP search and Gaussian mean-field variational inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from functools import lru_cache, reduce

import numpy as np
from scipy.special import gammaln

from .data import CountTable, GroupIndex
from .metrics import ProbTable, smoothed_edf_table

__all__ = [
    "FAMILIES",
    "ModelSpec",
    "ModelError",
    "ExactPosterior",
    "param_length",
    "param_names",
    "log_prior",
    "log_likelihood",
    "log_joint",
    "grad_log_joint",
    "value_and_grad",
    "predict_table",
    "exact_posterior",
    "sigmoid",
    "softplus",
]

FAMILIES = (
    "dirichlet_multinomial",
    "naive_bayes",
    "logistic_regression",
    "hlr",
    "bayes_nn",
)

_BINARY_ONLY = ("logistic_regression", "hlr", "bayes_nn")


class ModelError(ValueError):
    """Raised on spec/parameter/count inconsistencies."""


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    """Stable log(1 + exp(z))."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _normal_logpdf(x, mu, sigma):
    return -0.5 * ((x - mu) / sigma) ** 2 - math.log(sigma) - 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class ModelSpec:
    """Family tag, data dimensions, and prior hyperparameters.

    ``alpha`` is the Dirichlet pseudo-count of the per-group model;
    ``alpha_class``/``alpha_attr`` are the naive-Bayes Dirichlet
    pseudo-counts; ``mu``/``sigma1`` the Gaussian prior on regression
    weights; ``lam`` the Exponential rate on the hierarchical deviation
    scale; ``hidden_layers``/``hidden_width`` the network shape.
    """

    family: str
    attribute_sizes: tuple[int, ...]
    n_outcomes: int
    alpha: float = 1.0
    alpha_class: float = 1.0
    alpha_attr: float = 1.0
    mu: float = 0.0
    sigma1: float = 10.0
    lam: float = 1.0
    hidden_layers: int = 3
    hidden_width: int = 10

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(
                f"unknown family {self.family!r}; expected one of {FAMILIES}"
            )
        if not self.attribute_sizes or any(k < 2 for k in self.attribute_sizes):
            raise ModelError("attribute sizes must all be >= 2")
        if self.n_outcomes < 2:
            raise ModelError("need >= 2 outcomes")
        if self.family in _BINARY_ONLY and self.n_outcomes != 2:
            raise ModelError(f"{self.family} supports binary outcomes only")
        for nm in ("alpha", "alpha_class", "alpha_attr", "sigma1", "lam"):
            if getattr(self, nm) <= 0:
                raise ModelError(f"{nm} must be > 0")
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ModelError("network shape must be positive")

    @classmethod
    def for_groups(cls, family: str, groups: GroupIndex, n_outcomes: int, **hyper):
        return cls(
            family=family,
            attribute_sizes=groups.attribute_sizes,
            n_outcomes=n_outcomes,
            **hyper,
        )

    @property
    def n_groups(self) -> int:
        return reduce(lambda a, b: a * b, self.attribute_sizes, 1)

    @property
    def encoding_dim(self) -> int:
        return sum(self.attribute_sizes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attribute_sizes"] = list(self.attribute_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["attribute_sizes"] = tuple(d["attribute_sizes"])
        return cls(**d)


# ----------------------------------------------------------------------
# Parameter layout
# ----------------------------------------------------------------------


def _layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    G, K, E = spec.n_groups, spec.n_outcomes, spec.encoding_dim
    if spec.family == "dirichlet_multinomial":
        return [("prob_sticks", (G, K - 1))]
    if spec.family == "naive_bayes":
        fields = [("class_sticks", (K - 1,))]
        for y in range(K):
            for d, size in enumerate(spec.attribute_sizes):
                fields.append((f"attr{d}_y{y}_sticks", (size - 1,)))
        return fields
    if spec.family == "logistic_regression":
        return [("beta", (E,)), ("intercept", (1,))]
    if spec.family == "hlr":
        return [
            ("beta", (E,)),
            ("intercept", (1,)),
            ("group_logits", (G,)),
            ("log_scale", (1,)),
        ]
    if spec.family == "bayes_nn":
        h = spec.hidden_width
        fields = []
        fan_in = E
        for l in range(spec.hidden_layers):
            fields.append((f"w{l}", (fan_in, h)))
            fields.append((f"b{l}", (h,)))
            fan_in = h
        fields.append(("w_out", (h,)))
        fields.append(("b_out", (1,)))
        return fields
    raise ModelError(spec.family)


def param_length(spec: ModelSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape in _layout(spec))


def param_names(spec: ModelSpec) -> list[str]:
    return [name for name, _ in _layout(spec)]


def _unpack(spec: ModelSpec, params: np.ndarray) -> dict[str, np.ndarray]:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (param_length(spec),):
        raise ModelError(
            f"parameter vector has length {params.shape}, "
            f"expected ({param_length(spec)},) for family {spec.family!r}"
        )
    views = {}
    off = 0
    for name, shape in _layout(spec):
        size = int(np.prod(shape))
        views[name] = params[off : off + size].reshape(shape)
        off += size
    return views


def _pack(spec: ModelSpec, views: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate(
        [np.asarray(views[name], dtype=np.float64).ravel() for name, _ in _layout(spec)]
    )


def _check_counts(spec: ModelSpec, counts: CountTable) -> None:
    if counts.n_groups != spec.n_groups or counts.n_outcomes != spec.n_outcomes:
        raise ModelError(
            f"count table is {counts.counts.shape}, spec expects "
            f"({spec.n_groups}, {spec.n_outcomes})"
        )


# ----------------------------------------------------------------------
# Stick-breaking transform (R^{K-1} -> simplex^K), Jacobian included
# ----------------------------------------------------------------------


@lru_cache(maxsize=None)
def _sb_offsets(k: int) -> np.ndarray:
    # zero input maps to the uniform distribution
    return np.log(np.arange(k - 1, 0, -1, dtype=np.float64))


def _sb_forward(y: np.ndarray):
    """Rows of sticks -> (probs, log_probs, log_jacobian) per row."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    b, km1 = y.shape
    k = km1 + 1
    u = y - _sb_offsets(k)
    log_z = -softplus(-u)
    log_1mz = -softplus(u)
    log_rem = np.concatenate(
        [np.zeros((b, 1)), np.cumsum(log_1mz, axis=1)], axis=1
    )  # (b, k)
    log_probs = np.concatenate([log_z + log_rem[:, :-1], log_rem[:, -1:]], axis=1)
    log_jac = (log_z + log_1mz + log_rem[:, :-1]).sum(axis=1)
    return np.exp(log_probs), log_probs, log_jac


def _sb_inverse(probs: np.ndarray) -> np.ndarray:
    """Interior simplex rows -> sticks (clipped to keep logits finite)."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    b, k = probs.shape
    y = np.empty((b, k - 1))
    rem = np.ones(b)
    for j in range(k - 1):
        z = np.clip(probs[:, j] / np.maximum(rem, 1e-300), 1e-12, 1 - 1e-12)
        y[:, j] = np.log(z) - np.log1p(-z) + math.log(k - 1 - j)
        rem = rem - probs[:, j]
    return y


def _sb_block_grad(y: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Gradient wrt sticks of sum_k a_k log x_k + log|Jacobian| per row.

    Closed form: with z the stick fractions and, for stick j (0-based),
    T_j the sum of a over outcomes after j, the j-th partial is
    (a_j + 1)(1 - z_j) - (T_j + K - j - 1) z_j.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b, km1 = y.shape
    k = km1 + 1
    z = sigmoid(y - _sb_offsets(k))
    tail = np.concatenate(
        [np.cumsum(a[:, ::-1], axis=1)[:, ::-1], np.zeros((b, 1))], axis=1
    )[:, 1:]  # tail[:, j] = sum_{k' > j} a_{k'}
    coef = tail[:, :km1] + (k - np.arange(km1) - 1)
    return (a[:, :km1] + 1.0) * (1.0 - z) - coef * z


def _dirichlet_log_norm(k: int, alpha: float) -> float:
    return k * gammaln(alpha) - gammaln(k * alpha)


# ----------------------------------------------------------------------
# Naive Bayes sufficient statistics
# ----------------------------------------------------------------------


def _nb_stats(spec: ModelSpec, counts: CountTable):
    """Class counts N_y and per-attribute counts M[d][y, v]."""
    k = spec.n_outcomes
    cube = counts.counts.reshape(spec.attribute_sizes + (k,))
    class_counts = counts.counts.sum(axis=0)
    attr_counts = []
    p = len(spec.attribute_sizes)
    for d in range(p):
        axes = tuple(i for i in range(p) if i != d)
        m = cube.sum(axis=axes)  # (S_d, k)
        attr_counts.append(m.T.astype(np.float64))  # (k, S_d)
    return class_counts.astype(np.float64), attr_counts


# ----------------------------------------------------------------------
# Per-family value / gradient / prediction
# ----------------------------------------------------------------------


def log_prior(spec: ModelSpec, params: np.ndarray) -> float:
    """Log prior density over the unconstrained parameter vector
    (transform Jacobians included)."""
    v = _unpack(spec, params)
    fam = spec.family
    if fam == "dirichlet_multinomial":
        a = np.full((spec.n_groups, spec.n_outcomes), spec.alpha - 1.0)
        _, log_probs, log_jac = _sb_forward(v["prob_sticks"])
        val = float((a * log_probs).sum() + log_jac.sum())
        return val - spec.n_groups * _dirichlet_log_norm(spec.n_outcomes, spec.alpha)
    if fam == "naive_bayes":
        k = spec.n_outcomes
        total = 0.0
        _, lp, lj = _sb_forward(v["class_sticks"])
        total += float(((spec.alpha_class - 1.0) * lp).sum() + lj.sum())
        total -= _dirichlet_log_norm(k, spec.alpha_class)
        for y in range(k):
            for d, size in enumerate(spec.attribute_sizes):
                _, lp, lj = _sb_forward(v[f"attr{d}_y{y}_sticks"])
                total += float(((spec.alpha_attr - 1.0) * lp).sum() + lj.sum())
                total -= _dirichlet_log_norm(size, spec.alpha_attr)
        return total
    if fam == "logistic_regression":
        return float(
            _normal_logpdf(v["beta"], spec.mu, spec.sigma1).sum()
            + _normal_logpdf(v["intercept"], spec.mu, spec.sigma1).sum()
        )
    if fam == "hlr":
        t = float(v["log_scale"][0])
        s2 = math.exp(t)
        enc = _group_encodings(spec)
        eta = enc @ v["beta"] + v["intercept"][0]
        gam = v["group_logits"]
        val = float(
            _normal_logpdf(v["beta"], spec.mu, spec.sigma1).sum()
            + _normal_logpdf(v["intercept"], spec.mu, spec.sigma1).sum()
        )
        val += float(
            (-0.5 * ((gam - eta) / s2) ** 2 - t - 0.5 * math.log(2 * math.pi)).sum()
        )
        # Exponential(lam) on the scale, log-transformed (Jacobian +t)
        val += math.log(spec.lam) - spec.lam * s2 + t
        return val
    if fam == "bayes_nn":
        total = 0.0
        for name, _ in _layout(spec):
            total += float(_normal_logpdf(v[name], 0.0, spec.sigma1).sum())
        return total
    raise ModelError(fam)


def log_likelihood(spec: ModelSpec, params: np.ndarray, counts: CountTable) -> float:
    """Count-weighted log likelihood.  Conditional Bernoulli for the
    regression families; generative (joint over s and y) for naive Bayes,
    matching its conjugate treatment."""
    _check_counts(spec, counts)
    v = _unpack(spec, params)
    fam = spec.family
    n = counts.counts.astype(np.float64)
    if fam == "dirichlet_multinomial":
        _, log_probs, _ = _sb_forward(v["prob_sticks"])
        return float((n * log_probs).sum())
    if fam == "naive_bayes":
        class_counts, attr_counts = _nb_stats(spec, counts)
        _, lp_class, _ = _sb_forward(v["class_sticks"])
        total = float((class_counts * lp_class[0]).sum())
        for y in range(spec.n_outcomes):
            for d, _size in enumerate(spec.attribute_sizes):
                _, lp, _ = _sb_forward(v[f"attr{d}_y{y}_sticks"])
                total += float((attr_counts[d][y] * lp[0]).sum())
        return total
    eta = _binary_logits(spec, v)
    n1, n0 = n[:, 1], n[:, 0]
    return float((-n1 * softplus(-eta) - n0 * softplus(eta)).sum())


def log_joint(spec: ModelSpec, params: np.ndarray, counts: CountTable) -> float:
    """log p(params) + count-weighted log likelihood; raises on NaN."""
    val = log_prior(spec, params) + log_likelihood(spec, params, counts)
    if math.isnan(val):
        raise ModelError("log joint evaluated to NaN")
    return val


@lru_cache(maxsize=None)
def _group_encodings(spec: ModelSpec) -> np.ndarray:
    sizes = spec.attribute_sizes
    n_groups = spec.n_groups
    enc = np.zeros((n_groups, sum(sizes)))
    idx = np.array(
        np.unravel_index(np.arange(n_groups), sizes)
    ).T  # (G, p), lexicographic
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    for d in range(len(sizes)):
        enc[np.arange(n_groups), offsets[d] + idx[:, d]] = 1.0
    return enc


@lru_cache(maxsize=None)
def _group_tuples(spec: ModelSpec) -> np.ndarray:
    return np.array(
        np.unravel_index(np.arange(spec.n_groups), spec.attribute_sizes)
    ).T


def _binary_logits(spec: ModelSpec, v: dict[str, np.ndarray]) -> np.ndarray:
    fam = spec.family
    if fam == "logistic_regression":
        return _group_encodings(spec) @ v["beta"] + v["intercept"][0]
    if fam == "hlr":
        return v["group_logits"].copy()
    if fam == "bayes_nn":
        h, _ = _nn_forward(spec, v)
        return h
    raise ModelError(f"{fam} has no binary logit form")


def _nn_forward(spec: ModelSpec, v: dict[str, np.ndarray]):
    x = _group_encodings(spec)
    pre = []
    acts = [x]
    for l in range(spec.hidden_layers):
        z = acts[-1] @ v[f"w{l}"] + v[f"b{l}"]
        pre.append(z)
        acts.append(np.maximum(z, 0.0))
    eta = acts[-1] @ v["w_out"] + v["b_out"][0]
    return eta, (pre, acts)


def value_and_grad(
    spec: ModelSpec, params: np.ndarray, counts: CountTable
) -> tuple[float, np.ndarray]:
    """log_joint and its exact gradient in one pass."""
    _check_counts(spec, counts)
    v = _unpack(spec, params)
    fam = spec.family
    n = counts.counts.astype(np.float64)
    g: dict[str, np.ndarray] = {}

    if fam == "dirichlet_multinomial":
        a = n + (spec.alpha - 1.0)
        _, log_probs, log_jac = _sb_forward(v["prob_sticks"])
        val = float((a * log_probs).sum() + log_jac.sum())
        val -= spec.n_groups * _dirichlet_log_norm(spec.n_outcomes, spec.alpha)
        g["prob_sticks"] = _sb_block_grad(v["prob_sticks"], a)

    elif fam == "naive_bayes":
        k = spec.n_outcomes
        class_counts, attr_counts = _nb_stats(spec, counts)
        val = 0.0
        a = class_counts + (spec.alpha_class - 1.0)
        _, lp, lj = _sb_forward(v["class_sticks"])
        val += float((a * lp[0]).sum() + lj.sum())
        val -= _dirichlet_log_norm(k, spec.alpha_class)
        g["class_sticks"] = _sb_block_grad(v["class_sticks"], a)[0]
        for y in range(k):
            for d, size in enumerate(spec.attribute_sizes):
                name = f"attr{d}_y{y}_sticks"
                a = attr_counts[d][y] + (spec.alpha_attr - 1.0)
                _, lp, lj = _sb_forward(v[name])
                val += float((a * lp[0]).sum() + lj.sum())
                val -= _dirichlet_log_norm(size, spec.alpha_attr)
                g[name] = _sb_block_grad(v[name], a)[0]

    elif fam == "logistic_regression":
        enc = _group_encodings(spec)
        eta = enc @ v["beta"] + v["intercept"][0]
        p = sigmoid(eta)
        n1, n0 = n[:, 1], n[:, 0]
        tot = n1 + n0
        val = float((-n1 * softplus(-eta) - n0 * softplus(eta)).sum())
        val += float(
            _normal_logpdf(v["beta"], spec.mu, spec.sigma1).sum()
            + _normal_logpdf(v["intercept"], spec.mu, spec.sigma1).sum()
        )
        resid = n1 - tot * p
        g["beta"] = enc.T @ resid - (v["beta"] - spec.mu) / spec.sigma1**2
        g["intercept"] = np.array(
            [resid.sum() - (v["intercept"][0] - spec.mu) / spec.sigma1**2]
        )

    elif fam == "hlr":
        enc = _group_encodings(spec)
        t = float(v["log_scale"][0])
        s2 = math.exp(t)
        eta = enc @ v["beta"] + v["intercept"][0]
        gam = v["group_logits"]
        dev = gam - eta
        p = sigmoid(gam)
        n1, n0 = n[:, 1], n[:, 0]
        tot = n1 + n0
        val = float((-n1 * softplus(-gam) - n0 * softplus(gam)).sum())
        val += float(
            _normal_logpdf(v["beta"], spec.mu, spec.sigma1).sum()
            + _normal_logpdf(v["intercept"], spec.mu, spec.sigma1).sum()
        )
        val += float(
            (-0.5 * (dev / s2) ** 2 - t - 0.5 * math.log(2 * math.pi)).sum()
        )
        val += math.log(spec.lam) - spec.lam * s2 + t
        pull = dev / s2**2
        g["group_logits"] = -pull + (n1 - tot * p)
        g["beta"] = enc.T @ pull - (v["beta"] - spec.mu) / spec.sigma1**2
        g["intercept"] = np.array(
            [pull.sum() - (v["intercept"][0] - spec.mu) / spec.sigma1**2]
        )
        g["log_scale"] = np.array(
            [(-1.0 + (dev / s2) ** 2).sum() - spec.lam * s2 + 1.0]
        )

    elif fam == "bayes_nn":
        eta, (pre, acts) = _nn_forward(spec, v)
        p = sigmoid(eta)
        n1, n0 = n[:, 1], n[:, 0]
        tot = n1 + n0
        val = float((-n1 * softplus(-eta) - n0 * softplus(eta)).sum())
        d_eta = n1 - tot * p
        g["w_out"] = acts[-1].T @ d_eta
        g["b_out"] = np.array([d_eta.sum()])
        d_h = np.outer(d_eta, v["w_out"])
        for l in range(spec.hidden_layers - 1, -1, -1):
            d_z = d_h * (pre[l] > 0)
            g[f"w{l}"] = acts[l].T @ d_z
            g[f"b{l}"] = d_z.sum(axis=0)
            d_h = d_z @ v[f"w{l}"].T
        for name, _ in _layout(spec):
            val += float(_normal_logpdf(v[name], 0.0, spec.sigma1).sum())
            g[name] = g[name] - v[name] / spec.sigma1**2

    else:
        raise ModelError(fam)

    grad = _pack(spec, g)
    if math.isnan(val):
        raise ModelError("log joint evaluated to NaN")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise ModelError(f"non-finite gradient at parameter index {int(bad[0])}")
    return val, grad


def grad_log_joint(
    spec: ModelSpec, params: np.ndarray, counts: CountTable
) -> np.ndarray:
    return value_and_grad(spec, params, counts)[1]


def predict_table(
    spec: ModelSpec, params: np.ndarray, groups: GroupIndex
) -> ProbTable:
    """Conditional table P(y|s) for every group under the given params."""
    if groups.attribute_sizes != spec.attribute_sizes:
        raise ModelError("group index does not match spec dimensions")
    v = _unpack(spec, params)
    fam = spec.family
    if fam == "dirichlet_multinomial":
        probs, _, _ = _sb_forward(v["prob_sticks"])
        return ProbTable.dense(probs)
    if fam == "naive_bayes":
        k = spec.n_outcomes
        _, lp_class, _ = _sb_forward(v["class_sticks"])
        log_phi = []
        for d, _size in enumerate(spec.attribute_sizes):
            rows = [
                _sb_forward(v[f"attr{d}_y{y}_sticks"])[1][0] for y in range(k)
            ]
            log_phi.append(np.stack(rows))  # (k, S_d)
        cats = _group_tuples(spec)
        scores = np.tile(lp_class[0], (spec.n_groups, 1))  # (G, k)
        for d in range(len(spec.attribute_sizes)):
            scores += log_phi[d][:, cats[:, d]].T
        scores -= scores.max(axis=1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=1, keepdims=True)
        return ProbTable.dense(probs)
    p = sigmoid(_binary_logits(spec, v))
    return ProbTable.dense(np.column_stack([1.0 - p, p]))


# ----------------------------------------------------------------------
# Conjugate exact posteriors
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ExactPosterior:
    """Closed-form posterior for the conjugate families.

    ``dirichlet_multinomial``: per-group Dirichlet(counts + alpha).
    ``naive_bayes``: independent Dirichlets on the class distribution and
    each per-class attribute distribution.
    """

    spec: ModelSpec
    counts: CountTable
    dirichlet: np.ndarray | None = None  # (G, K)
    class_dirichlet: np.ndarray | None = None  # (K,)
    attr_dirichlets: tuple[np.ndarray, ...] | None = None  # per d: (K, S_d)

    def predictive_table(self, groups: GroupIndex) -> ProbTable:
        """Posterior-predictive conditional table.

        For the per-group model this is the additively smoothed table
        (posterior mean).  For naive Bayes the joint predictive factorizes
        over the posterior means, and P(y|s) is its conditional.
        """
        if self.spec.family == "dirichlet_multinomial":
            return smoothed_edf_table(self.counts, self.spec.alpha)
        pi = self.class_dirichlet / self.class_dirichlet.sum()
        log_phi = [a / a.sum(axis=1, keepdims=True) for a in self.attr_dirichlets]
        cats = _group_tuples(self.spec)
        scores = np.tile(np.log(pi), (self.spec.n_groups, 1))
        for d in range(len(self.spec.attribute_sizes)):
            scores += np.log(log_phi[d][:, cats[:, d]].T)
        scores -= scores.max(axis=1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=1, keepdims=True)
        return ProbTable.dense(probs)

    def sample(
        self, groups: GroupIndex, s: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, list[ProbTable]]:
        """Draw s parameter vectors (unconstrained layout) and tables."""
        spec = self.spec
        if spec.family == "dirichlet_multinomial":
            draws = rng.gamma(shape=self.dirichlet, size=(s,) + self.dirichlet.shape)
            draws /= draws.sum(axis=2, keepdims=True)
            tables = [ProbTable.dense(draws[i]) for i in range(s)]
            params = np.stack([_sb_inverse(draws[i]).ravel() for i in range(s)])
            return params, tables
        k = spec.n_outcomes
        pi = rng.gamma(shape=self.class_dirichlet, size=(s, k))
        pi /= pi.sum(axis=1, keepdims=True)
        phis = []
        for a in self.attr_dirichlets:
            ph = rng.gamma(shape=a, size=(s,) + a.shape)
            ph /= ph.sum(axis=2, keepdims=True)
            phis.append(ph)
        cats = _group_tuples(spec)
        with np.errstate(divide="ignore"):
            scores = np.log(pi)[:, None, :].repeat(spec.n_groups, axis=1)
            for d in range(len(spec.attribute_sizes)):
                scores += np.log(phis[d][:, :, cats[:, d]]).transpose(0, 2, 1)
        scores -= scores.max(axis=2, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=2, keepdims=True)
        tables = [ProbTable.dense(probs[i]) for i in range(s)]
        params = np.empty((s, param_length(spec)))
        for i in range(s):
            blocks = {"class_sticks": _sb_inverse(pi[i])[0]}
            for d in range(len(spec.attribute_sizes)):
                inv = _sb_inverse(phis[d][i])
                for y in range(k):
                    blocks[f"attr{d}_y{y}_sticks"] = inv[y]
            params[i] = _pack(spec, blocks)
        return params, tables


def exact_posterior(spec: ModelSpec, counts: CountTable) -> ExactPosterior:
    """Conjugate posterior; only the Dirichlet-based families qualify."""
    _check_counts(spec, counts)
    if spec.family == "dirichlet_multinomial":
        return ExactPosterior(
            spec=spec,
            counts=counts,
            dirichlet=counts.counts + spec.alpha,
        )
    if spec.family == "naive_bayes":
        class_counts, attr_counts = _nb_stats(spec, counts)
        return ExactPosterior(
            spec=spec,
            counts=counts,
            class_dirichlet=class_counts + spec.alpha_class,
            attr_dirichlets=tuple(m + spec.alpha_attr for m in attr_counts),
        )
    raise ModelError(f"{spec.family} has no conjugate exact posterior")
