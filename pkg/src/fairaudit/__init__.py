"""Bayesian measurement of intersectional fairness metrics.

Measures differential fairness and statistical-parity subgroup fairness
of a dataset or a classification mechanism over all intersections of
discrete protected attributes, using a family of Bayesian models of
P(y|s) with exact or variational posteriors, and reports both point
estimates and posterior uncertainty.
"""

from .data import (
    CountTable,
    DataError,
    Dataset,
    GroupIndex,
    Provenance,
    Schema,
    bootstrap_sample,
    build_counts,
    load_dataset,
    write_dataset_csv,
)
from .ensemble import (
    EnsembleFit,
    EnsembleMember,
    build_ensemble,
    ensemble_metric_posterior,
    ensemble_predictive,
    model_weights,
)
from .inference import (
    FitOptions,
    MapFit,
    PosteriorSampleSet,
    VariationalPosterior,
    fit_variational,
    map_estimate,
    posterior_predictive,
    sample_posterior,
)
from .metrics import (
    EIGHTY_PERCENT_RULE_EPSILON,
    GroupWeights,
    MetricPosterior,
    ProbTable,
    bias_amplification,
    empirical_table,
    epsilon_df,
    gamma_sf,
    marginalize,
    metric_posterior,
    smoothed_edf_table,
)
from .models import ModelSpec, exact_posterior, grad_log_joint, log_joint, predict_table
from .harness import (
    AuditReport,
    EstimatorSpec,
    StabilityCurve,
    audit,
    default_grid,
    heldout_cross_entropy,
    l1_deviation,
    make_estimators,
    stability_curve,
    train_mechanism,
)
from .synth import SynthSpec, analytic_truth, generate, make_weights

__version__ = "0.1.0"
