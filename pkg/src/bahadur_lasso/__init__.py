"""Sparse Bahadur-expansion estimation of multivariate binary distributions.

Estimates the correlation coefficients ``r`` of the Bahadur representation
``p(y) = (1 + W(alpha, y)' r) prod_j alpha_j^{y_j} (1 - alpha_j)^{1 - y_j}``
by weighted-L1 penalized likelihood, without covariates or localized at a
covariate value, with plug-in or first-order adversarial handling of the
estimated marginals. Also provides cross-fitted AIPW effect estimation with
the resulting generalized propensity scores and a seeded simulation harness.
"""

from .bundles import (
    BundleIndex,
    JointModel,
    all_outcomes,
    bundle_index,
    extract_r0,
    gradient_w_alpha,
    independence_pmf,
    pmf,
    sample,
    standardized_outcome,
    substream,
    validate_K,
    w_vector,
)
from .causal import CausalDataset, GPSConfig, GPSModel, ATEResult, estimate_ate, fit_gps, true_efficiency_bound
from .harness import (
    ExperimentConfig,
    ReplicationReport,
    factor_diagnostics,
    metrics,
    run_coverage_study,
    run_experiment,
    scenario_config,
)
from .localized import LocalFit, build_local_design, fit_local_first_order, fit_local_plugin
from .marginals import (
    AdversarialBox,
    KernelSpec,
    bootstrap_box_local,
    bootstrap_box_unconditional,
    fit_marginals_local,
    fit_marginals_unconditional,
)
from .solver import (
    FitResult,
    PenaltySpec,
    SolverOptions,
    fit_adversarial_approx,
    fit_first_order,
    fit_plugin,
)
from .tuning import LambdaRule, cross_validate_lambda, lambda_value, weights

__version__ = "0.1.0"
