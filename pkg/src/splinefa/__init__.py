"""Semiparametric factor analysis for mixed response/response-time batteries.

Conditional densities of the indicators and the latent copula density are
tensor-product B-splines, estimated by penalized marginal maximum
likelihood under monotonicity and normalization constraints, with
cross-validated penalty weights, bootstrap residual diagnostics, and
posterior latent scoring.
"""

from .analysis import (
    AnalysisConfig,
    AnalysisReport,
    load_config,
    load_dataset,
    parse_config,
    run_analysis,
    write_report,
)
from .data import ColumnInfo, Dataset, ItemSpec, preprocess, read_table, write_table
from .estimation import (
    FitConfig,
    FitResult,
    em_fit,
    solve_copula_subproblem,
    solve_item_subproblem,
)
from .exceptions import (
    ConfigurationError,
    ConstraintInfeasibleError,
    DataError,
    DegenerateMVError,
    DegeneratePosteriorError,
    DomainError,
    InsufficientEnsembleError,
    MonotonicityViolationError,
    NumericalError,
    SchemaError,
    SplineFAError,
)
from .inference import (
    BootstrapEnsemble,
    PairFlag,
    ScoreFunction,
    bootstrap_refit,
    default_scores,
    eta_squared_interval,
    flag_residuals,
    model_implied_correlation,
    model_implied_moments,
    percentile_interval,
    residual_correlations,
)
from .latent import (
    CopulaModel,
    LatentDensity,
    copula_density,
    eta_squared,
    fit_copula_least_squares,
    independence_copula,
    transformed_joint_density,
)
from .likelihood import (
    FACTOR_ABILITY,
    FACTOR_SPEED,
    FactorModel,
    PenaltyWeights,
    build_model,
    marginal_loglik,
    per_record_loglik,
    penalized_objective,
    posterior_weights,
)
from .measurement import (
    CONTINUOUS,
    DISCRETE,
    ItemModel,
    blank_item,
    continuous_density,
    discrete_irf,
)
from .numerics import BasisSet, build_basis, difference_matrix, gauss_legendre_unit
from .scoring import (
    ScoreRecord,
    eap_joint,
    eap_marginal,
    precision_by_quantile,
    predictive_precision,
    score_records,
)
from .selection import (
    CvPlan,
    SelectionResult,
    WeightGrid,
    cv_risk,
    make_cv_plan,
    one_se_select,
    select_weights,
)
from .simulate import (
    GaussianCopulaTruth,
    MixtureCopulaTruth,
    ResponseItemTruth,
    ShockTruth,
    SimulationTruth,
    SplineCopulaTruth,
    TimeItemTruth,
    default_truth,
    simulate,
)

__version__ = "0.1.0"
