"""Penalized two-stage estimation of tail risk measures.

A weighted-L1 penalized quantile regression supplies Value-at-Risk
predictions; a least-squares LASSO on an auxiliary response estimates the
Expected Shortfall coefficients.  Companion modules provide the Chebyshev
feature dictionary, blocked cross-validation, a Monte Carlo study of the
estimators, a systemic-risk (co-shortfall) pipeline, and an empirical
tail-bound experiment for mixing sequences.
"""

__version__ = "0.1.0"

from .features import (
    ApproximationInterval,
    ChebyshevDictionary,
    DesignMatrix,
    build_dictionary,
    chebyshev_value,
    rescale_to_interval,
    simulation_dictionary,
)
from .quantile import (
    QuantileFit,
    check_loss,
    fit_penalized_quantile,
    predict_quantile,
    quantile_certificate,
)
from .es import (
    AuxiliaryResponse,
    ESFit,
    auxiliary_response,
    fit_es_lasso,
    fit_es_least_squares,
    kkt_certificate,
    lemma3_gap,
    predict_es,
    soft_threshold,
)
from .model_selection import (
    CVPlan,
    blocked_folds,
    cross_validate,
    es_mse,
    mean_tick_loss,
)
from .simulation import (
    SimulationConfig,
    run_monte_carlo,
    simulate_dgp,
    simulate_factors,
    truncated_normal_mean,
)
from .tailbound import (
    BlockingStrategy,
    block_indices,
    blocking_from_rate,
    empirical_tail_experiment,
    fuk_nagaev_bound,
)
from .coes import (
    CoESModel,
    Panel,
    coes_predict,
    evaluate_out_of_sample,
    fit_coes,
    load_panel,
    rolling_volatility,
    synthetic_panel,
)

__all__ = [
    "__version__",
    "ApproximationInterval", "ChebyshevDictionary", "DesignMatrix",
    "build_dictionary", "chebyshev_value", "rescale_to_interval",
    "simulation_dictionary",
    "QuantileFit", "check_loss", "fit_penalized_quantile", "predict_quantile",
    "quantile_certificate",
    "AuxiliaryResponse", "ESFit", "auxiliary_response", "fit_es_lasso",
    "fit_es_least_squares", "kkt_certificate", "lemma3_gap", "predict_es",
    "soft_threshold",
    "CVPlan", "blocked_folds", "cross_validate", "es_mse", "mean_tick_loss",
    "SimulationConfig", "run_monte_carlo", "simulate_dgp", "simulate_factors",
    "truncated_normal_mean",
    "BlockingStrategy", "block_indices", "blocking_from_rate",
    "empirical_tail_experiment", "fuk_nagaev_bound",
    "CoESModel", "Panel", "coes_predict", "evaluate_out_of_sample", "fit_coes",
    "load_panel", "rolling_volatility", "synthetic_panel",
]
