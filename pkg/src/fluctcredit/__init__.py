"""Credit-risk loss distributions under fluctuating asset correlations."""

__version__ = "0.1.0"

from .ensemble import (  # noqa: E402
    CorrelationModel,
    CovarianceSpec,
    avg_return_density,
    multivariate_normal_density,
    rotated_scaled_density,
)
from .loss import (  # noqa: E402
    LossDensity,
    PortfolioSpec,
    QuadratureConfig,
    avg_loss_density,
    avg_loss_density_limit,
    moments,
    risk_table,
    var_etl_from_density,
)
from .marketdata import (  # noqa: E402
    NFit,
    PricePanel,
    ReturnPanel,
    compute_returns,
    estimate_covariance,
    estimate_N_variance_identity,
    fit_N_cramer_von_mises,
    fit_N_least_squares,
    homogeneous_summary,
    ingest_prices,
    rotate_scale_returns,
    windowed_pairwise_aggregate,
)
from .montecarlo import LossSample, SimConfig, relative_deviation_report, run_simulation, sample_var_etl  # noqa: E402

__all__ = [
    "CorrelationModel", "CovarianceSpec", "avg_return_density", "multivariate_normal_density",
    "rotated_scaled_density", "LossDensity", "PortfolioSpec", "QuadratureConfig", "avg_loss_density",
    "avg_loss_density_limit", "moments", "risk_table", "var_etl_from_density", "NFit", "PricePanel",
    "ReturnPanel", "compute_returns", "estimate_covariance", "estimate_N_variance_identity",
    "fit_N_cramer_von_mises", "fit_N_least_squares", "homogeneous_summary", "ingest_prices",
    "rotate_scale_returns", "windowed_pairwise_aggregate", "LossSample", "SimConfig",
    "relative_deviation_report", "run_simulation", "sample_var_etl",
]
