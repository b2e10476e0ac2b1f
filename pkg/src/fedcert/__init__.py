"""Certified upper bounds on model loss across shifted federated client
populations.

The pieces compose left to right: simulate a heterogeneous client network
(``metasim``), answer per-client adversarial loss queries without moving any
samples (``query``), turn the query values into population-level certificates
(``nonrobust``, ``fdiv``, ``wass``), and check everything against brute-force
oracles and Monte-Carlo coverage (``oracle``).
"""
from .certificates import CdfCurve, CertifiedBound
from .fdiv import (
    DivergenceSpec,
    ReweightSolution,
    divergence_budgets,
    fdiv_cdf_bound,
    fdiv_mean_bound,
    make_divergence,
    solve_reweight,
)
from .losses import (
    CROSS_ENTROPY,
    LINEAR,
    LOGISTIC,
    LOOKUP,
    SQUARED,
    ZERO_ONE,
    DimensionMismatchError,
    Hypothesis,
    LossFn,
    Sample,
    UnsupportedGradientError,
    curvature_bound,
    loss,
    loss_gradient,
    loss_values,
)
from .metasim import (
    Archetype,
    ClientSpec,
    LocalDataset,
    MetaConfig,
    archetype_divergences,
    export_world,
    generate_dataset,
    load_client_pool,
    load_world,
    sample_clients,
    shift_meta_fdiv,
    shift_meta_wass,
    tilt_for_divergence,
)
from .nonrobust import cdf_bound, mean_bound
from .oracle import (
    CoverageReport,
    adversarial_directions,
    coverage_experiment,
    exact_zero_one_risk,
    grid_reweight_oracle,
    sample_true_risks,
    tightness_probe,
    wass_alloc_grid_oracle,
    wass_ball_lp_oracle,
)
from .query import (
    BudgetExceededError,
    Client,
    QueryValue,
    TransportCost,
    adversarial_risk,
    empirical_risk,
    phi_gamma,
)
from .wass import (
    QvProfile,
    RadiusAllocation,
    bisection_certificate,
    build_profiles,
    feasibility_check,
    mean_radius_cap,
    wass_mean_bound,
)

__version__ = "0.1.0"
