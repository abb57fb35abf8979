"""Particle simulation and stochastic-target tooling for McKean-Vlasov dynamics under common noise."""

from .budget import BudgetProblem, budget_value, gdp_check, simulate_budget
from .calculus import (
    MeasureFunction,
    chain_rule_residual,
    cylindrical,
    d2_action_quadrature,
    fd_d2_action,
    fd_dmu,
    linear_mean,
    mean_squared,
    threshold_barrier,
)
from .dynamics import (
    CoefficientModel,
    CommonNoisePath,
    ControlPolicy,
    check_h1,
    sample_initial,
    sample_path,
    simulate_ensemble,
    stability_probe,
    uniform_grid,
)
from .errors import (
    BracketError,
    CapacityError,
    ConfigError,
    InvalidInputError,
    NumericBlowupError,
    NumericError,
    QuenchedError,
)
from .measures import EmpiricalMeasure, wasserstein2
from .target import (
    TargetSet,
    embed_mean_constraint,
    gdpp_check,
    hamiltonian_L,
    n_set_test,
    reach_estimate,
    terminal_condition,
    verify_membership,
)

__version__ = "0.1.0"
