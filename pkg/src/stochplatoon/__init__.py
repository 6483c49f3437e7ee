"""Stochastic string stability of predecessor-following platoons over noisy links."""

__version__ = "0.1.0"

from .certifier import Verdict, certify, check_definition1, check_definition2, mean_bound, variance_bound
from .config import Config, load_config
from .errors import *  # noqa: F401,F403
from .lti import FrequencyGrid, StateSpace, TransferFunction, h2_norm, h_infinity_norm, realize, tf
from .moments import propagate, stationary_covariance
from .montecarlo import SimulationPlan, run_ensemble, simulate_realization, validate_against_analytics
from .platoon import (
    InitialCondition,
    LeaderProfile,
    PlatoonSpec,
    build_concatenated,
    build_vehicle_loop,
    leader_error,
)
from .spectral import (
    gain_report,
    limiting_variance,
    limiting_variance_series,
    psd_ladder,
    spectral_factorize,
    variance_ladder,
)
