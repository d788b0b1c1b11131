"""Recursive logit route choice estimation from incomplete trip observations."""

from .em import EMConfig, PathSample, build_expected_ll, em_estimate, sample_connecting_paths
from .estimate import (ALGORITHMS, EstimationResult, dc_estimate, em_estimate_result, estimate,
                       evaluate_complete_ll, nfxp_estimate)
from .exceptions import (InfeasibleParameters, NetworkError, ObservationError, RecrouteError,
                         UnsampleablePair, ValueFunctionError)
from .model import ParamVector, SolverOptions, solve_value
from .network import (Network, build_network, extend_for_destination, generate_grid_network,
                      load_network, save_network)
from .observations import (ObservationSet, Trip, corrupt_trips, load_trips, save_trips,
                           simulate_observations)
from .optimize import maximize
from .reach import SolveCounter, dc_log_likelihood

__all__ = [
    "ALGORITHMS", "EMConfig", "EstimationResult", "InfeasibleParameters", "Network",
    "NetworkError", "ObservationError", "ObservationSet", "ParamVector", "PathSample",
    "RecrouteError", "SolveCounter", "SolverOptions", "Trip", "UnsampleablePair",
    "ValueFunctionError", "build_expected_ll", "build_network", "corrupt_trips",
    "dc_estimate", "dc_log_likelihood", "em_estimate", "em_estimate_result", "estimate",
    "evaluate_complete_ll", "extend_for_destination", "generate_grid_network", "load_network",
    "load_trips", "maximize", "nfxp_estimate", "sample_connecting_paths", "save_network",
    "save_trips", "simulate_observations", "solve_value",
]
