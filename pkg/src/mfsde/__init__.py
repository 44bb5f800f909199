"""Monte Carlo simulation of mean-field SDEs with irregular drift and
Bismut-Elworthy-Li gradient estimation."""

from .bel import (
    Observable,
    WeightFunction,
    build_observable,
    check_phi_integrability,
    estimate_gradient,
    girsanov_estimate,
)
from .drift import DriftSpec, MollifiedDrift, build_drift, eval_drift, mollify, spatial_jacobian
from .measure_flow import EmpiricalMeasure, MeasureFlow, first_moment, flow_distance, kantorovich
from .oracle import OUParams, fd_gradient, matrix_exp, ou_closed_form
from .report import EstimatorReport
from .sde_solver import PathBundle, TimeGrid, picard_law_iteration, simulate_particles, solve_frozen_law

__version__ = "0.1.0"
