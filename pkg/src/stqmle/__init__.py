"""Quasi maximum likelihood for spatial dynamic panels with banded sparse kernels."""

from .errors import StqmleError
from .inference import InferenceReport, beta_covariance, confidence_intervals, infer, theta_subsampling_se
from .kernels import BACKEND
from .likelihood import LikelihoodWorkspace, concentrated_loglik, quasi_loglik
from .model import DependenceParams, ModelParams, PanelData, SpatialWeights, feasibility_check
from .optimizer import FitDiagnostics, OptimizerConfig, fit
from .simulate import SimulationDesign, make_grid_weights, run_monte_carlo, simulate_panel

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DependenceParams",
    "FitDiagnostics",
    "InferenceReport",
    "LikelihoodWorkspace",
    "ModelParams",
    "OptimizerConfig",
    "PanelData",
    "SimulationDesign",
    "SpatialWeights",
    "StqmleError",
    "beta_covariance",
    "concentrated_loglik",
    "confidence_intervals",
    "feasibility_check",
    "fit",
    "infer",
    "make_grid_weights",
    "quasi_loglik",
    "run_monte_carlo",
    "simulate_panel",
    "theta_subsampling_se",
]
