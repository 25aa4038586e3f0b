"""
principal_lab - Online learning laboratory for the generalized principal-agent model
"""

from .agent import AgentKind, AgentModel
from .bandit import (
    ConfidenceEllipsoid,
    LinUcbConfig,
    RunResult,
    classical_linucb,
    doubling_pipeline,
    pess_opt_linucb,
)
from .constants import LabConstants
from .env import Environment, TraceLog
from .estimator import EstimatedAngles, EstimationBudget, angle_set_distance, estimate_all
from .exceptions import (
    AssumptionViolationError,
    CapacityError,
    ConfigError,
    DimensionError,
    EstimationFailure,
    HorizonExhaustedError,
    LpInfeasibleError,
    LpSolverError,
    LpUnboundedError,
    PrincipalLabError,
    ProtocolViolationError,
    SimplexViolationError,
)
from .geometry import Isometry, make_isometry, spherical_embed
from .harness import ExperimentConfig, run
from .lp import PessimisticPolytope, pessimistic_polytope, solve_lp_star, solve_pess_opt
from .model import ProblemInstance, RewardAngles, random_instance, reference_instance
from .state_machine import LearnerPhase

__all__ = [
    "AgentKind",
    "AgentModel",
    "ConfidenceEllipsoid",
    "LinUcbConfig",
    "RunResult",
    "classical_linucb",
    "doubling_pipeline",
    "pess_opt_linucb",
    "LabConstants",
    "Environment",
    "TraceLog",
    "EstimatedAngles",
    "EstimationBudget",
    "angle_set_distance",
    "estimate_all",
    "AssumptionViolationError",
    "CapacityError",
    "ConfigError",
    "DimensionError",
    "EstimationFailure",
    "HorizonExhaustedError",
    "LpInfeasibleError",
    "LpSolverError",
    "LpUnboundedError",
    "PrincipalLabError",
    "ProtocolViolationError",
    "SimplexViolationError",
    "Isometry",
    "make_isometry",
    "spherical_embed",
    "ExperimentConfig",
    "run",
    "PessimisticPolytope",
    "pessimistic_polytope",
    "solve_lp_star",
    "solve_pess_opt",
    "ProblemInstance",
    "RewardAngles",
    "random_instance",
    "reference_instance",
    "LearnerPhase",
]

__version__ = "0.1.0"
