"""Learn interval MDPs from trajectories of uncertain parametric MDPs and
certify robust policies with scenario-based risk bounds."""

from .benchmarks import BenchmarkSpec, build_benchmark
from .errors import (CertificationInfeasible, ConvergenceError, InstantiationError, LearningError,
                     ModelError, PropernessError, UpmdpError)
from .harness import ExperimentConfig, ExperimentReport, run_experiment
from .imdp import Policy, RobustResult, exact_policy_value, robust_value_iteration
from .learn import IntervalMDP, learn_imdp
from .model import EvaluationSpec, MDPInstance, ParametricMDP, instantiate, load_model, parse_model
from .scenario import RiskBound, certify, certify_values, risk_bound
from .simulate import BehaviorPolicy, CountTable, TrajectoryConfig, collect_counts, sample_trajectories

__version__ = "0.1.0"

__all__ = [
    "BehaviorPolicy", "BenchmarkSpec", "CertificationInfeasible", "ConvergenceError",
    "CountTable", "EvaluationSpec", "ExperimentConfig", "ExperimentReport", "InstantiationError",
    "IntervalMDP", "LearningError", "MDPInstance", "ModelError", "ParametricMDP", "Policy",
    "PropernessError", "RiskBound", "RobustResult", "TrajectoryConfig", "UpmdpError",
    "build_benchmark", "certify", "certify_values", "collect_counts", "exact_policy_value",
    "instantiate", "learn_imdp", "load_model", "parse_model", "risk_bound",
    "robust_value_iteration", "run_experiment", "sample_trajectories",
]
