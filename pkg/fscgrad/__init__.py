"""Policy gradient estimation for POMDPs and POSMDPs under finite-state controllers."""
from fscgrad.actor import (
    GradientEstimate,
    actor_critic_estimate,
    alignment,
    fit_critics,
    gpomdp_estimate,
    locate_local_minimum,
    project_direction,
    project_parameters,
    train,
)
from fscgrad.cassandra import parse_pomdp, serialize_pomdp
from fscgrad.config import EstimatorTag, ExperimentConfig, load_config
from fscgrad.errors import (
    AssumptionViolation,
    ConfigError,
    DimensionMismatchError,
    FeatureError,
    FscGradError,
    ModelFormatError,
    NonStochasticError,
)
from fscgrad.model import ChainLevel, JointChain, PomdpModel, build_joint_chain, load_model
from fscgrad.oracle import (
    ExactSolution,
    conditional_means,
    discounted_values,
    exact_beta_gradient,
    exact_gradient,
    q_function,
    solve_average_cost,
    solve_exact,
    stationary_distribution,
)
from fscgrad.policy import FscPolicy, TieMode, make_direct_fsc
from fscgrad.simulate import Trajectory, hidden_view, simulate

__version__ = "0.1.0"
