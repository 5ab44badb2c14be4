"""Exact flows on pointed DAGs and tabular GFlowNet training."""
from .analysis import (
    FreeEnergyTable,
    brute_force_target,
    conditional_entropy,
    conditional_terminating_distribution,
    entropy_estimate,
    expected_reward,
    free_energy_table,
    greedy_policy,
    greedy_rollout,
    mutual_information,
    superset_marginal,
)
from .dag import PointedDag, build_dag, enumerate_complete_trajectories, parse_dag_text, read_dag_file
from .envs import Environment, make_assignment_env, make_chain_env, make_hypergrid, make_set_env, make_toy_env
from .estimator import GFlowNetSampler
from .exceptions import TabGFNError
from .flows import (
    TrajectoryFlow,
    flow_from_backward,
    flow_from_forward,
    flow_from_terminating_and_backward,
    is_markovian,
    markovian_projection,
    summarize,
)
from .losses import LossSpec, loss_and_gradient, total_loss
from .params import (
    EdgeFlowParams,
    ForwardBackwardParams,
    ForwardParams,
    TrajectoryBalanceParams,
    make_params,
)
from .training import (
    BackwardFromData,
    EpsilonUniformMix,
    Mixture,
    OfflineReplay,
    OnPolicy,
    TrainingConfig,
    evaluate,
    train,
)

__all__ = [
    "FreeEnergyTable",
    "brute_force_target",
    "conditional_entropy",
    "conditional_terminating_distribution",
    "entropy_estimate",
    "expected_reward",
    "free_energy_table",
    "greedy_policy",
    "greedy_rollout",
    "mutual_information",
    "superset_marginal",
    "PointedDag",
    "build_dag",
    "enumerate_complete_trajectories",
    "parse_dag_text",
    "read_dag_file",
    "Environment",
    "make_assignment_env",
    "make_chain_env",
    "make_hypergrid",
    "make_set_env",
    "make_toy_env",
    "GFlowNetSampler",
    "TabGFNError",
    "TrajectoryFlow",
    "flow_from_backward",
    "flow_from_forward",
    "flow_from_terminating_and_backward",
    "is_markovian",
    "markovian_projection",
    "summarize",
    "LossSpec",
    "loss_and_gradient",
    "total_loss",
    "EdgeFlowParams",
    "ForwardBackwardParams",
    "ForwardParams",
    "TrajectoryBalanceParams",
    "make_params",
    "BackwardFromData",
    "EpsilonUniformMix",
    "Mixture",
    "OfflineReplay",
    "OnPolicy",
    "TrainingConfig",
    "evaluate",
    "train",
]

__version__ = "0.1.0"
