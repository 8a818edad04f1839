"""Secure placement of DAG services on three-tier fog infrastructure with a
distributed broker/learner actor-critic."""

from .environment import EnvConfig, Fleet, PlacementEnv, response_time, weighted_cost
from .infrastructure import Infrastructure, ServerNode, generate_infrastructure
from .learner import Learner, LearnerConfig, PolicySnapshot
from .orchestrator import ExperimentConfig, build_world, evaluate, toy_config, train
from .security import SecurityCatalog, SecurityThresholds, service_score, task_score
from .workload import ServiceDag, Task, build_dataset, critical_path, generate_service

__version__ = "0.1.0"

__all__ = [
    "EnvConfig", "Fleet", "PlacementEnv", "response_time", "weighted_cost",
    "Infrastructure", "ServerNode", "generate_infrastructure",
    "Learner", "LearnerConfig", "PolicySnapshot",
    "ExperimentConfig", "build_world", "evaluate", "toy_config", "train",
    "SecurityCatalog", "SecurityThresholds", "service_score", "task_score",
    "ServiceDag", "Task", "build_dataset", "critical_path", "generate_service",
]
