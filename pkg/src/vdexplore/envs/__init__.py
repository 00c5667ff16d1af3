"""Desk-scale cooperative environments behind a common Dec-POMDP interface."""

from ..errors import ConfigError
from .base import EnvSpec, MultiAgentEnv, StepResult, TrajectoryDump
from .corridor import SparseCorridor
from .matrix import REFERENCE_PAYOFF, CooperativeMatrix, enumerate_optimum
from .skirmish import Skirmish

REGISTRY = {
    "cooperative_matrix": CooperativeMatrix,
    "sparse_corridor": SparseCorridor,
    "skirmish": Skirmish,
}


def make_env(name: str, **params) -> MultiAgentEnv:
    if name not in REGISTRY:
        raise ConfigError(f"env.name: unknown environment {name!r} (choose from {sorted(REGISTRY)})")
    try:
        return REGISTRY[name](**params)
    except TypeError as exc:
        raise ConfigError(f"env.params: {exc}") from exc


__all__ = [
    "CooperativeMatrix", "EnvSpec", "MultiAgentEnv", "REFERENCE_PAYOFF", "REGISTRY", "Skirmish",
    "SparseCorridor", "StepResult", "TrajectoryDump", "enumerate_optimum", "make_env",
]
