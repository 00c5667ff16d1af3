from __future__ import annotations

import itertools

import numpy as np

from ..errors import ConfigError
from .base import MultiAgentEnv

REFERENCE_PAYOFF = [[11.0, -30.0, 0.0], [-30.0, 7.0, 6.0], [0.0, 0.0, 5.0]]


def enumerate_optimum(payoff: np.ndarray) -> tuple[tuple[int, ...], float]:
    """Brute-force best joint action of a payoff tensor (first in index order on ties)."""
    best, best_val = None, -np.inf
    for joint in itertools.product(*(range(k) for k in payoff.shape)):
        if payoff[joint] > best_val:
            best, best_val = joint, float(payoff[joint])
    return best, best_val


class CooperativeMatrix(MultiAgentEnv):
    """One-shot cooperative matrix game: every agent picks once, the team gets ``payoff[joint]``."""

    local_dim = 1
    state_dim = 1
    episode_limit = 1

    def __init__(self, payoff=None, reward_scale: float = 1.0):
        payoff = np.asarray(REFERENCE_PAYOFF if payoff is None else payoff, dtype=np.float64)
        if payoff.ndim < 1 or len(set(payoff.shape)) != 1:
            raise ConfigError("payoff must be a hypercube tensor with one axis per agent")
        self.payoff = payoff
        self.reward_scale = float(reward_scale)
        self.n_agents = payoff.ndim
        self.n_actions = payoff.shape[0]
        self.optimum, self.optimal_value = enumerate_optimum(payoff)
        self.last_joint: tuple[int, ...] | None = None
        super().__init__()

    def _reset(self, rng):
        self.last_joint = None

    def _transition(self, actions):
        self.last_joint = tuple(int(a) for a in actions)
        return self.reward_scale * float(self.payoff[self.last_joint]), True

    def _local_obs(self):
        return np.zeros((self.n_agents, 1))

    def get_state(self):
        return np.ones(1)

    def success(self):
        return self.last_joint is not None and float(self.payoff[self.last_joint]) >= self.optimal_value
