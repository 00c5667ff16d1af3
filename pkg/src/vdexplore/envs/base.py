from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO

import numpy as np

from ..errors import ConfigError, ContractViolation


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int
    episode_limit: int

    def __post_init__(self):
        for name in ("n_agents", "n_actions", "obs_dim", "state_dim", "episode_limit"):
            if getattr(self, name) < 1:
                raise ConfigError(f"EnvSpec.{name} must be >= 1")


@dataclass
class StepResult:
    obs: np.ndarray  # [n_agents, obs_dim]
    state: np.ndarray  # [state_dim]
    reward: float
    done: bool
    avail: np.ndarray  # [n_agents, n_actions] bool
    terminated: bool = False  # true terminal (no bootstrap); False on time-limit cut


class MultiAgentEnv:
    """Cooperative Dec-POMDP with a shared team reward.

    Observation rows are laid out ``[local features | last action one-hot |
    agent id one-hot]``; subclasses only provide the local part.
    """

    n_agents: int
    n_actions: int
    local_dim: int
    state_dim: int
    episode_limit: int

    def __init__(self):
        self.t = 0
        self.done = True
        self.last_actions = np.full(self.n_agents, -1, dtype=np.int64)
        self._avail = np.ones((self.n_agents, self.n_actions), dtype=bool)

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec(
            n_agents=self.n_agents,
            n_actions=self.n_actions,
            obs_dim=self.local_dim + self.n_actions + self.n_agents,
            state_dim=self.state_dim,
            episode_limit=self.episode_limit,
        )

    # subclasses implement these
    def _reset(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _transition(self, actions: np.ndarray) -> tuple[float, bool]:
        """Advance dynamics; return ``(reward, terminated)``."""
        raise NotImplementedError

    def _local_obs(self) -> np.ndarray:
        raise NotImplementedError

    def get_state(self) -> np.ndarray:
        raise NotImplementedError

    def _compute_avail(self) -> np.ndarray:
        return np.ones((self.n_agents, self.n_actions), dtype=bool)

    def success(self) -> bool:
        """Win predicate for evaluation, valid once the episode is over."""
        raise NotImplementedError

    # public surface
    def reset(self, seed: int) -> StepResult:
        self.t = 0
        self.done = False
        self.last_actions[:] = -1
        self._reset(np.random.default_rng(seed))
        self._avail = self._compute_avail()
        return StepResult(self.get_obs(), self.get_state(), 0.0, False, self._avail.copy())

    def get_obs(self) -> np.ndarray:
        n, A = self.n_agents, self.n_actions
        obs = np.zeros((n, self.spec.obs_dim))
        obs[:, : self.local_dim] = self._local_obs()
        for i in range(n):
            if self.last_actions[i] >= 0:
                obs[i, self.local_dim + self.last_actions[i]] = 1.0
            obs[i, self.local_dim + A + i] = 1.0
        return obs

    def avail_actions(self, agent: int) -> np.ndarray:
        if not 0 <= agent < self.n_agents:
            raise ConfigError(f"agent index {agent} out of range [0, {self.n_agents})")
        return self._avail[agent].copy()

    def step(self, joint_action) -> StepResult:
        if self.done:
            raise ContractViolation("step() called on a finished episode; call reset()")
        actions = np.asarray(joint_action, dtype=np.int64)
        if actions.shape != (self.n_agents,):
            raise ContractViolation(f"expected {self.n_agents} actions, got shape {actions.shape}")
        for i, a in enumerate(actions):
            if not (0 <= a < self.n_actions) or not self._avail[i, a]:
                raise ContractViolation(f"agent {i} took unavailable action {int(a)}")
        reward, terminated = self._transition(actions)
        self.last_actions[:] = actions
        self.t += 1
        self.done = terminated or self.t >= self.episode_limit
        self._avail = self._compute_avail()
        return StepResult(self.get_obs(), self.get_state(), float(reward), self.done,
                          self._avail.copy(), terminated=terminated)


class TrajectoryDump:
    """Wraps an env and writes one JSON line per reset/step."""

    def __init__(self, env: MultiAgentEnv, stream: IO[str]):
        self.env = env
        self.stream = stream

    def __getattr__(self, name):
        return getattr(self.env, name)

    def _write(self, kind, res: StepResult, actions=None):
        row = {"kind": kind, "t": self.env.t, "reward": res.reward, "done": res.done,
               "obs": res.obs.tolist(), "state": res.state.tolist(), "avail": res.avail.astype(int).tolist()}
        if actions is not None:
            row["actions"] = [int(a) for a in actions]
        self.stream.write(json.dumps(row) + "\n")

    def reset(self, seed: int) -> StepResult:
        res = self.env.reset(seed)
        self._write("reset", res)
        return res

    def step(self, joint_action) -> StepResult:
        res = self.env.step(joint_action)
        self._write("step", res, joint_action)
        return res
