from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from .base import MultiAgentEnv

# no-op, north, south, east, west
MOVES = np.array([[0, 0], [-1, 0], [1, 0], [0, 1], [0, -1]], dtype=np.int64)


class SparseCorridor(MultiAgentEnv):
    """Grid corridor with one rewarding goal cell at the far end.

    All agents start in the middle row of column 0; the goal sits in the
    middle row of the last column.  The first agent to enter the goal earns
    the team ``goal_reward`` and ends the episode; every other step pays 0.
    Moves into the boundary leave the agent in place.  Each agent sees a
    radius-1 window (wall / goal / teammate channels) plus its own
    coordinates scaled to [0, 1].
    """

    n_actions = 5

    def __init__(self, length: int = 10, width: int = 3, n_agents: int = 2,
                 episode_limit: int = 30, goal_reward: float = 20.0):
        if length < 2 or width < 1:
            raise ConfigError("corridor needs length >= 2 and width >= 1")
        self.length, self.width = int(length), int(width)
        self.n_agents = int(n_agents)
        self.episode_limit = int(episode_limit)
        self.goal_reward = float(goal_reward)
        self.start = np.array([self.width // 2, 0])
        self.goal = np.array([self.width // 2, self.length - 1])
        self.local_dim = 27 + 2
        self.state_dim = 2 * self.n_agents + 2
        self.pos = np.zeros((self.n_agents, 2), dtype=np.int64)
        self.goal_visited = False
        super().__init__()

    def _reset(self, rng):
        self.pos[:] = self.start
        self.goal_visited = False

    def _inside(self, r, c):
        return 0 <= r < self.width and 0 <= c < self.length

    def _transition(self, actions):
        for i, a in enumerate(actions):
            nxt = self.pos[i] + MOVES[a]
            if self._inside(*nxt):
                self.pos[i] = nxt
        if any((p == self.goal).all() for p in self.pos):
            self.goal_visited = True
            return self.goal_reward, True
        return 0.0, False

    def _local_obs(self):
        out = np.zeros((self.n_agents, self.local_dim))
        for i in range(self.n_agents):
            r0, c0 = self.pos[i]
            k = 0
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    r, c = r0 + dr, c0 + dc
                    if not self._inside(r, c):
                        out[i, k] = 1.0
                    else:
                        out[i, k + 9] = float(r == self.goal[0] and c == self.goal[1])
                        out[i, k + 18] = float(any(
                            j != i and self.pos[j][0] == r and self.pos[j][1] == c
                            for j in range(self.n_agents)))
                    k += 1
            out[i, 27] = r0 / max(self.width - 1, 1)
            out[i, 28] = c0 / (self.length - 1)
        return out

    def get_state(self):
        s = np.zeros(self.state_dim)
        s[0 : 2 * self.n_agents : 2] = self.pos[:, 0] / max(self.width - 1, 1)
        s[1 : 2 * self.n_agents : 2] = self.pos[:, 1] / (self.length - 1)
        s[-2] = float(self.goal_visited)
        s[-1] = self.t / self.episode_limit
        return s

    def success(self):
        return self.goal_visited
