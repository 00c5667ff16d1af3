from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from .base import MultiAgentEnv

NOOP, STOP = 0, 1
# north, south, east, west as (dx, dy)
MOVES = {2: (0, -1), 3: (0, 1), 4: (1, 0), 5: (-1, 0)}
N_FIXED = 6


class Skirmish(MultiAgentEnv):
    """Symmetric team battle against a scripted opponent.

    Units have integer positions on a ``size x size`` board, a health pool,
    and deterministic fixed damage.  Allied actions are no-op (dead units
    only), stop, four moves, and ``attack[j]`` which is available only while
    enemy ``j`` is alive and within shooting range.  Each enemy attacks the
    closest allied unit in range, otherwise steps toward it.  Attacks are
    resolved simultaneously on positions from the start of the tick and
    deaths are applied at the end.

    The team reward is damage dealt plus a per-kill and a win bonus, scaled
    so a won episode returns exactly ``max_return``.
    """

    def __init__(self, n_allies: int = 3, n_enemies: int = 3, size: int = 8, health: int = 3,
                 damage: int = 1, shoot_range: float = 2.0, sight_range: float = 3.0,
                 episode_limit: int = 40, kill_bonus: float = 10.0, win_bonus: float = 200.0,
                 max_return: float = 20.0):
        if n_allies < 1 or n_enemies < 1 or size < 4 or health < 1 or damage < 1:
            raise ConfigError("invalid skirmish parameters")
        if n_allies > size or n_enemies > size:
            raise ConfigError("board too small for the requested unit counts")
        self.n_agents, self.n_enemies = int(n_allies), int(n_enemies)
        self.n_actions = N_FIXED + self.n_enemies
        self.size, self.max_health, self.damage = int(size), int(health), int(damage)
        self.shoot_range, self.sight_range = float(shoot_range), float(sight_range)
        self.episode_limit = int(episode_limit)
        self.kill_bonus, self.win_bonus = float(kill_bonus), float(win_bonus)
        self.max_raw = self.n_enemies * self.max_health + self.kill_bonus * self.n_enemies + self.win_bonus
        self.scale = float(max_return) / self.max_raw
        self.local_dim = 4 * self.n_enemies + 4 * (self.n_agents - 1) + 3
        self.state_dim = 3 * (self.n_agents + self.n_enemies)
        self.ally_pos = np.zeros((self.n_agents, 2), dtype=np.int64)
        self.enemy_pos = np.zeros((self.n_enemies, 2), dtype=np.int64)
        self.ally_hp = np.zeros(self.n_agents, dtype=np.int64)
        self.enemy_hp = np.zeros(self.n_enemies, dtype=np.int64)
        super().__init__()

    def _reset(self, rng):
        rows_a = rng.choice(self.size, size=self.n_agents, replace=False)
        rows_e = rng.choice(self.size, size=self.n_enemies, replace=False)
        self.ally_pos[:, 0] = rng.integers(0, 2, size=self.n_agents)
        self.ally_pos[:, 1] = rows_a
        self.enemy_pos[:, 0] = self.size - 1 - rng.integers(0, 2, size=self.n_enemies)
        self.enemy_pos[:, 1] = rows_e
        self.ally_hp[:] = self.max_health
        self.enemy_hp[:] = self.max_health

    @staticmethod
    def _dist(p, q):
        return float(np.hypot(*(p - q)))

    def _compute_avail(self):
        avail = np.zeros((self.n_agents, self.n_actions), dtype=bool)
        for i in range(self.n_agents):
            if self.ally_hp[i] <= 0:
                avail[i, NOOP] = True
                continue
            avail[i, STOP] = True
            x, y = self.ally_pos[i]
            for a, (dx, dy) in MOVES.items():
                avail[i, a] = 0 <= x + dx < self.size and 0 <= y + dy < self.size
            for j in range(self.n_enemies):
                avail[i, N_FIXED + j] = (self.enemy_hp[j] > 0
                                         and self._dist(self.ally_pos[i], self.enemy_pos[j]) <= self.shoot_range)
        return avail

    def _enemy_plan(self):
        """Per enemy: ('attack', ally) or ('move', (dx, dy)) or None."""
        plans = []
        alive = [i for i in range(self.n_agents) if self.ally_hp[i] > 0]
        for j in range(self.n_enemies):
            if self.enemy_hp[j] <= 0 or not alive:
                plans.append(None)
                continue
            target = min(alive, key=lambda i: (self._dist(self.enemy_pos[j], self.ally_pos[i]), i))
            if self._dist(self.enemy_pos[j], self.ally_pos[target]) <= self.shoot_range:
                plans.append(("attack", target))
            else:
                d = self.ally_pos[target] - self.enemy_pos[j]
                if abs(d[0]) >= abs(d[1]):
                    plans.append(("move", (int(np.sign(d[0])), 0)))
                else:
                    plans.append(("move", (0, int(np.sign(d[1])))))
        return plans

    def _transition(self, actions):
        enemy_dmg = np.zeros(self.n_enemies, dtype=np.int64)
        ally_dmg = np.zeros(self.n_agents, dtype=np.int64)
        for i, a in enumerate(actions):
            if a >= N_FIXED:
                enemy_dmg[a - N_FIXED] += self.damage
        plans = self._enemy_plan()
        for j, plan in enumerate(plans):
            if plan is not None and plan[0] == "attack":
                ally_dmg[plan[1]] += self.damage
        for i, a in enumerate(actions):
            if a in MOVES:
                self.ally_pos[i] += MOVES[a]
        for j, plan in enumerate(plans):
            if plan is not None and plan[0] == "move":
                nxt = self.enemy_pos[j] + np.array(plan[1])
                self.enemy_pos[j] = np.clip(nxt, 0, self.size - 1)
        before = self.enemy_hp.copy()
        self.enemy_hp = np.maximum(self.enemy_hp - enemy_dmg, 0)
        self.ally_hp = np.maximum(self.ally_hp - ally_dmg, 0)
        dealt = int((before - self.enemy_hp).sum())
        kills = int(((before > 0) & (self.enemy_hp == 0)).sum())
        won = bool((self.enemy_hp == 0).all())
        lost = bool((self.ally_hp == 0).all())
        raw = dealt + self.kill_bonus * kills + (self.win_bonus if won else 0.0)
        return raw * self.scale, won or lost

    def _unit_features(self, me, other_pos, other_hp):
        dist = self._dist(me, other_pos)
        if other_hp <= 0 or dist > self.sight_range:
            return [0.0, 0.0, 0.0, 0.0]
        d = (other_pos - me) / self.sight_range
        return [1.0, float(d[0]), float(d[1]), other_hp / self.max_health]

    def _local_obs(self):
        out = np.zeros((self.n_agents, self.local_dim))
        for i in range(self.n_agents):
            if self.ally_hp[i] <= 0:
                continue
            me = self.ally_pos[i]
            feats = []
            for j in range(self.n_enemies):
                feats += self._unit_features(me, self.enemy_pos[j], self.enemy_hp[j])
            for k in range(self.n_agents):
                if k != i:
                    feats += self._unit_features(me, self.ally_pos[k], self.ally_hp[k])
            feats += [self.ally_hp[i] / self.max_health, me[0] / (self.size - 1), me[1] / (self.size - 1)]
            out[i] = feats
        return out

    def get_state(self):
        rows = []
        for pos, hp in ((self.ally_pos, self.ally_hp), (self.enemy_pos, self.enemy_hp)):
            for p, h in zip(pos, hp):
                rows += [p[0] / (self.size - 1), p[1] / (self.size - 1), h / self.max_health]
        return np.asarray(rows)

    def success(self):
        return bool((self.enemy_hp == 0).all())
