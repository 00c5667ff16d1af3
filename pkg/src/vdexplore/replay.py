"""Episode-granular prioritized replay with an importance factor.

Each stored episode carries a TD priority, a visit count, the training step
it was stored at, and its external return.  Sampling is stratified over the
total mass of a SumTree.  By default the leaf mass of an episode is its
blended sampling weight ``alpha * priority + (1 - alpha) * importance``; the
``leaf="priority"`` mode stores the TD priority alone.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation

log = logging.getLogger(__name__)

P_MIN = 1e-3


class SumTree:
    """Binary tree of partial sums over ``capacity`` leaves (rounded up to a power of two)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("SumTree capacity must be >= 1")
        self.capacity = capacity
        self.n_leaves = 1 << max(capacity - 1, 0).bit_length()
        # 1-indexed heap layout; nodes[1] is the root, leaves start at n_leaves
        self.nodes = np.zeros(2 * self.n_leaves)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def leaf(self, slot: int) -> float:
        return float(self.nodes[self.n_leaves + slot])

    def leaves(self) -> np.ndarray:
        return self.nodes[self.n_leaves : self.n_leaves + self.capacity].copy()

    def update(self, slot: int, value: float) -> None:
        if not 0 <= slot < self.capacity:
            raise ConfigError(f"slot {slot} out of range")
        if not math.isfinite(value):
            raise ConfigError("priority must be finite")
        if value < 0:
            log.warning("negative priority %g clamped to %g", value, P_MIN)
            value = P_MIN
        i = self.n_leaves + slot
        self.nodes[i] = value
        i //= 2
        while i >= 1:
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1]
            i //= 2

    def clear(self, slot: int) -> None:
        i = self.n_leaves + slot
        self.nodes[i] = 0.0
        i //= 2
        while i >= 1:
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1]
            i //= 2

    def get(self, prefix: float) -> int:
        """Leaf whose cumulative-sum interval ``[lo, hi)`` contains ``prefix``."""
        total = self.total
        if total <= 0:
            raise ContractViolation("cannot descend an empty SumTree")
        if prefix >= total or prefix < 0:
            clamped = min(max(prefix, 0.0), np.nextafter(total, 0.0))
            log.debug("prefix %g outside [0, %g); clamped", prefix, total)
            prefix = clamped
        i = 1
        while i < self.n_leaves:
            left = self.nodes[2 * i]
            if prefix < left:
                i = 2 * i
            else:
                prefix -= left
                i = 2 * i + 1
        slot = i - self.n_leaves
        if self.nodes[i] <= 0:
            # rounding walked onto an empty leaf; fall back to the nearest occupied one on the left
            occupied = np.flatnonzero(self.nodes[self.n_leaves : self.n_leaves + slot] > 0)
            slot = int(occupied[-1]) if occupied.size else int(np.flatnonzero(self.leaves() > 0)[0])
        return slot

    def check(self, rtol: float = 1e-9) -> bool:
        """Root equals the leaf sum and every internal node equals its children's sum."""
        internal = np.arange(1, self.n_leaves)
        ok_nodes = np.allclose(self.nodes[internal], self.nodes[2 * internal] + self.nodes[2 * internal + 1],
                               rtol=rtol, atol=0.0)
        leaf_sum = math.fsum(self.nodes[self.n_leaves :])
        return ok_nodes and abs(self.total - leaf_sum) <= rtol * max(abs(leaf_sum), 1e-300)


@dataclass
class EpisodeRecord:
    """One episode padded to the environment's step limit."""

    episode_id: str
    obs: np.ndarray  # [T+1, n, obs_dim]
    state: np.ndarray  # [T+1, state_dim]
    avail: np.ndarray  # [T+1, n, A] bool
    actions: np.ndarray  # [T, n]
    reward: np.ndarray  # [T]
    intrinsic: np.ndarray  # [T, n] normalized novelty reward of each transition
    terminated: np.ndarray  # [T] bool
    filled: np.ndarray  # [T] bool
    length: int
    ext_return: float
    visits: int = 0
    t_gen: int = 0
    priority: float = 1.0
    won: bool = False

    @classmethod
    def from_steps(cls, episode_id: str, episode_limit: int, obs, state, avail, actions, reward,
                   intrinsic, terminated, won: bool = False) -> EpisodeRecord:
        """Pad per-step lists (``len(obs) == len(actions) + 1``) to ``episode_limit``."""
        l = len(actions)
        if l == 0:
            raise ContractViolation("episode with zero valid steps")
        if l > episode_limit or len(obs) != l + 1:
            raise ContractViolation(f"bad episode shape: {l} actions, {len(obs)} observations")
        T = episode_limit
        obs = np.asarray(obs, dtype=np.float64)
        n, d = obs.shape[1:]
        state = np.asarray(state, dtype=np.float64)
        avail = np.asarray(avail, dtype=bool)
        out_obs = np.zeros((T + 1, n, d))
        out_obs[: l + 1] = obs
        out_state = np.zeros((T + 1, state.shape[-1]))
        out_state[: l + 1] = state
        out_avail = np.zeros((T + 1, n, avail.shape[-1]), dtype=bool)
        out_avail[: l + 1] = avail
        out_actions = np.zeros((T, n), dtype=np.int64)
        out_actions[:l] = actions
        out_reward = np.zeros(T)
        out_reward[:l] = reward
        out_intr = np.zeros((T, n))
        out_intr[:l] = intrinsic
        out_term = np.zeros(T, dtype=bool)
        out_term[:l] = terminated
        filled = np.zeros(T, dtype=bool)
        filled[:l] = True
        return cls(episode_id, out_obs, out_state, out_avail, out_actions, out_reward, out_intr, out_term,
                   filled, length=l, ext_return=float(np.sum(reward)), won=won)


@dataclass
class SampleBatch:
    records: list[EpisodeRecord]
    slots: np.ndarray
    is_weights: np.ndarray
    episode_ids: list[str] = field(default_factory=list)


def stack_records(records: list[EpisodeRecord]) -> dict[str, np.ndarray]:
    """Batch arrays trimmed to the longest episode in the batch."""
    T = max(r.length for r in records)
    return {
        "obs": np.stack([r.obs[: T + 1] for r in records]),
        "state": np.stack([r.state[: T + 1] for r in records]),
        "avail": np.stack([r.avail[: T + 1] for r in records]),
        "actions": np.stack([r.actions[:T] for r in records]),
        "reward": np.stack([r.reward[:T] for r in records]),
        "intrinsic": np.stack([r.intrinsic[:T] for r in records]),
        "terminated": np.stack([r.terminated[:T] for r in records]).astype(np.float64),
        "mask": np.stack([r.filled[:T] for r in records]).astype(np.float64),
    }


# ---------------------------------------------------------------- scores


def priority(td_errors, p_min: float = P_MIN) -> float:
    """Mean absolute TD error over the valid steps, plus a positive floor."""
    td = np.asarray(td_errors, dtype=np.float64)
    if td.size == 0:
        return p_min
    return float(np.mean(np.abs(td))) + p_min


def importance_factor(ext_return: float, length: int, visits: int, age: float, c: float = -1e-4) -> float:
    """``max(R/l + c * age * sqrt(ln N), 0)``; ``ln N`` uses ``max(N, 1)``."""
    if length <= 0:
        raise ContractViolation("importance factor of an empty episode")
    return max(ext_return / length + c * age * math.sqrt(math.log(max(visits, 1))), 0.0)


def isweight(prio: float, factor: float, alpha: float = 0.5) -> float:
    return alpha * prio + (1.0 - alpha) * factor


# ---------------------------------------------------------------- buffer


class ReplayBuffer:
    """Ring buffer of episodes indexed by a SumTree.

    Single-owner: every mutation happens in the thread that owns the buffer.
    """

    def __init__(self, capacity: int = 5000, alpha: float = 0.5, c: float = -1e-4, p_min: float = P_MIN,
                 uniform: bool = False, leaf: str = "isweight", rng: np.random.Generator | None = None):
        if capacity < 1:
            raise ConfigError("replay.capacity must be >= 1")
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError("replay.alpha must lie in [0, 1]")
        if p_min <= 0:
            raise ConfigError("replay.p_min must be > 0")
        if leaf not in ("isweight", "priority"):
            raise ConfigError("replay.leaf must be 'isweight' or 'priority'")
        self.capacity = capacity
        self.alpha, self.c, self.p_min = alpha, c, p_min
        self.uniform = uniform
        self.leaf_mode = leaf
        self.tree = SumTree(capacity)
        self.records: list[EpisodeRecord | None] = [None] * capacity
        self.cursor = 0
        self.size = 0
        self.inserted = 0
        self.max_priority = 1.0
        self.rng = rng or np.random.default_rng()

    def __len__(self):
        return self.size

    def factor(self, rec: EpisodeRecord, now: int) -> float:
        return importance_factor(rec.ext_return, rec.length, rec.visits, now - rec.t_gen, self.c)

    def weight(self, rec: EpisodeRecord, now: int) -> float:
        return isweight(rec.priority, self.factor(rec, now), self.alpha)

    def _leaf_value(self, rec: EpisodeRecord, now: int) -> float:
        if self.leaf_mode == "priority":
            return max(rec.priority, self.p_min)
        return max(self.weight(rec, now), self.p_min)

    def max_leaf(self) -> float:
        if self.size == 0:
            return 1.0
        return float(self.tree.leaves().max())

    def insert(self, rec: EpisodeRecord, now: int) -> int:
        if rec.length <= 0:
            raise ContractViolation("episode with zero valid steps rejected")
        slot = self.cursor
        top = self.max_leaf()
        rec.priority = self.max_priority
        rec.visits = 0
        rec.t_gen = now
        if self.records[slot] is None:
            self.size += 1
        self.records[slot] = rec
        self.tree.update(slot, top)
        self.cursor = (self.cursor + 1) % self.capacity
        self.inserted += 1
        return slot

    def tree_update(self, slot: int, value: float) -> None:
        if value < self.p_min:
            log.warning("priority %g below floor, clamped to %g", value, self.p_min)
            value = self.p_min
        self.tree.update(slot, value)

    def tree_get(self, prefix: float) -> int:
        return self.tree.get(prefix)

    def sample(self, batch_size: int, now: int) -> SampleBatch | None:
        """Stratified draw of ``batch_size`` episodes, or None when too few are stored."""
        if self.size < batch_size or batch_size < 1:
            return None
        if self.uniform:
            occupied = np.flatnonzero([r is not None for r in self.records])
            slots = occupied[self.rng.integers(occupied.size, size=batch_size)]
        else:
            seg = self.tree.total / batch_size
            slots = np.array([self.tree.get(self.rng.uniform(i * seg, (i + 1) * seg)) for i in range(batch_size)])
        records = [self.records[s] for s in slots]
        for s, rec in zip(slots, records):
            rec.visits += 1
        if self.uniform:
            weights = np.ones(batch_size)
        else:
            weights = np.array([self.weight(r, now) for r in records])
            top = weights.max()
            weights = weights / top if top > 0 else np.ones(batch_size)
            if self.leaf_mode == "isweight":
                for s in set(slots.tolist()):
                    self.tree.update(s, self._leaf_value(self.records[s], now))
        return SampleBatch(records, slots, weights, [r.episode_id for r in records])

    def update_after_train(self, batch: SampleBatch, td_errors: list[np.ndarray], now: int) -> None:
        """Refresh priorities of the episodes just trained on."""
        for slot, eid, td in zip(batch.slots, batch.episode_ids, td_errors):
            rec = self.records[slot]
            if rec is None or rec.episode_id != eid:
                log.info("slot %d overwritten since sampling; priority update skipped", slot)
                continue
            rec.priority = priority(td, self.p_min)
            self.max_priority = max(self.max_priority, rec.priority)
            if not self.uniform:
                self.tree_update(int(slot), self._leaf_value(rec, now))

    def occupied(self) -> list[tuple[int, EpisodeRecord]]:
        return [(i, r) for i, r in enumerate(self.records) if r is not None]

    def visit_counts(self) -> np.ndarray:
        return np.array([r.visits for _, r in self.occupied()])

    def dump_rows(self, now: int) -> list[dict]:
        return [
            {"slot": i, "T_gen": r.t_gen, "N": r.visits, "p": r.priority, "factor": self.factor(r, now),
             "R_e": r.ext_return, "l": r.length}
            for i, r in self.occupied()
        ]

    def dump_csv(self, path: str | Path, now: int) -> None:
        rows = self.dump_rows(now)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["slot", "T_gen", "N", "p", "factor", "R_e", "l"])
            writer.writeheader()
            writer.writerows(rows)


def sweep_steps(size: int, batch_size: int) -> int:
    """Training steps needed to draw as many episodes as the buffer holds."""
    return -(-size // batch_size)


def visit_summary(rows: list[dict], now: int, batch_size: int) -> dict:
    """Visit-count distribution of a replay dump plus the coverage of slots older than one sweep."""
    if not rows:
        return {"slots": 0}
    visits = np.array([float(r["N"]) for r in rows])
    ages = np.array([now - int(r["T_gen"]) for r in rows])
    sweep = sweep_steps(len(rows), batch_size)
    old = ages >= sweep
    mean = float(visits.mean())
    return {
        "slots": len(rows),
        "now": now,
        "sweep_steps": sweep,
        "visits_mean": mean,
        "visits_std": float(visits.std()),
        "visits_cv": float(visits.std() / mean) if mean > 0 else float("nan"),
        "visits_max": int(visits.max()),
        "zero_visit_slots": int((visits == 0).sum()),
        "old_slots": int(old.sum()),
        "old_zero_visit_slots": int(((visits == 0) & old).sum()),
        "histogram": {str(int(k)): int(v) for k, v in zip(*np.unique(visits, return_counts=True))},
    }


def read_dump(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) if k in ("p", "factor", "R_e") else int(v) for k, v in row.items()}
                for row in csv.DictReader(fh)]
