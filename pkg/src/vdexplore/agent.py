"""Shared per-agent networks: recurrent Q network, novelty (predictor/target)
network, running normalizers, and masked epsilon-greedy selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, ContractViolation

log = logging.getLogger(__name__)

OBS_CLIP = 5.0
STD_FLOOR = 1e-8


class RunningGaussian:
    """Streaming mean/variance (Welford) with an associative merge."""

    def __init__(self, shape=()):
        self.count = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    @property
    def var(self) -> np.ndarray:
        return self.m2 / max(self.count - 1, 1)

    @property
    def std(self) -> np.ndarray:
        # Before two samples exist there is no spread estimate; leave inputs unscaled.
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.maximum(np.sqrt(self.var), STD_FLOOR)

    def update(self, sample) -> bool:
        x = np.asarray(sample, dtype=np.float64)
        if x.shape != self.mean.shape:
            raise ConfigError(f"sample shape {x.shape} != normalizer shape {self.mean.shape}")
        if not np.all(np.isfinite(x)):
            log.warning("non-finite sample rejected by running normalizer")
            return False
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)
        return True

    def update_batch(self, samples) -> int:
        """Fold in rows of ``samples``; non-finite rows are dropped. Returns rows accepted."""
        xs = np.asarray(samples, dtype=np.float64).reshape((-1,) + self.mean.shape)
        ok = np.all(np.isfinite(xs.reshape(len(xs), -1)), axis=1)
        if not ok.all():
            log.warning("%d non-finite samples rejected by running normalizer", int((~ok).sum()))
        xs = xs[ok]
        if len(xs):
            other = RunningGaussian(self.mean.shape)
            other.count = len(xs)
            other.mean = xs.mean(axis=0)
            other.m2 = ((xs - other.mean) ** 2).sum(axis=0)
            self.merge(other)
        return int(ok.sum())

    def merge(self, other: RunningGaussian) -> RunningGaussian:
        if other.count == 0:
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / n)
        self.m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        self.count = n
        return self

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x) - self.mean) / self.std

    def copy(self) -> RunningGaussian:
        out = RunningGaussian(self.mean.shape)
        out.count, out.mean, out.m2 = self.count, self.mean.copy(), self.m2.copy()
        return out

    def to_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}/count": np.array([float(self.count)]), f"{prefix}/mean": np.atleast_1d(self.mean),
                f"{prefix}/m2": np.atleast_1d(self.m2)}

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], prefix: str, shape=()) -> RunningGaussian:
        out = cls(shape)
        out.count = int(tensors[f"{prefix}/count"][0])
        out.mean = tensors[f"{prefix}/mean"].reshape(shape).copy()
        out.m2 = tensors[f"{prefix}/m2"].reshape(shape).copy()
        return out

    def __eq__(self, other):
        return (isinstance(other, RunningGaussian) and self.count == other.count
                and np.array_equal(self.mean, other.mean) and np.array_equal(self.m2, other.m2))


def update_gaussian(stats: RunningGaussian, sample) -> RunningGaussian:
    stats.update(sample)
    return stats


# ---------------------------------------------------------------- networks


def _sub(p: Mapping, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix)}


@dataclass(frozen=True)
class ActionNet:
    """Input affine + relu, GRU cell, output affine; shared by every agent."""

    obs_dim: int
    n_actions: int
    hidden: int = 64

    def init(self, rng: np.random.Generator, block: tc.ParamBlock, prefix: str = "action_net/") -> None:
        H = self.hidden
        block.add(prefix + "fc1/W", tc.uniform_init(rng, H, self.obs_dim))
        block.add(prefix + "fc1/b", np.zeros(H))
        block.add(prefix + "gru/W_x", tc.uniform_init(rng, 3 * H, H))
        block.add(prefix + "gru/W_h", tc.uniform_init(rng, 3 * H, H))
        block.add(prefix + "gru/b_x", np.zeros(3 * H))
        block.add(prefix + "gru/b_h", np.zeros(3 * H))
        block.add(prefix + "fc2/W", tc.uniform_init(rng, self.n_actions, H))
        block.add(prefix + "fc2/b", np.zeros(self.n_actions))

    def initial_hidden(self, *lead) -> np.ndarray:
        return np.zeros(lead + (self.hidden,))

    def embed(self, p: Mapping, obs):
        return tc.relu(tc.affine_forward(obs, p["fc1/W"], p["fc1/b"]))

    def recur(self, p: Mapping, x, h):
        return tc.gru_step(x, h, p["gru/W_x"], p["gru/W_h"], p["gru/b_x"], p["gru/b_h"])

    def head(self, p: Mapping, h):
        return tc.affine_forward(h, p["fc2/W"], p["fc2/b"])

    def act_q(self, p: Mapping, obs, hidden):
        """One decision step: ``(q [..., n_actions], hidden' [..., H])``."""
        if tc.value(obs).shape[-1] != self.obs_dim:
            raise ConfigError(f"observation width {tc.value(obs).shape[-1]} != {self.obs_dim}")
        if tc.value(hidden).shape[-1] != self.hidden:
            raise ConfigError(f"hidden width {tc.value(hidden).shape[-1]} != {self.hidden}")
        h = self.recur(p, self.embed(p, obs), hidden)
        return self.head(p, h), h

    def unroll(self, p: Mapping, obs_seq):
        """Q-values for a whole episode batch ``[B, T, n, obs_dim] -> [B, T, n, A]``.

        The input embedding and output head are applied over all steps at once;
        only the GRU is iterated.
        """
        obs_v = tc.value(obs_seq)
        B, T, n, _ = obs_v.shape
        x = self.embed(p, obs_seq)
        h = self.initial_hidden(B, n)
        hs = []
        for t in range(T):
            h = self.recur(p, tc.select(x, t, axis=1), h)
            hs.append(h)
        return self.head(p, tc.stack(hs, axis=1))


@dataclass(frozen=True)
class IRDNet:
    """Three affine layers with relu in between; predictor and frozen target share this shape."""

    obs_dim: int
    hidden: int = 32
    out_dim: int = 5

    def init(self, rng: np.random.Generator, block: tc.ParamBlock, prefix: str) -> None:
        dims = [self.obs_dim, self.hidden, self.hidden, self.out_dim]
        for i in range(3):
            block.add(f"{prefix}l{i}/W", tc.uniform_init(rng, dims[i + 1], dims[i]))
            block.add(f"{prefix}l{i}/b", np.zeros(dims[i + 1]))

    def forward(self, p: Mapping, x):
        for i in range(3):
            x = tc.affine_forward(x, p[f"l{i}/W"], p[f"l{i}/b"])
            if i < 2:
                x = tc.relu(x)
        return x


def normalize_obs(obs_rms: RunningGaussian, obs) -> np.ndarray:
    return np.clip(obs_rms.normalize(obs), -OBS_CLIP, OBS_CLIP)


def raw_intrinsic(ird: IRDNet, predictor: Mapping, target: Mapping, obs_rms: RunningGaussian,
                  next_obs) -> np.ndarray:
    """L2 distance between predictor and target embeddings of the normalized observation."""
    x = normalize_obs(obs_rms, next_obs)
    diff = tc.value(ird.forward(predictor, x)) - tc.value(ird.forward(target, x))
    return np.sqrt((diff * diff).sum(axis=-1))


def intrinsic_reward(ird: IRDNet, predictor: Mapping, target: Mapping, obs_rms: RunningGaussian,
                     rw_rms: RunningGaussian, next_obs) -> tuple[np.ndarray, np.ndarray]:
    """``(normalized, raw)`` novelty rewards for a batch of next observations."""
    raw = raw_intrinsic(ird, predictor, target, obs_rms, next_obs)
    return (raw - rw_rms.mean) / rw_rms.std, raw


def ird_loss(ird: IRDNet, predictor: Mapping, target: Mapping, obs_rms: RunningGaussian,
             next_obs: np.ndarray, mask: np.ndarray):
    """Mean over valid (episode, step, agent) of the squared embedding error.

    ``next_obs`` is ``[B, T, n, d]`` and ``mask`` is ``[B, T]``.
    """
    if next_obs.shape[0] == 0 or mask.sum() == 0:
        raise ContractViolation("ird_loss needs at least one valid step")
    x = normalize_obs(obs_rms, next_obs)
    g = tc.value(ird.forward(target, x))
    diff = tc.sub(ird.forward(predictor, x), g)
    per = tc.reduce_sum(tc.square(diff), axis=-1)  # [B, T, n]
    n_agents = next_obs.shape[2]
    w = mask[..., None] / (mask.sum() * n_agents)
    return tc.reduce_sum(tc.mul(per, w))


# ---------------------------------------------------------------- acting


def select_action(q, avail, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy restricted to available actions."""
    avail = np.asarray(avail, dtype=bool)
    allowed = np.flatnonzero(avail)
    if allowed.size == 0:
        raise ContractViolation("no available action")
    if rng.random() < epsilon:
        return int(allowed[rng.integers(allowed.size)])
    q = np.asarray(q, dtype=np.float64)
    return int(allowed[np.argmax(q[allowed])])


def select_actions(q: np.ndarray, avail: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    return np.array([select_action(q[i], avail[i], epsilon, rng) for i in range(len(q))], dtype=np.int64)


def epsilon_at(env_steps: int, start: float = 1.0, end: float = 0.05, anneal_steps: int = 50_000) -> float:
    if anneal_steps <= 0:
        return end
    frac = min(max(env_steps, 0) / anneal_steps, 1.0)
    return max(end, start + (end - start) * frac) if start >= end else start + (end - start) * frac
