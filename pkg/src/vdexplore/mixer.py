"""State-conditioned monotonic double mixer and its TD losses.

Hypernetworks map the global state to the mixer weights.  Weight outputs go
through a softmax (or ``abs`` in the ablation mode) so every mixing weight is
positive, which makes both joint values monotone in each agent's Q-value.
The first mixing layer is shared; two second-layer branches give the
external joint value and the intrinsic joint value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError

BRANCHES = ("1", "2")  # "1": external value, "2": intrinsic value


@dataclass(frozen=True)
class DoubleMixer:
    n_agents: int
    state_dim: int
    embed: int = 32
    hyper_hidden: int = 32
    nonneg: str = "softmax"

    def __post_init__(self):
        if self.nonneg not in ("softmax", "abs"):
            raise ConfigError(f"mixer nonneg must be 'softmax' or 'abs', got {self.nonneg!r}")

    def init(self, rng: np.random.Generator, block: tc.ParamBlock, prefix: str = "mixer/") -> None:
        s, E, n, Hh = self.state_dim, self.embed, self.n_agents, self.hyper_hidden
        block.add(prefix + "hyper_w1/W", tc.uniform_init(rng, n * E, s))
        block.add(prefix + "hyper_w1/b", np.zeros(n * E))
        block.add(prefix + "hyper_b1/W", tc.uniform_init(rng, E, s))
        block.add(prefix + "hyper_b1/b", np.zeros(E))
        for k in BRANCHES:
            block.add(prefix + f"hyper_w2_{k}/W", tc.uniform_init(rng, E, s))
            block.add(prefix + f"hyper_w2_{k}/b", np.zeros(E))
            block.add(prefix + f"hyper_b2_{k}/l0/W", tc.uniform_init(rng, Hh, s))
            block.add(prefix + f"hyper_b2_{k}/l0/b", np.zeros(Hh))
            block.add(prefix + f"hyper_b2_{k}/l1/W", tc.uniform_init(rng, 1, Hh))
            block.add(prefix + f"hyper_b2_{k}/l1/b", np.zeros(1))

    def _positive(self, x, axis):
        return tc.softmax(x, axis=axis) if self.nonneg == "softmax" else tc.absolute(x)

    def weights(self, p: Mapping, state):
        """Mixing weights and biases produced from ``state [..., s]``."""
        sv = tc.value(state)
        if sv.shape[-1] != self.state_dim:
            raise ConfigError(f"state width {sv.shape[-1]} != {self.state_dim}")
        lead = sv.shape[:-1]
        E, n = self.embed, self.n_agents
        w1 = tc.reshape(tc.affine_forward(state, p["hyper_w1/W"], p["hyper_w1/b"]), lead + (E, n))
        out = {
            "w1": self._positive(w1, axis=-1),
            "b1": tc.affine_forward(state, p["hyper_b1/W"], p["hyper_b1/b"]),
        }
        for k in BRANCHES:
            out[f"w2_{k}"] = self._positive(tc.affine_forward(state, p[f"hyper_w2_{k}/W"], p[f"hyper_w2_{k}/b"]), axis=-1)
            hid = tc.relu(tc.affine_forward(state, p[f"hyper_b2_{k}/l0/W"], p[f"hyper_b2_{k}/l0/b"]))
            b2 = tc.affine_forward(hid, p[f"hyper_b2_{k}/l1/W"], p[f"hyper_b2_{k}/l1/b"])
            out[f"b2_{k}"] = tc.reshape(b2, lead)
        return out

    def mix(self, p: Mapping, agent_qs, state):
        """``(q_jt, q_jt_inc)`` for chosen-action values ``agent_qs [..., n]``."""
        qv = tc.value(agent_qs)
        if qv.shape[-1] != self.n_agents:
            raise ConfigError(f"expected {self.n_agents} agent values, got {qv.shape[-1]}")
        lead = qv.shape[:-1]
        w = self.weights(p, state)
        qs = tc.reshape(agent_qs, lead + (self.n_agents, 1))
        pre = tc.reshape(tc.matmul(w["w1"], qs), lead + (self.embed,))
        hidden = tc.elu(tc.add(pre, w["b1"]))
        q = [tc.add(tc.reduce_sum(tc.mul(w[f"w2_{k}"], hidden), axis=-1), w[f"b2_{k}"]) for k in BRANCHES]
        return q[0], q[1]


def td_targets(reward, intrinsic, terminated, next_q_jt, next_q_inc, gamma_ext: float = 0.99,
               gamma_int: float = 0.95):
    """One-step targets for both branches; no bootstrap past a true terminal."""
    cont = 1.0 - np.asarray(terminated, dtype=np.float64)
    y_ext = np.asarray(reward) + gamma_ext * cont * np.asarray(next_q_jt)
    y_inc = np.asarray(intrinsic) + gamma_int * cont * np.asarray(next_q_inc)
    return y_ext, y_inc


def mixing_loss(q_jt, q_inc, y_ext, y_inc, mask, is_weights, beta: float):
    """IS-weighted sum over episodes of the per-episode masked mean of the
    squared blended TD error.  Returns ``(loss, delta_ext)``.
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    mask = np.asarray(mask, dtype=np.float64)
    delta_ext = tc.sub(y_ext, q_jt)
    delta_inc = tc.sub(y_inc, q_inc)
    blended = tc.add(tc.mul(delta_ext, 1.0 - beta), tc.mul(delta_inc, beta))
    lengths = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    w = np.asarray(is_weights, dtype=np.float64)[:, None] * mask / lengths
    return tc.reduce_sum(tc.mul(tc.square(blended), w)), tc.value(delta_ext) * mask
