"""Trainable model bundle and the single training step.

The learner owns one ParamBlock with every trainable tensor (action net,
mixer, novelty predictor), a target copy of the action net and mixer, the
frozen novelty target, and the canonical observation / novelty normalizers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .agent import ActionNet, IRDNet, RunningGaussian, _sub, ird_loss
from .envs import EnvSpec
from .errors import CheckpointError
from .mixer import DoubleMixer, mixing_loss, td_targets

log = logging.getLogger(__name__)

NEG = -1e9


@dataclass(frozen=True)
class ModelDims:
    action_hidden: int = 64
    ird_hidden: int = 32
    ird_out: int = 5
    mixer_embed: int = 32
    hyper_hidden: int = 32
    nonneg: str = "softmax"


@dataclass
class ParamSnapshot:
    """Immutable parameter set served to workers."""

    version: int
    action_net: dict[str, np.ndarray]
    predictor: dict[str, np.ndarray]
    target: dict[str, np.ndarray]
    obs_rms: RunningGaussian
    rw_rms: RunningGaussian
    dtype: type = np.float64

    def as_dtype(self, dtype) -> ParamSnapshot:
        cast = lambda d: {k: v.astype(dtype) for k, v in d.items()}  # noqa: E731
        return ParamSnapshot(self.version, cast(self.action_net), cast(self.predictor), cast(self.target),
                             self.obs_rms.copy(), self.rw_rms.copy(), dtype)


@dataclass
class StepStats:
    loss_mix: float
    loss_inc: float
    td_abs: float
    intrinsic: float
    td_errors: list[np.ndarray] = field(default_factory=list)
    applied: bool = True


class Learner:
    def __init__(self, spec: EnvSpec, dims: ModelDims = ModelDims(), lr: float = 5e-4, gamma_ext: float = 0.99,
                 gamma_int: float = 0.95, clip_norm: float | None = 10.0, seed: int = 0):
        self.spec = spec
        self.dims = dims
        self.gamma_ext, self.gamma_int = gamma_ext, gamma_int
        self.net = ActionNet(spec.obs_dim, spec.n_actions, dims.action_hidden)
        self.ird = IRDNet(spec.obs_dim, dims.ird_hidden, dims.ird_out)
        self.mixer = DoubleMixer(spec.n_agents, spec.state_dim, dims.mixer_embed, dims.hyper_hidden, dims.nonneg)
        rng = np.random.default_rng(seed)
        self.params = tc.ParamBlock()
        self.net.init(rng, self.params, "action_net/")
        self.mixer.init(rng, self.params, "mixer/")
        self.ird.init(rng, self.params, "ird/predictor/")
        frozen = tc.ParamBlock()
        self.ird.init(rng, frozen, "ird/target/")
        self.ird_target = {k[len("ird/target/"):]: v for k, v in frozen.frozen().items()}
        self.target_syncs = 0
        self.sync_target()
        self.opt = tc.Adam(lr=lr, clip_norm=clip_norm)
        self.obs_rms = RunningGaussian((spec.obs_dim,))
        self.rw_rms = RunningGaussian(())
        self.train_steps = 0
        self.target_syncs = 0  # syncs beyond the initial copy

    # ------------------------------------------------------------ params

    def sync_target(self) -> None:
        self.target = {k: v.copy() for k, v in self.params.params.items() if not k.startswith("ird/")}
        self.target_syncs += 1

    def snapshot(self, version: int) -> ParamSnapshot:
        frozen = self.params.frozen()
        return ParamSnapshot(version, _sub(frozen, "action_net/"), _sub(frozen, "ird/predictor/"),
                             dict(self.ird_target), self.obs_rms.copy(), self.rw_rms.copy())

    def merge_stats(self, obs_delta: RunningGaussian, rw_delta: RunningGaussian) -> None:
        self.obs_rms.merge(obs_delta)
        self.rw_rms.merge(rw_delta)

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.params.params)
        for k, v in self.target.items():
            head, rest = k.split("/", 1)
            out[f"{head}_target/{rest}"] = v
        for k, v in self.ird_target.items():
            out["ird/target/" + k] = v
        out.update(self.obs_rms.to_tensors("norm/obs"))
        out.update(self.rw_rms.to_tensors("norm/rw"))
        for name in ("m", "v"):
            for k, v in getattr(self.params, name).items():
                out[f"optim/{name}/{k}"] = v
        out["optim/step"] = np.array([float(self.params.step)])
        out["learner/train_steps"] = np.array([float(self.train_steps)])
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        try:
            self.params.load({k: tensors[k] for k in self.params.names()})
            for k in self.target:
                head, rest = k.split("/", 1)
                self.target[k] = tensors[f"{head}_target/{rest}"].copy()
            self.ird_target = {k: tensors["ird/target/" + k].copy() for k in self.ird_target}
            for k in self.ird_target.values():
                k.flags.writeable = False
            self.obs_rms = RunningGaussian.from_tensors(tensors, "norm/obs", (self.spec.obs_dim,))
            self.rw_rms = RunningGaussian.from_tensors(tensors, "norm/rw", ())
            for name in ("m", "v"):
                buf = getattr(self.params, name)
                for k in buf:
                    buf[k][...] = tensors[f"optim/{name}/{k}"]
            self.params.step = int(tensors["optim/step"][0])
            self.train_steps = int(tensors["learner/train_steps"][0])
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"checkpoint does not match this model: {exc}") from exc

    # ------------------------------------------------------------ losses

    def _target_next_values(self, batch: dict) -> tuple[np.ndarray, np.ndarray]:
        """Target-network joint values at ``t+1`` using each agent's masked greedy action."""
        tp = self.target
        tq = tc.value(self.net.unroll(_sub(tp, "action_net/"), batch["obs"]))  # [B, T+1, n, A]
        tq = np.where(batch["avail"], tq, NEG)
        nxt = tq[:, 1:]
        chosen = np.take_along_axis(nxt, nxt.argmax(axis=-1)[..., None], axis=-1)[..., 0]
        chosen = np.where(chosen <= NEG / 2, 0.0, chosen)
        q_jt, q_inc = self.mixer.mix(_sub(tp, "mixer/"), chosen, batch["state"][:, 1:])
        return tc.value(q_jt), tc.value(q_inc)

    def losses(self, leaves: dict, batch: dict, is_weights: np.ndarray, beta: float):
        """``(L_mix, L_inc, delta_ext)`` with ``leaves`` mapping every trainable name."""
        q = self.net.unroll(_sub(leaves, "action_net/"), batch["obs"])  # [B, T+1, n, A]
        T = batch["actions"].shape[1]
        q_taken = tc.take_along(tc.narrow(q, 0, T, axis=1), batch["actions"][..., None], axis=-1)
        q_taken = tc.reshape(q_taken, batch["actions"].shape)  # [B, T, n]
        q_jt, q_inc = self.mixer.mix(_sub(leaves, "mixer/"), q_taken, batch["state"][:, :T])
        nq_jt, nq_inc = self._target_next_values(batch)
        r_int = batch["intrinsic"].mean(axis=-1)
        y_ext, y_inc = td_targets(batch["reward"], r_int, batch["terminated"], nq_jt, nq_inc,
                                  self.gamma_ext, self.gamma_int)
        l_mix, delta = mixing_loss(q_jt, q_inc, y_ext, y_inc, batch["mask"], is_weights, beta)
        l_inc = ird_loss(self.ird, _sub(leaves, "ird/predictor/"), self.ird_target, self.obs_rms,
                         batch["obs"][:, 1:], batch["mask"])
        return l_mix, l_inc, delta

    def train_step(self, batch: dict, is_weights: np.ndarray, beta: float) -> StepStats:
        leaves = self.params.leaves()
        l_mix, l_inc, delta = self.losses(leaves, batch, is_weights, beta)
        total = tc.add(l_mix, l_inc)
        mask = batch["mask"]
        tds = [delta[b][mask[b] > 0] for b in range(len(mask))]
        stats = StepStats(float(tc.value(l_mix)), float(tc.value(l_inc)),
                          float(np.abs(delta).sum() / max(mask.sum(), 1)),
                          float((batch["intrinsic"].mean(axis=-1) * mask).sum() / max(mask.sum(), 1)), tds)
        if not np.isfinite(tc.value(total)):
            log.warning("non-finite loss at step %d; update skipped", self.train_steps)
            stats.applied = False
            return stats
        total.backward()
        self.params.accumulate(leaves)
        stats.applied = tc.optimizer_step(self.params, opt=self.opt)
        if stats.applied:
            self.train_steps += 1
        return stats
