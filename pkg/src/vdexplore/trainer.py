"""Training schedule, greedy evaluation, checkpoints and the run driver."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Callable

import numpy as np

from . import tensor_core as tc
from .agent import ActionNet, select_actions
from .config import RunConfig
from .envs import MultiAgentEnv, make_env
from .errors import CheckpointError
from .learner import Learner, ModelDims, ParamSnapshot, StepStats
from .replay import ReplayBuffer
from .runtime import (Counters, LearnerConfig, LearnerCore, SnapshotMailbox, learner_loop, run_sync,
                      start_rollout)

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    """Step-indexed beta decay and env-step-indexed epsilon annealing."""

    beta0: float = 0.5
    beta_dec: float = 1e-4
    beta_every: int = 1000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal: int = 50_000
    intrinsic: bool = True

    def beta(self, train_steps: int) -> float:
        if not self.intrinsic:
            return 0.0
        return max(self.beta0 - (train_steps // self.beta_every) * self.beta_dec, 0.0)

    def epsilon(self, env_steps: int) -> float:
        if self.eps_anneal <= 0:
            return self.eps_end
        frac = min(max(env_steps, 0) / self.eps_anneal, 1.0)
        return self.eps_start + (self.eps_end - self.eps_start) * frac

    @classmethod
    def from_config(cls, cfg: RunConfig) -> Schedule:
        s = cfg.schedule
        return cls(s.beta, s.beta_dec, s.beta_every, s.eps_start, s.eps_end, s.eps_anneal, s.intrinsic)


@dataclass
class EvalReport:
    step: int
    win_rate: float
    mean_return: float
    mean_length: float
    episodes: int
    beta: float | None = None
    epsilon: float | None = None
    env_steps: int | None = None
    throughput: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate(snapshot: ParamSnapshot, env: MultiAgentEnv, net: ActionNet, episodes: int = 32,
             seed: int = 0, step: int = 0) -> EvalReport:
    """Greedy roll-outs with the snapshot's action network; nothing is trained or updated."""
    rng = np.random.default_rng(seed)  # only consulted for epsilon > 0, kept for a uniform call
    wins, returns, lengths = 0, [], []
    for k in range(episodes):
        res = env.reset(seed + k)
        h = net.initial_hidden(env.n_agents)
        ret, t = 0.0, 0
        while not res.done:
            q, h = net.act_q(snapshot.action_net, res.obs, h)
            res = env.step(select_actions(q, res.avail, 0.0, rng))
            ret += res.reward
            t += 1
        wins += bool(env.success())
        returns.append(ret)
        lengths.append(t)
    return EvalReport(step=step, win_rate=wins / episodes, mean_return=float(np.mean(returns)),
                      mean_length=float(np.mean(lengths)), episodes=episodes)


# ---------------------------------------------------------------- checkpoints


def checkpoint_meta(cfg: RunConfig) -> bytes:
    return json.dumps({"env": {"name": cfg.env.name, "params": cfg.env.params}, "model": asdict(cfg.model)},
                      sort_keys=True).encode()


def save_learner(path: str | Path, learner: Learner, cfg: RunConfig) -> None:
    tc.save_checkpoint(path, learner.tensors(), learner.train_steps, checkpoint_meta(cfg))


def load_learner(path: str | Path, env_name: str | None = None, env_params: dict | None = None
                 ) -> tuple[Learner, MultiAgentEnv, dict]:
    """Rebuild the learner (and its environment) described by a checkpoint."""
    tensors, step, raw = tc.load_checkpoint(path)
    try:
        meta = json.loads(raw.decode())
        name = env_name or meta["env"]["name"]
        params = meta["env"]["params"] if env_params is None else env_params
        dims = ModelDims(**meta["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint metadata unreadable: {exc}") from exc
    env = make_env(name, **params)
    learner = Learner(env.spec, dims)
    learner.load_tensors(tensors)
    if learner.train_steps != step:
        raise CheckpointError(f"header step {step} disagrees with stored step {learner.train_steps}")
    return learner, env, meta


# ---------------------------------------------------------------- run driver


@dataclass
class RunResult:
    out_dir: Path
    reports: list[EvalReport]
    train_steps: int
    env_steps: int
    episodes: int
    final_checkpoint: Path
    first_win_step: int | None = None


class _Recorder:
    """Metrics, evaluation cadence, and checkpoints, driven from the learner context."""

    def __init__(self, cfg: RunConfig, seed: int, out: Path, core: LearnerCore, counters: Counters,
                 schedule: Schedule, eval_env: MultiAgentEnv, metrics: IO[str], timing: IO[str]):
        self.cfg, self.seed, self.out, self.core = cfg, seed, out, core
        self.counters, self.schedule, self.eval_env = counters, schedule, eval_env
        self.metrics, self.timing = metrics, timing
        self.reports: list[EvalReport] = []
        self.next_eval = cfg.budget.eval_interval
        self.first_win: int | None = None
        self.t0 = time.perf_counter()
        self.last_logged = -1

    def __call__(self, core: LearnerCore, stats: StepStats | None) -> bool:
        k = core.steps
        if stats is not None and stats.applied and k % self.cfg.budget.log_every == 0 and k != self.last_logged:
            self.last_logged = k
            self._write({"kind": "train", "step": k, "env_steps": self.counters.env_steps,
                         "loss_mix": stats.loss_mix, "loss_inc": stats.loss_inc, "td_abs": stats.td_abs,
                         "intrinsic": stats.intrinsic, "beta": self.schedule.beta(k),
                         "epsilon": self.schedule.epsilon(self.counters.env_steps),
                         "buffer_size": len(core.replay), "buffer_total": core.replay.tree.total})
        stop = False
        if self.counters.env_steps >= self.next_eval:
            while self.next_eval <= self.counters.env_steps:
                self.next_eval += self.cfg.budget.eval_interval
            report = self.evaluate()
            stop = self.cfg.budget.stop_on_win and report.win_rate >= 1.0
        return stop

    def evaluate(self) -> EvalReport:
        core = self.core
        k = core.steps
        snap = core.learner.snapshot(core.version)
        report = evaluate(snap, self.eval_env, core.learner.net, self.cfg.budget.eval_episodes,
                          seed=10_000_000 + self.seed, step=k)
        report.beta = self.schedule.beta(k)
        report.epsilon = self.schedule.epsilon(self.counters.env_steps)
        report.env_steps = self.counters.env_steps
        report.throughput = {"episodes": self.counters.episodes, "env_steps": self.counters.env_steps,
                             "train_steps": k}
        self.reports.append(report)
        if report.win_rate >= 1.0 and self.first_win is None:
            self.first_win = k
        self._write({"kind": "eval", **asdict(report)})
        elapsed = time.perf_counter() - self.t0
        self.timing.write(json.dumps({"step": k, "seconds": elapsed,
                                      "env_steps_per_sec": self.counters.env_steps / max(elapsed, 1e-9),
                                      "train_steps_per_sec": k / max(elapsed, 1e-9)}) + "\n")
        save_learner(self.out / f"checkpoint_{k:08d}.ckpt", core.learner, self.cfg)
        return report

    def _write(self, row: dict) -> None:
        self.metrics.write(json.dumps(row, sort_keys=True) + "\n")
        self.metrics.flush()


def build(cfg: RunConfig, seed: int) -> tuple[MultiAgentEnv, Learner, ReplayBuffer, Schedule]:
    env = make_env(cfg.env.name, **cfg.env.params)
    m, s, r = cfg.model, cfg.schedule, cfg.replay
    dims = ModelDims(m.action_hidden, m.ird_hidden, m.ird_out, m.mixer_embed, m.hyper_hidden, m.nonneg)
    learner = Learner(env.spec, dims, lr=s.lr, gamma_ext=s.gamma_ext, gamma_int=s.gamma_int,
                      clip_norm=s.clip_norm, seed=seed)
    replay = ReplayBuffer(r.capacity, r.alpha, r.c, r.p_min, uniform=r.uniform, leaf=r.leaf,
                          rng=np.random.default_rng([seed, 1]))
    return env, learner, replay, Schedule.from_config(cfg)


def train_run(cfg: RunConfig, seed: int | None = None, out_dir: str | Path | None = None,
              on_core: Callable[[LearnerCore], None] | None = None) -> RunResult:
    """Train one seed; write metrics, timing, checkpoints and a replay dump under ``out_dir``."""
    seed = cfg.seeds[0] if seed is None else seed
    out = Path(out_dir) if out_dir is not None else cfg.resolved_output_dir() / f"seed{seed}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(cfg.to_yaml())
    env, learner, replay, schedule = build(cfg, seed)
    rt, b = cfg.runtime, cfg.budget
    core = LearnerCore(learner, replay, SnapshotMailbox(),
                       LearnerConfig(rt.batch_size, rt.target_sync, rt.publish_every), beta_fn=schedule.beta)
    if on_core is not None:
        on_core(core)
    counters = Counters()
    eval_env = make_env(cfg.env.name, **cfg.env.params)
    with open(out / "metrics.jsonl", "w") as metrics, open(out / "timing.jsonl", "w") as timing:
        rec = _Recorder(cfg, seed, out, core, counters, schedule, eval_env, metrics, timing)
        try:
            if rt.distributed:
                roll = start_rollout(lambda: make_env(cfg.env.name, **cfg.env.params), learner.net, learner.ird,
                                     core.mailbox, rt.workers, rt.actors, seed, schedule.epsilon,
                                     rt.queue_bound, rt.norm_every, env_steps=b.env_steps, counters=counters)
                learner_loop(core, roll, train_steps=b.train_steps, hook=rec)
            else:
                run_sync(core, env, seed, schedule.epsilon, rt.norm_every, train_steps=b.train_steps,
                         env_steps=b.env_steps, hook=rec, counters=counters)
        except KeyboardInterrupt:
            log.warning("interrupted; writing final checkpoint")
    final = out / "final.ckpt"
    save_learner(final, learner, cfg)
    replay.dump_csv(out / "replay.csv", core.steps)
    (out / "replay_meta.json").write_text(json.dumps(
        {"now": core.steps, "size": len(replay), "capacity": replay.capacity, "inserted": replay.inserted,
         "uniform": replay.uniform, "batch_size": rt.batch_size, "leaf": replay.leaf_mode}, sort_keys=True))
    return RunResult(out, rec.reports, core.steps, counters.env_steps, counters.episodes, final, rec.first_win)
