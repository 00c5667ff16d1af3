"""Decoupled rollout / serving / training.

Actors step environments and ship finished episodes; workers hold a parameter
snapshot and answer observation requests for their actors with actions and
novelty rewards; the learner drains episodes into replay, trains, and
publishes new snapshots.  Everything runs in one process: actors and workers
are threads talking over bounded queues, and snapshots travel through a
latest-value mailbox.  ``run_sync`` drives the same pieces in a single thread
for a bit-reproducible 1x1 mode.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .agent import ActionNet, IRDNet, RunningGaussian, intrinsic_reward, select_actions
from .envs import MultiAgentEnv
from .errors import ContractViolation
from .learner import Learner, ParamSnapshot, StepStats
from .replay import EpisodeRecord, ReplayBuffer, stack_records

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised after too many consecutive non-finite training steps."""


# ---------------------------------------------------------------- messages


@dataclass
class ObsRequest:
    actor_id: int
    obs: np.ndarray  # [n, obs_dim]
    avail: np.ndarray  # [n, A]
    last_actions: np.ndarray  # [n], -1 before the first step
    step: int
    final: bool = False  # episode over: only the novelty of ``obs`` is wanted


@dataclass
class ActResponse:
    actor_id: int
    step: int
    actions: np.ndarray | None  # None for a final request
    intrinsic: np.ndarray  # [n] normalized novelty of ``obs``; zeros at step 0


@dataclass
class ActorDone:
    actor_id: int


# ---------------------------------------------------------------- channels


class SnapshotMailbox:
    """Single writer, many readers; readers always see the latest published snapshot."""

    def __init__(self):
        self._lock = threading.Lock()
        self._snap: ParamSnapshot | None = None

    def publish(self, snap: ParamSnapshot) -> None:
        with self._lock:
            if self._snap is not None and snap.version <= self._snap.version:
                raise ContractViolation(f"snapshot version {snap.version} does not advance {self._snap.version}")
            self._snap = snap

    def latest(self) -> ParamSnapshot | None:
        with self._lock:
            return self._snap

    @property
    def version(self) -> int:
        snap = self.latest()
        return -1 if snap is None else snap.version


class Counters:
    """Shared run counters (environment steps and finished episodes)."""

    def __init__(self):
        self._lock = threading.Lock()
        self.env_steps = 0
        self.episodes = 0

    def add_steps(self, n: int = 1) -> int:
        with self._lock:
            self.env_steps += n
            return self.env_steps

    def add_episode(self) -> None:
        with self._lock:
            self.episodes += 1


class WorkerPipe:
    """Request queue shared by a worker's actors plus one response queue per actor."""

    def __init__(self, actor_ids: list[int]):
        self.requests: queue.Queue = queue.Queue()
        self.responses = {a: queue.Queue(maxsize=1) for a in actor_ids}

    def asker(self, actor_id: int) -> Callable[[ObsRequest], ActResponse]:
        resp = self.responses[actor_id]

        def ask(req: ObsRequest) -> ActResponse:
            self.requests.put(req)
            return resp.get()

        return ask

    def close(self, actor_id: int) -> None:
        self.requests.put(ActorDone(actor_id))


# ---------------------------------------------------------------- serving


class Server:
    """Serving state of one worker: snapshot, per-actor GRU state, local normalizers."""

    def __init__(self, net: ActionNet, ird: IRDNet, snapshot: ParamSnapshot, rng: np.random.Generator,
                 epsilon_fn: Callable[[], float], norm_every: int = 50,
                 on_stats: Callable[[RunningGaussian, RunningGaussian], None] | None = None):
        self.net, self.ird = net, ird
        self.rng = rng
        self.epsilon_fn = epsilon_fn
        self.norm_every = norm_every
        self.on_stats = on_stats
        self.hidden: dict[int, np.ndarray] = {}
        self.calls = 0
        self.versions_seen: list[int] = []
        self._pending_obs: list[np.ndarray] = []
        self._pending_rw: list[np.ndarray] = []
        self.set_snapshot(snapshot)

    def set_snapshot(self, snap: ParamSnapshot) -> None:
        self.snap = snap
        self.obs_rms = snap.obs_rms.copy()
        self.rw_rms = snap.rw_rms.copy()
        self.versions_seen.append(snap.version)

    def refresh(self, mailbox: SnapshotMailbox) -> None:
        try:
            snap = mailbox.latest()
        except Exception as exc:  # keep serving with what we hold
            log.warning("snapshot fetch failed (%s); serving version %d", exc, self.snap.version)
            return
        if snap is not None and snap.version > self.snap.version:
            self.set_snapshot(snap)

    def serve(self, requests: list[ObsRequest]) -> list[ActResponse]:
        """Answer a batch of requests with one network pass."""
        if not requests:
            return []
        snap = self.snap
        obs = np.stack([r.obs for r in requests]).astype(snap.dtype, copy=False)  # [m, n, d]
        n = obs.shape[1]
        intr = np.zeros((len(requests), n))
        novel = [i for i, r in enumerate(requests) if r.step > 0]
        if novel:
            normed, raw = intrinsic_reward(self.ird, snap.predictor, snap.target, self.obs_rms, self.rw_rms,
                                           obs[novel])
            intr[novel] = normed
            self._pending_rw.append(raw.ravel())
        self._pending_obs.append(obs.reshape(-1, obs.shape[-1]))

        acting = [i for i, r in enumerate(requests) if not r.final]
        actions: dict[int, np.ndarray] = {}
        if acting:
            hs = np.stack([self._hidden(requests[i]) for i in acting])
            q, h = self.net.act_q(snap.action_net, obs[acting], hs.astype(snap.dtype, copy=False))
            eps = self.epsilon_fn()
            for j, i in enumerate(acting):
                req = requests[i]
                self.hidden[req.actor_id] = np.asarray(h[j], dtype=np.float64)
                actions[i] = select_actions(q[j], req.avail, eps, self.rng)
        for r in requests:
            if r.final:
                self.hidden.pop(r.actor_id, None)

        self.calls += 1
        if self.calls % self.norm_every == 0:
            self.flush_stats()
        return [ActResponse(r.actor_id, r.step, actions.get(i), intr[i]) for i, r in enumerate(requests)]

    def _hidden(self, req: ObsRequest) -> np.ndarray:
        if req.step == 0 or req.actor_id not in self.hidden:
            return self.net.initial_hidden(req.obs.shape[0])
        return self.hidden[req.actor_id]

    def flush_stats(self) -> None:
        """Fold buffered samples into the local normalizers and ship the delta to the learner."""
        d_obs = RunningGaussian(self.obs_rms.mean.shape)
        d_rw = RunningGaussian(())
        if self._pending_obs:
            d_obs.update_batch(np.concatenate(self._pending_obs))
        if self._pending_rw:
            d_rw.update_batch(np.concatenate(self._pending_rw))
        self._pending_obs.clear()
        self._pending_rw.clear()
        self.obs_rms.merge(d_obs)
        self.rw_rms.merge(d_rw)
        if self.on_stats is not None and (d_obs.count or d_rw.count):
            self.on_stats(d_obs, d_rw)


# ---------------------------------------------------------------- rollout


class Actor:
    """Runs episodes against one environment, asking a worker for every decision."""

    def __init__(self, actor_id: int, env: MultiAgentEnv, seed: int, counters: Counters | None = None):
        self.actor_id = actor_id
        self.env = env
        self.seed = seed
        self.counters = counters or Counters()
        self.episode_index = 0

    def run_episode(self, ask: Callable[[ObsRequest], ActResponse], now: int = 0,
                    stop: threading.Event | None = None) -> EpisodeRecord | None:
        env, spec = self.env, self.env.spec
        k = self.episode_index
        self.episode_index += 1
        res = env.reset(self.seed + k)
        obs, state, avail = [res.obs], [res.state], [res.avail]
        acts, rew, term, intr = [], [], [], []
        last = np.full(spec.n_agents, -1, dtype=np.int64)
        t = 0
        try:
            while True:
                resp = ask(ObsRequest(self.actor_id, res.obs, res.avail, last.copy(), t))
                if t > 0:
                    intr.append(resp.intrinsic)
                if stop is not None and stop.is_set():
                    ask(ObsRequest(self.actor_id, res.obs, res.avail, last.copy(), t, final=True))
                    return None
                a = resp.actions
                res = env.step(a)
                self.counters.add_steps()
                last = np.asarray(a, dtype=np.int64)
                acts.append(last)
                rew.append(res.reward)
                term.append(res.terminated)
                obs.append(res.obs)
                state.append(res.state)
                avail.append(res.avail)
                t += 1
                if res.done:
                    break
            resp = ask(ObsRequest(self.actor_id, res.obs, res.avail, last.copy(), t, final=True))
            intr.append(resp.intrinsic)
        except ContractViolation as exc:
            log.error("actor %d: episode %d aborted: %s", self.actor_id, k, exc)
            return None
        self.counters.add_episode()
        rec = EpisodeRecord.from_steps(f"a{self.actor_id}-e{k}", spec.episode_limit, obs, state, avail, acts, rew,
                                       intr, term, won=bool(env.success()))
        rec.t_gen = now
        return rec


def actor_loop(actor: Actor, ask: Callable[[ObsRequest], ActResponse], close: Callable[[], None],
               sample_queue: queue.Queue, episodes: int | None = None, stop: threading.Event | None = None,
               gate: threading.Event | None = None, step_budget: int | None = None) -> int:
    """Run up to ``episodes`` episodes (forever when None), pushing each to ``sample_queue``.

    ``gate`` (when given) must be set for rollout to proceed; clearing it stalls the actor
    between episodes.  Returns the number of episodes delivered.
    """
    sent = 0
    try:
        while episodes is None or sent < episodes:
            if stop is not None and stop.is_set():
                break
            if step_budget is not None and actor.counters.env_steps >= step_budget:
                break
            if gate is not None:
                while not gate.wait(0.05):
                    if stop is not None and stop.is_set():
                        return sent
            rec = actor.run_episode(ask, stop=stop)
            if rec is None:
                continue
            sample_queue.put(rec)  # blocks when full; the learner drains until every actor is done
            sent += 1
    finally:
        close()
    return sent


def worker_loop(server: Server, pipe: WorkerPipe, mailbox: SnapshotMailbox | None, n_actors: int) -> None:
    """Serve every pending request each cycle until all actor endpoints are closed."""
    open_actors = n_actors
    while open_actors > 0:
        batch = [pipe.requests.get()]
        while True:
            try:
                batch.append(pipe.requests.get_nowait())
            except queue.Empty:
                break
        reqs = []
        for item in batch:
            if isinstance(item, ActorDone):
                open_actors -= 1
                server.hidden.pop(item.actor_id, None)
            else:
                reqs.append(item)
        if mailbox is not None:
            server.refresh(mailbox)
        for resp in server.serve(reqs):
            pipe.responses[resp.actor_id].put(resp)


# ---------------------------------------------------------------- training


@dataclass
class LearnerConfig:
    batch_size: int = 32
    target_sync: int = 200
    publish_every: int = 100
    max_bad_steps: int = 3


class LearnerCore:
    """Replay plus learner plus the per-step bookkeeping shared by both drivers."""

    def __init__(self, learner: Learner, replay: ReplayBuffer, mailbox: SnapshotMailbox,
                 cfg: LearnerConfig = LearnerConfig(), beta_fn: Callable[[int], float] = lambda k: 0.5):
        self.learner = learner
        self.replay = replay
        self.mailbox = mailbox
        self.cfg = cfg
        self.beta_fn = beta_fn
        self.version = 0
        self.bad_streak = 0
        self.delivered: set[str] = set()
        self.duplicates = 0
        self.last_stats: StepStats | None = None
        mailbox.publish(learner.snapshot(self.version))

    @property
    def steps(self) -> int:
        return self.learner.train_steps

    def ingest(self, rec: EpisodeRecord) -> None:
        if rec.episode_id in self.delivered:
            self.duplicates += 1
            log.error("episode %s delivered twice", rec.episode_id)
        self.delivered.add(rec.episode_id)
        self.replay.insert(rec, self.steps)

    def merge_stats(self, d_obs: RunningGaussian, d_rw: RunningGaussian) -> None:
        self.learner.merge_stats(d_obs, d_rw)

    def publish(self) -> None:
        self.version += 1
        self.mailbox.publish(self.learner.snapshot(self.version))

    def train_once(self) -> StepStats | None:
        """One training step if the buffer holds a full batch; None otherwise."""
        batch = self.replay.sample(self.cfg.batch_size, self.steps)
        if batch is None:
            return None
        beta = self.beta_fn(self.steps)
        stats = self.learner.train_step(stack_records(batch.records), batch.is_weights, beta)
        self.last_stats = stats
        if not stats.applied:
            self.bad_streak += 1
            if self.bad_streak >= self.cfg.max_bad_steps:
                raise TrainingAborted(f"{self.bad_streak} consecutive non-finite training steps")
            return stats
        self.bad_streak = 0
        self.replay.update_after_train(batch, stats.td_errors, self.steps)
        if self.steps % self.cfg.target_sync == 0:
            self.learner.sync_target()
        if self.steps % self.cfg.publish_every == 0:
            self.publish()
        return stats


Hook = Callable[[LearnerCore, StepStats | None], bool]
"""Called after every learner iteration; returning True stops the run."""


def run_sync(core: LearnerCore, env: MultiAgentEnv, seed: int, epsilon_fn: Callable[[int], float],
             norm_every: int = 50, train_steps: int | None = None, env_steps: int | None = None,
             hook: Hook | None = None, counters: Counters | None = None) -> Counters:
    """Single-threaded 1x1 loop: collect one episode, then attempt one training step."""
    counters = counters or Counters()
    learner = core.learner
    server = Server(learner.net, learner.ird, core.mailbox.latest(), np.random.default_rng(seed),
                    lambda: epsilon_fn(counters.env_steps), norm_every, on_stats=core.merge_stats)
    actor = Actor(0, env, seed * 100_003 + 1, counters)
    ask = lambda req: server.serve([req])[0]  # noqa: E731
    while True:
        if train_steps is not None and core.steps >= train_steps:
            break
        if env_steps is not None and counters.env_steps >= env_steps:
            break
        server.refresh(core.mailbox)
        rec = actor.run_episode(ask, now=core.steps)
        if rec is not None:
            core.ingest(rec)
        stats = core.train_once()
        if hook is not None and hook(core, stats):
            break
    return counters


@dataclass
class Rollout:
    """Handles to a running set of worker and actor threads."""

    threads: list[threading.Thread]
    servers: list[Server]
    sample_queue: queue.Queue
    stats_queue: queue.Queue
    stop: threading.Event
    gate: threading.Event
    counters: Counters
    n_actors: int
    errors: list[BaseException] = field(default_factory=list)

    def join(self, timeout: float | None = None) -> None:
        for t in self.threads:
            t.join(timeout)


def start_rollout(make_env: Callable[[], MultiAgentEnv], net: ActionNet, ird: IRDNet, mailbox: SnapshotMailbox,
                  workers: int, actors_per_worker: int, seed: int, epsilon_fn: Callable[[int], float],
                  queue_bound: int = 64, norm_every: int = 50, episodes_per_actor: int | None = None,
                  env_steps: int | None = None, follow_snapshots: bool = True,
                  counters: Counters | None = None) -> Rollout:
    """Spawn ``workers`` serving threads, each with ``actors_per_worker`` actor threads."""
    sample_queue: queue.Queue = queue.Queue(maxsize=queue_bound)
    stats_queue: queue.Queue = queue.Queue()
    stop, gate = threading.Event(), threading.Event()
    gate.set()
    counters = counters or Counters()
    roll = Rollout([], [], sample_queue, stats_queue, stop, gate, counters, workers * actors_per_worker)
    seeds = np.random.SeedSequence(seed).spawn(workers)

    def guarded(fn, *args):
        def run():
            try:
                fn(*args)
            except BaseException as exc:  # surfaced to the driver
                log.exception("runtime thread failed")
                roll.errors.append(exc)
                stop.set()
        return run

    for w in range(workers):
        ids = [w * actors_per_worker + i for i in range(actors_per_worker)]
        pipe = WorkerPipe(ids)
        server = Server(net, ird, mailbox.latest(), np.random.default_rng(seeds[w]),
                        lambda: epsilon_fn(counters.env_steps), norm_every,
                        on_stats=lambda a, b: stats_queue.put((a, b)))
        roll.servers.append(server)
        roll.threads.append(threading.Thread(
            target=guarded(worker_loop, server, pipe, mailbox if follow_snapshots else None, len(ids)),
            name=f"worker-{w}", daemon=True))
        for a in ids:
            actor = Actor(a, make_env(), seed * 100_003 + a * 1_000_003 + 1, counters)
            roll.threads.append(threading.Thread(
                target=guarded(actor_loop, actor, pipe.asker(a), lambda a=a, p=pipe: (p.close(a), sample_queue.put(ActorDone(a))),
                               sample_queue, episodes_per_actor, stop, gate, env_steps),
                name=f"actor-{a}", daemon=True))
    for t in roll.threads:
        t.start()
    return roll


def learner_loop(core: LearnerCore, roll: Rollout, train_steps: int | None = None, hook: Hook | None = None,
                 idle_wait: float = 0.05) -> None:
    """Drain episodes into replay and train until the budget is met or rollout has ended and drained."""
    done_actors = 0
    stopping = False
    try:
        while True:
            while True:
                try:
                    d_obs, d_rw = roll.stats_queue.get_nowait()
                except queue.Empty:
                    break
                core.merge_stats(d_obs, d_rw)
            drained = 0
            while True:
                try:
                    item = roll.sample_queue.get_nowait()
                except queue.Empty:
                    break
                if isinstance(item, ActorDone):
                    done_actors += 1
                else:
                    core.ingest(item)
                    drained += 1
            if roll.errors:
                raise roll.errors[0]
            if done_actors >= roll.n_actors:
                if roll.sample_queue.empty():
                    break
                continue
            if stopping:
                time.sleep(idle_wait / 10)
                continue
            budget_hit = train_steps is not None and core.steps >= train_steps
            stats = None if budget_hit else core.train_once()
            stop = hook(core, stats) if hook is not None else False
            if budget_hit or stop:
                stopping = True
                roll.stop.set()
                roll.gate.set()
                continue
            if stats is None and drained == 0:
                try:
                    item = roll.sample_queue.get(timeout=idle_wait)
                except queue.Empty:
                    continue
                if isinstance(item, ActorDone):
                    done_actors += 1
                else:
                    core.ingest(item)
    finally:
        roll.stop.set()
        roll.gate.set()
        # unblock any actor waiting on a full queue
        while done_actors < roll.n_actors and not roll.errors:
            try:
                item = roll.sample_queue.get(timeout=1.0)
            except queue.Empty:
                if not any(t.is_alive() for t in roll.threads):
                    break
                continue
            if isinstance(item, ActorDone):
                done_actors += 1
        roll.join(timeout=5.0)


# ---------------------------------------------------------------- bench


def throughput_bench(make_env: Callable[[], MultiAgentEnv], learner: Learner, workers: int, actors_per_worker: int,
                     duration: float = 5.0, train: bool = False, seed: int = 0, epsilon: float = 1.0,
                     replay: ReplayBuffer | None = None, batch_size: int = 32) -> dict:
    """Episodes/sec, env steps/sec and train steps/sec for one fan-out.

    Without ``train`` the snapshot is frozen and nobody trains (pure rollout).
    """
    mailbox = SnapshotMailbox()
    core = LearnerCore(learner, replay or ReplayBuffer(capacity=5000, rng=np.random.default_rng(seed)), mailbox,
                       LearnerConfig(batch_size=batch_size))
    roll = start_rollout(make_env, learner.net, learner.ird, mailbox, workers, actors_per_worker, seed,
                         lambda _: epsilon, follow_snapshots=train)
    start_steps = learner.train_steps
    t0 = time.perf_counter()
    deadline = t0 + duration

    def hook(c: LearnerCore, stats) -> bool:
        return time.perf_counter() >= deadline

    if train:
        learner_loop(core, roll, hook=hook)
    else:
        done = 0
        while time.perf_counter() < deadline and done < roll.n_actors:
            try:
                item = roll.sample_queue.get(timeout=0.05)
            except queue.Empty:
                continue
            if isinstance(item, ActorDone):
                done += 1
        roll.stop.set()
        while done < roll.n_actors:
            try:
                item = roll.sample_queue.get(timeout=1.0)
            except queue.Empty:
                if not any(t.is_alive() for t in roll.threads):
                    break
                continue
            if isinstance(item, ActorDone):
                done += 1
        roll.join(timeout=5.0)
    elapsed = time.perf_counter() - t0
    return {
        "workers": workers,
        "actors_per_worker": actors_per_worker,
        "train": train,
        "seconds": elapsed,
        "episodes_per_sec": roll.counters.episodes / elapsed,
        "steps_per_sec": roll.counters.env_steps / elapsed,
        "train_steps_per_sec": (learner.train_steps - start_steps) / elapsed,
    }


def bench_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2)
