import threading
import time

import numpy as np
import pytest
from conftest import random_episode

from vdexplore.envs import make_env
from vdexplore.errors import ContractViolation
from vdexplore.learner import Learner, ModelDims
from vdexplore.replay import ReplayBuffer
from vdexplore.runtime import (Actor, ActorDone, Counters, LearnerConfig, LearnerCore, ObsRequest, Server,
                               SnapshotMailbox, TrainingAborted, WorkerPipe, actor_loop, learner_loop, run_sync,
                               start_rollout, worker_loop)

SMALL = ModelDims(action_hidden=8, ird_hidden=8, ird_out=3, mixer_embed=8, hyper_hidden=8)


def _core(env, seed=0, batch=32, **cfg):
    learner = Learner(env.spec, SMALL, seed=seed)
    return LearnerCore(learner, ReplayBuffer(500, rng=np.random.default_rng(seed)), SnapshotMailbox(),
                       LearnerConfig(batch_size=batch, **cfg))


def _server(learner, snap, eps=0.0, seed=0):
    return Server(learner.net, learner.ird, snap, np.random.default_rng(seed), lambda: eps)


# ---------------------------------------------------------------- mailbox and serving


def test_mailbox_versions_must_advance():
    env = make_env("cooperative_matrix")
    learner = Learner(env.spec, SMALL)
    box = SnapshotMailbox()
    assert box.latest() is None and box.version == -1
    box.publish(learner.snapshot(0))
    box.publish(learner.snapshot(3))
    assert box.version == 3
    with pytest.raises(ContractViolation):
        box.publish(learner.snapshot(3))


def test_served_actions_respect_masks():
    env = make_env("skirmish")
    learner = Learner(env.spec, SMALL)
    server = _server(learner, learner.snapshot(0), eps=0.3)
    rng = np.random.default_rng(1)
    res = env.reset(0)
    for step in range(300):
        avail = rng.random(res.avail.shape) < 0.4
        avail[np.arange(env.n_agents), rng.integers(env.n_actions, size=env.n_agents)] = True
        req = ObsRequest(0, res.obs, avail, np.zeros(env.n_agents, int), step)
        (resp,) = server.serve([req])
        assert resp.actor_id == 0 and resp.step == step
        assert avail[np.arange(env.n_agents), resp.actions].all()
        assert resp.intrinsic.shape == (env.n_agents,)
        if step == 0:
            assert not resp.intrinsic.any()


def test_final_request_returns_novelty_only():
    env = make_env("sparse_corridor")
    learner = Learner(env.spec, SMALL)
    server = _server(learner, learner.snapshot(0))
    res = env.reset(0)
    server.serve([ObsRequest(5, res.obs, res.avail, np.full(2, -1), 0)])
    assert 5 in server.hidden
    (resp,) = server.serve([ObsRequest(5, res.obs, res.avail, np.zeros(2, int), 1, final=True)])
    assert resp.actions is None and resp.intrinsic.shape == (2,)
    assert 5 not in server.hidden


def test_normaliser_deltas_flushed_on_cadence():
    env = make_env("cooperative_matrix")
    learner = Learner(env.spec, SMALL)
    shipped = []
    server = Server(learner.net, learner.ird, learner.snapshot(0), np.random.default_rng(0), lambda: 0.0,
                    norm_every=5, on_stats=lambda a, b: shipped.append((a, b)))
    res = env.reset(0)
    for k in range(12):
        server.serve([ObsRequest(0, res.obs, res.avail, np.zeros(2, int), k)])
    assert len(shipped) == 2
    assert sum(d.count for d, _ in shipped) == 10 * env.n_agents
    assert sum(r.count for _, r in shipped) == 9 * env.n_agents  # step 0 carries no novelty


def test_snapshot_flip_changes_greedy_action():
    env = make_env("cooperative_matrix")
    learner = Learner(env.spec, SMALL)
    box = SnapshotMailbox()
    v0 = learner.snapshot(0)
    v0.action_net["fc2/b"] = np.array([50.0, 0.0, 0.0])
    box.publish(v0)
    pipe = WorkerPipe([0])
    server = _server(learner, v0)
    worker = threading.Thread(target=worker_loop, args=(server, pipe, box, 1), daemon=True)
    worker.start()
    ask = pipe.asker(0)
    res = env.reset(0)
    first = ask(ObsRequest(0, res.obs, res.avail, np.full(2, -1), 0))
    assert first.actions.tolist() == [0, 0]
    v1 = learner.snapshot(1)
    v1.action_net["fc2/b"] = np.array([0.0, 0.0, 50.0])  # sentinel change
    box.publish(v1)
    second = ask(ObsRequest(0, res.obs, res.avail, np.full(2, -1), 0))
    assert second.actions.tolist() == [2, 2]
    pipe.close(0)
    worker.join(2.0)
    assert not worker.is_alive()
    assert server.versions_seen == [0, 1]


# ---------------------------------------------------------------- rollout


def test_zero_episodes_shuts_down_cleanly():
    env = make_env("cooperative_matrix")
    learner = Learner(env.spec, SMALL)
    box = SnapshotMailbox()
    box.publish(learner.snapshot(0))
    roll = start_rollout(lambda: make_env("cooperative_matrix"), learner.net, learner.ird, box, 1, 2, 0,
                         lambda _: 1.0, episodes_per_actor=0)
    roll.join(2.0)
    assert not any(t.is_alive() for t in roll.threads)
    items = [roll.sample_queue.get_nowait() for _ in range(roll.sample_queue.qsize())]
    assert all(isinstance(x, ActorDone) for x in items) and len(items) == 2


def test_actor_runs_are_deterministic_with_fixed_snapshot():
    env = make_env("sparse_corridor", length=5, episode_limit=8)
    learner = Learner(env.spec, SMALL, seed=4)
    snap = learner.snapshot(0)

    def run():
        server = _server(learner, snap, eps=0.0)
        actor = Actor(0, make_env("sparse_corridor", length=5, episode_limit=8), seed=11)
        return [actor.run_episode(lambda r: server.serve([r])[0]) for _ in range(3)]

    for a, b in zip(run(), run()):
        assert a.episode_id == b.episode_id
        for key in ("obs", "state", "actions", "reward", "intrinsic", "filled"):
            np.testing.assert_array_equal(getattr(a, key), getattr(b, key))


def test_actor_episode_record_layout():
    env = make_env("sparse_corridor", length=4, episode_limit=6)
    learner = Learner(env.spec, SMALL)
    server = _server(learner, learner.snapshot(0), eps=1.0)
    counters = Counters()
    actor = Actor(3, env, seed=0, counters=counters)
    rec = actor.run_episode(lambda r: server.serve([r])[0])
    assert rec.episode_id == "a3-e0" and counters.episodes == 1 and counters.env_steps == rec.length
    assert rec.filled.sum() == rec.length and rec.intrinsic.shape == (6, 2)
    # last-action block of each next observation matches the stored joint action
    A, n = env.n_actions, env.n_agents
    for t in range(rec.length):
        onehot = rec.obs[t + 1][:, -n - A:-n]
        np.testing.assert_array_equal(onehot.argmax(axis=1), rec.actions[t])


def test_four_actors_ten_episodes_each_exactly_once():
    env = make_env("cooperative_matrix")
    core = _core(env, batch=8, publish_every=5)
    roll = start_rollout(lambda: make_env("cooperative_matrix"), core.learner.net, core.learner.ird, core.mailbox,
                         1, 4, 0, lambda _: 1.0, episodes_per_actor=10)
    learner_loop(core, roll)
    assert len(core.delivered) == 40 and core.duplicates == 0 and core.replay.inserted == 40
    assert roll.counters.episodes == 40
    assert not any(t.is_alive() for t in roll.threads)
    assert {f"a{a}-e{k}" for a in range(4) for k in range(10)} == core.delivered


def test_served_versions_are_monotone_and_never_ahead():
    env = make_env("cooperative_matrix")
    core = _core(env, batch=4, publish_every=2)
    roll = start_rollout(lambda: make_env("cooperative_matrix"), core.learner.net, core.learner.ird, core.mailbox,
                         2, 2, 1, lambda _: 1.0, episodes_per_actor=60)
    learner_loop(core, roll)
    assert core.version > 3
    for server in roll.servers:
        seen = server.versions_seen
        assert seen == sorted(seen) and len(set(seen)) == len(seen)
        assert seen[-1] <= core.version


def test_learner_stops_on_train_budget_with_endless_actors():
    env = make_env("cooperative_matrix")
    core = _core(env, batch=4)
    roll = start_rollout(lambda: make_env("cooperative_matrix"), core.learner.net, core.learner.ird, core.mailbox,
                         2, 3, 2, lambda _: 1.0, queue_bound=4)
    learner_loop(core, roll, train_steps=25)
    assert core.steps == 25
    assert not any(t.is_alive() for t in roll.threads)
    assert core.duplicates == 0


def test_training_continues_while_rollout_is_stalled():
    env = make_env("cooperative_matrix")
    core = _core(env, batch=4)
    roll = start_rollout(lambda: make_env("cooperative_matrix"), core.learner.net, core.learner.ird, core.mailbox,
                         1, 2, 3, lambda _: 1.0)
    marks = {}

    def hook(c, stats):
        if "stall" not in marks and len(c.replay) >= 8:
            roll.gate.clear()
            marks["stall"] = (time.perf_counter(), c.steps, roll.counters.env_steps)
        if "stall" in marks and time.perf_counter() - marks["stall"][0] >= 0.5:
            marks["end"] = (c.steps, roll.counters.env_steps)
            return True
        return False

    learner_loop(core, roll, hook=hook)
    _, s0, e0 = marks["stall"]
    s1, e1 = marks["end"]
    assert s1 > s0
    assert e1 - e0 <= 2  # at most the episodes already in flight finish (one step each)
    assert not any(t.is_alive() for t in roll.threads)


def test_actor_loop_respects_step_budget_and_closes():
    env = make_env("cooperative_matrix")
    learner = Learner(env.spec, SMALL)
    server = _server(learner, learner.snapshot(0), eps=1.0)
    import queue
    q = queue.Queue()
    closed = []
    counters = Counters()
    actor = Actor(0, env, 0, counters)
    sent = actor_loop(actor, lambda r: server.serve([r])[0], lambda: closed.append(1), q, step_budget=7)
    assert sent == 7 and counters.env_steps == 7 and closed == [1]


# ---------------------------------------------------------------- learner bookkeeping


def test_learner_waits_for_a_full_batch():
    env = make_env("cooperative_matrix")
    core = _core(env)
    trace = []
    run_sync(core, env, 0, lambda n: 1.0, env_steps=33, hook=lambda c, s: trace.append((len(c.replay), c.steps)))
    assert trace[:31] == [(k, 0) for k in range(1, 32)]
    assert trace[31:] == [(32, 1), (33, 2)]


def test_budget_counts_optimizer_steps_and_target_syncs():
    env = make_env("cooperative_matrix")
    core = _core(env)
    run_sync(core, env, 0, lambda n: 1.0, train_steps=100)
    assert core.steps == 100 and core.learner.params.step == 100
    assert core.learner.target_syncs == 0
    assert core.version == 1  # published at steps 0 and 100
    core2 = _core(env, target_sync=40)
    run_sync(core2, env, 0, lambda n: 1.0, train_steps=100)
    assert core2.learner.target_syncs == 2


def test_non_finite_steps_are_skipped_then_abort():
    env = make_env("cooperative_matrix")
    core = _core(env, batch=2)
    for k in range(4):
        rec = random_episode(env, k, f"e{k}")
        rec.reward[:] = np.nan
        core.ingest(rec)
    before = core.learner.params.flat().copy()
    assert not core.train_once().applied
    assert not core.train_once().applied
    np.testing.assert_array_equal(core.learner.params.flat(), before)
    assert core.steps == 0
    with pytest.raises(TrainingAborted):
        core.train_once()


def test_duplicate_delivery_is_detected():
    env = make_env("cooperative_matrix")
    core = _core(env)
    rec = random_episode(env, 0, "x")
    core.ingest(rec)
    core.ingest(random_episode(env, 0, "x"))
    assert core.duplicates == 1
