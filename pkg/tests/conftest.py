import numpy as np
import pytest

from vdexplore.replay import EpisodeRecord, stack_records


def random_episode(env, seed: int, episode_id: str = "e", rng=None) -> EpisodeRecord:
    """Roll one episode with uniformly random legal actions and random novelty values."""
    rng = rng or np.random.default_rng(seed)
    res = env.reset(seed)
    obs, state, avail = [res.obs], [res.state], [res.avail]
    acts, rew, term = [], [], []
    while not res.done:
        a = [int(rng.choice(np.flatnonzero(res.avail[i]))) for i in range(env.n_agents)]
        res = env.step(a)
        acts.append(a)
        rew.append(res.reward)
        term.append(res.terminated)
        obs.append(res.obs)
        state.append(res.state)
        avail.append(res.avail)
    intr = rng.normal(size=(len(acts), env.n_agents))
    return EpisodeRecord.from_steps(episode_id, env.episode_limit, obs, state, avail, acts, rew, intr, term,
                                    won=env.success())


def random_batch(env, n: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    return stack_records([random_episode(env, seed * 1000 + k, f"e{k}", rng) for k in range(n)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
