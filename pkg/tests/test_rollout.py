from collections import Counter

import numpy as np
import pytest

from marlab import envs, nets, rollout
from marlab.rollout import (
    AgentActor,
    EpsilonSchedule,
    ReplayBuffer,
    WorkerPool,
    batch_episodes,
    epsilon_at,
    run_episode,
    select_actions,
)


def matrix_env():
    return envs.MatrixGame(envs.MatrixGameSpec(envs.TABLE1_PAYOFF))


def pp_env(**kw):
    kw.setdefault("width", 5)
    kw.setdefault("height", 5)
    kw.setdefault("n_predators", 3)
    kw.setdefault("n_prey", 1)
    kw.setdefault("episode_limit", 25)
    return envs.PredatorPrey(envs.PredatorPreySpec(**kw))


def make_actor(env, seed=0, hidden=16):
    net = nets.AgentNet(
        env.obs_dim, env.n_actions, env.n_agents, hidden=hidden,
        rng=np.random.default_rng(seed),
    )
    return AgentActor(net, net.params)


# ---------------------------------------------------------------- epsilon


def test_epsilon_schedule_values():
    sch = EpsilonSchedule(1.0, 0.05, 100_000)
    assert epsilon_at(sch, 0) == 1.0
    assert abs(epsilon_at(sch, 50_000) - 0.525) < 1e-12
    assert abs(epsilon_at(sch, 100_000) - 0.05) < 1e-12
    assert abs(epsilon_at(sch, 10**9) - 0.05) < 1e-12


def test_epsilon_schedule_monotone():
    sch = EpsilonSchedule()
    vals = [epsilon_at(sch, t) for t in range(0, 60_000, 1000)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_epsilon_schedule_validation():
    with pytest.raises(ValueError):
        EpsilonSchedule(anneal_steps=0)
    with pytest.raises(ValueError):
        EpsilonSchedule(start=0.05, finish=1.0)


# ---------------------------------------------------------------- actions


def test_select_actions_greedy_and_ties():
    rng = np.random.default_rng(0)
    q = np.array([[1.0, 1.0, 0.0], [0.0, 0.2, 5.0]])
    acts = select_actions(q, 0.0, "greedy", rng)
    np.testing.assert_array_equal(acts, [0, 2])  # tie -> lowest index


def test_select_actions_full_epsilon_uniform():
    rng = np.random.default_rng(1)
    q = np.array([[9.0, 0.0, 0.0]])
    n_draws = 10_000
    counts = Counter(
        int(select_actions(q, 1.0, "greedy", rng)[0]) for _ in range(n_draws)
    )
    p = 1 / 3
    sigma = np.sqrt(n_draws * p * (1 - p))
    for a in range(3):
        assert abs(counts[a] - n_draws * p) < 3 * sigma


def test_select_actions_sample_mode():
    rng = np.random.default_rng(2)
    pol = np.array([[0.0, 1.0, 0.0], [0.5, 0.5, 0.0]])
    acts = [select_actions(pol, 0.0, "sample", rng) for _ in range(200)]
    acts = np.array(acts)
    assert (acts[:, 0] == 1).all()
    assert set(acts[:, 1]) == {0, 1}


def test_select_actions_unknown_mode():
    with pytest.raises(ValueError):
        select_actions(np.zeros((1, 2)), 0.0, "softmax", np.random.default_rng(0))


# --------------------------------------------------------------- episodes


def test_matrix_episode_length_one():
    env = matrix_env()
    ep = run_episode(make_actor(env), env, np.random.default_rng(0), epsilon=0.5)
    assert ep.length == 1
    assert ep.obs.shape == (2, 2, 2)
    assert ep.terminated[0] == 1.0
    assert not ep.truncated


def test_pp_all_stay_truncates_with_zero_return():
    env = pp_env(episode_limit=10)

    class StayActor(AgentActor):
        def act(self, obs, last, hidden):
            out = np.zeros((obs.shape[0], obs.shape[1], 6))
            out[:, :, envs.STAY] = 1.0
            return out, hidden

    actor = StayActor(make_actor(env).net, make_actor(env).net.params)
    ep = run_episode(actor, env, np.random.default_rng(0))
    assert ep.truncated and ep.length == 10 and ep.ret == 0.0
    assert ep.terminated.sum() == 0.0


def test_run_episode_deterministic():
    def roll():
        env = pp_env()
        return run_episode(
            make_actor(env, seed=3), env, np.random.default_rng(7), epsilon=0.3
        )

    e1, e2 = roll(), roll()
    assert e1.key() == e2.key()


def test_run_episode_env_fault_context():
    env = matrix_env()
    actor = make_actor(env)
    env.reset(np.random.default_rng(0))
    env.step((0, 0))  # exhaust the episode so reset-less stepping would fail

    class Broken:
        n_agents, n_actions, obs_dim = 2, 3, 2

        def reset(self, rng):
            raise ValueError("boom")

    with pytest.raises(RuntimeError, match="reset failed"):
        run_episode(actor, Broken(), np.random.default_rng(0))


def test_episode_stores_final_obs_and_state():
    env = pp_env(episode_limit=5)
    ep = run_episode(make_actor(env), env, np.random.default_rng(1), epsilon=1.0)
    assert ep.obs.shape[0] == ep.length + 1
    assert ep.state.shape[0] == ep.length + 1


# ---------------------------------------------------------------- workers


def test_worker_pool_multiset_matches_serial():
    seed = 12
    actor = make_actor(pp_env(), seed=4)
    pool = WorkerPool(pp_env, 4, seed)
    pooled = pool.collect(actor, epsilon=0.4)
    serial = [
        run_episode(
            actor, pp_env(), np.random.default_rng(seed * 10007 + w), epsilon=0.4
        )
        for w in range(4)
    ]
    assert Counter(e.key() for e in pooled) == Counter(e.key() for e in serial)


def test_worker_pool_step_accounting():
    actor = make_actor(pp_env(), seed=4)
    pool = WorkerPool(pp_env, 3, seed=5)
    eps = pool.collect(actor, epsilon=1.0)
    assert len(eps) == 3
    assert sum(e.length for e in eps) == sum(len(e.reward) for e in eps)


def test_worker_pool_validation():
    with pytest.raises(ValueError):
        WorkerPool(pp_env, 0, seed=1)


# ---------------------------------------------------------------- buffers


def _dummy_episode(tag, length):
    rng = np.random.default_rng(tag)
    term = np.zeros(length)
    term[-1] = 1.0
    return rollout.Episode(
        obs=rng.normal(size=(length + 1, 2, 3)),
        state=rng.normal(size=(length + 1, 4)),
        actions=rng.integers(0, 3, size=(length, 2)),
        reward=rng.normal(size=length),
        terminated=term,
        truncated=False,
    )


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(capacity=2)
    e1, e2, e3 = (_dummy_episode(i, 3) for i in range(3))
    buf.extend([e1, e2, e3])
    assert len(buf) == 2 and buf.inserted == 3
    keys = {e.key() for e in buf.episodes()}
    assert keys == {e2.key(), e3.key()}


def test_buffer_sample_whole_is_permutation():
    buf = ReplayBuffer(capacity=10)
    eps = [_dummy_episode(i, 2 + i % 3) for i in range(5)]
    buf.extend(eps)
    batch = buf.sample(5, np.random.default_rng(0))
    assert batch.batch_size == 5
    assert sorted(batch.mask.sum(axis=1)) == sorted(e.length for e in eps)


def test_buffer_underfull_raises():
    buf = ReplayBuffer(capacity=10)
    buf.insert(_dummy_episode(0, 2))
    with pytest.raises(ValueError):
        buf.sample(2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        buf.latest(2)


def test_buffer_latest_returns_most_recent():
    buf = rollout.make_online_buffer(3)
    eps = [_dummy_episode(i, 2) for i in range(5)]
    buf.extend(eps)
    batch = buf.latest(2)
    np.testing.assert_array_equal(batch.reward[-1], eps[-1].reward)
    np.testing.assert_array_equal(batch.reward[0], eps[-2].reward)


def test_batch_padding_and_mask():
    eps = [_dummy_episode(0, 2), _dummy_episode(1, 5)]
    batch = batch_episodes(eps)
    assert batch.t_max == 5
    np.testing.assert_array_equal(batch.mask.sum(axis=1), [2.0, 5.0])
    # everything past each episode's length is exactly zero
    assert np.all(batch.obs[0, 3:] == 0.0)
    assert np.all(batch.state[0, 3:] == 0.0)
    assert np.all(batch.reward[0, 2:] == 0.0)
    assert np.all(batch.actions[0, 2:] == 0)
    assert np.all(batch.terminated[0, 2:] == 0.0)
    with pytest.raises(ValueError):
        batch_episodes([])
