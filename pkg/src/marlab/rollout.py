"""Episode generation, epsilon-greedy action selection, and replay buffers.

Rollout workers hold independent RNG streams (seed * 10007 + worker_id) and
step their environments in lockstep so the agent network forward covers all
workers in one batched call. Episodes land in FIFO replay buffers; batches
are padded to the longest episode with an explicit filled mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import autodiff as ad
from . import nets


# --------------------------------------------------------------- epsilon


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    finish: float = 0.05
    anneal_steps: int = 50_000

    def __post_init__(self):
        if self.anneal_steps < 1:
            raise ValueError("anneal_steps must be >= 1")
        if self.finish > self.start:
            raise ValueError("epsilon schedule must be non-increasing")


def epsilon_at(schedule: EpsilonSchedule, env_steps: int) -> float:
    frac = min(max(env_steps, 0) / schedule.anneal_steps, 1.0)
    return schedule.start + (schedule.finish - schedule.start) * frac


# --------------------------------------------------------------- actions


def select_actions(q_or_policy, epsilon, mode, rng):
    """Joint action (n_agents,) from per-agent values or distributions.

    greedy: per agent, uniform random with prob epsilon, else argmax with
    ties to the lowest index. sample: categorical draw per agent (epsilon
    ignored; pass mode="greedy" with epsilon=0 for test-time argmax).
    """
    x = np.asarray(q_or_policy, dtype=np.float64)
    n, a = x.shape
    if mode == "greedy":
        acts = np.argmax(x, axis=1)
        explore = rng.random(n) < epsilon
        if explore.any():
            acts = np.where(explore, rng.integers(0, a, size=n), acts)
        return acts.astype(np.int64)
    if mode == "sample":
        cdf = np.cumsum(x, axis=1)
        u = rng.random((n, 1)) * cdf[:, -1:]
        return (u > cdf[:, :-1]).sum(axis=1).astype(np.int64)
    raise ValueError(f"unknown selection mode {mode!r}")


# ---------------------------------------------------------------- actors


class AgentActor:
    """Numeric (tapeless) rollout wrapper around an AgentNet snapshot.

    Batches the per-step forward over B parallel environments x n agents.
    """

    def __init__(self, net: nets.AgentNet, params: dict):
        self.net = net
        self.p = {k: ad.Tensor(np.asarray(v)) for k, v in params.items()}

    def init_state(self, batch_envs: int):
        return np.zeros((batch_envs * self.net.n_agents, self.net.hidden))

    def act(self, obs, last_actions, hidden):
        """obs (B, n, obs_dim), last_actions (B, n) int or None, hidden
        (B*n, H) -> (out (B, n, out_dim), hidden')."""
        b, n, _ = obs.shape
        a = self.net.n_actions
        last = np.zeros((b, n, a))
        if last_actions is not None:
            last = np.eye(a)[np.asarray(last_actions, dtype=np.int64)]
        ids = np.broadcast_to(np.eye(n), (b, n, n))
        x = np.concatenate([obs, last, ids], axis=-1).reshape(b * n, -1)
        out, h = self.net.step(self.p, ad.Tensor(x), ad.Tensor(hidden))
        return out.data.reshape(b, n, self.net.out_dim), h.data


# -------------------------------------------------------------- episodes


@dataclass
class Episode:
    """One finished episode; obs/state carry the extra final step."""

    obs: np.ndarray  # (T+1, n, obs_dim)
    state: np.ndarray  # (T+1, state_dim)
    actions: np.ndarray  # (T, n) int64
    reward: np.ndarray  # (T,)
    terminated: np.ndarray  # (T,) float, 1 at a true terminal step
    truncated: bool

    @property
    def length(self) -> int:
        return self.reward.shape[0]

    @property
    def ret(self) -> float:
        return float(self.reward.sum())

    def key(self):
        """Hashable content key (used to compare episode multisets)."""
        return (
            self.obs.tobytes(),
            self.state.tobytes(),
            self.actions.tobytes(),
            self.reward.tobytes(),
            self.terminated.tobytes(),
            self.truncated,
        )


@dataclass
class EpisodeBatch:
    obs: np.ndarray  # (B, T+1, n, obs_dim)
    state: np.ndarray  # (B, T+1, state_dim)
    actions: np.ndarray  # (B, T, n)
    reward: np.ndarray  # (B, T)
    terminated: np.ndarray  # (B, T)
    mask: np.ndarray  # (B, T) 1 on real transitions

    @property
    def batch_size(self):
        return self.reward.shape[0]

    @property
    def t_max(self):
        return self.reward.shape[1]


def batch_episodes(episodes: List[Episode]) -> EpisodeBatch:
    if not episodes:
        raise ValueError("cannot batch zero episodes")
    b = len(episodes)
    t_max = max(e.length for e in episodes)
    n, obs_dim = episodes[0].obs.shape[1:]
    state_dim = episodes[0].state.shape[1]
    out = EpisodeBatch(
        obs=np.zeros((b, t_max + 1, n, obs_dim)),
        state=np.zeros((b, t_max + 1, state_dim)),
        actions=np.zeros((b, t_max, n), dtype=np.int64),
        reward=np.zeros((b, t_max)),
        terminated=np.zeros((b, t_max)),
        mask=np.zeros((b, t_max)),
    )
    for i, e in enumerate(episodes):
        t = e.length
        out.obs[i, : t + 1] = e.obs
        out.state[i, : t + 1] = e.state
        out.actions[i, :t] = e.actions
        out.reward[i, :t] = e.reward
        out.terminated[i, :t] = e.terminated
        out.mask[i, :t] = 1.0
    return out


def run_episode(actor: AgentActor, env, rng, epsilon=0.0, mode="greedy",
                test_mode=False) -> Episode:
    """Roll one full episode; hidden state threads internally."""
    return _run_lockstep(actor, [env], [rng], epsilon, mode, test_mode)[0]


def _run_lockstep(actor, envs, rngs, epsilon, mode, test_mode):
    if test_mode:
        epsilon, mode = 0.0, "greedy"
    w = len(envs)
    obs_s, state_s = [], []
    for env, rng in zip(envs, rngs):
        try:
            o, s = env.reset(rng)
        except Exception as e:
            raise RuntimeError(f"{type(env).__name__}.reset failed") from e
        obs_s.append([o])
        state_s.append([s])
    act_s = [[] for _ in range(w)]
    rew_s = [[] for _ in range(w)]
    term_s = [[] for _ in range(w)]
    trunc = [False] * w
    active = list(range(w))
    hidden = actor.init_state(w)
    n = actor.net.n_agents
    last_actions = None
    t = 0
    while active:
        obs_now = np.stack([obs_s[i][-1] for i in active])
        rows = np.concatenate([np.arange(i * n, (i + 1) * n) for i in active])
        last = None if last_actions is None else last_actions[active]
        out, h_new = actor.act(obs_now, last, hidden[rows])
        hidden[rows] = h_new
        still = []
        new_last = np.zeros((w, n), dtype=np.int64) if last_actions is None else last_actions
        for k, i in enumerate(active):
            acts = select_actions(out[k], epsilon, mode, rngs[i])
            try:
                res = envs[i].step(acts)
            except (RuntimeError, ValueError) as e:
                raise RuntimeError(
                    f"{type(envs[i]).__name__}.step failed at t={t} (worker {i})"
                ) from e
            act_s[i].append(acts)
            rew_s[i].append(res.reward)
            term_s[i].append(1.0 if res.terminated else 0.0)
            obs_s[i].append(res.obs)
            state_s[i].append(res.state)
            new_last[i] = acts
            if res.terminated or res.truncated:
                trunc[i] = res.truncated
            else:
                still.append(i)
        last_actions = new_last
        active = still
        t += 1
    return [
        Episode(
            obs=np.stack(obs_s[i]),
            state=np.stack(state_s[i]),
            actions=np.stack(act_s[i]).astype(np.int64),
            reward=np.array(rew_s[i], dtype=np.float64),
            terminated=np.array(term_s[i], dtype=np.float64),
            truncated=trunc[i],
        )
        for i in range(w)
    ]


class WorkerPool:
    """n_workers lockstep rollout workers with independent RNG streams.

    Worker w draws from default_rng(seed * 10007 + w); the episode multiset
    is a function of the seeds only, never of scheduling.
    """

    def __init__(self, env_fn: Callable[[], object], n_workers: int, seed: int):
        if n_workers < 1:
            raise ValueError("need at least one worker")
        self.envs = [env_fn() for _ in range(n_workers)]
        self.rngs = [
            np.random.default_rng(seed * 10007 + w) for w in range(n_workers)
        ]
        self.n_workers = n_workers

    def collect(self, actor: AgentActor, epsilon=0.0, mode="greedy",
                test_mode=False) -> List[Episode]:
        """One episode per worker, stepped in lockstep."""
        return _run_lockstep(actor, self.envs, self.rngs, epsilon, mode, test_mode)


# ---------------------------------------------------------------- buffers


class ReplayBuffer:
    """FIFO episode buffer with uniform without-replacement sampling."""

    def __init__(self, capacity: int = 5000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._episodes: List[Episode] = []
        self.inserted = 0

    def __len__(self):
        return len(self._episodes)

    def insert(self, episode: Episode):
        self._episodes.append(episode)
        self.inserted += 1
        if len(self._episodes) > self.capacity:
            del self._episodes[0]

    def extend(self, episodes):
        for e in episodes:
            self.insert(e)

    def episodes(self):
        return list(self._episodes)

    def sample(self, b: int, rng) -> EpisodeBatch:
        if b > len(self._episodes):
            raise ValueError(f"buffer holds {len(self._episodes)} episodes, need {b}")
        idx = rng.choice(len(self._episodes), size=b, replace=False)
        return batch_episodes([self._episodes[i] for i in idx])

    def latest(self, b: int) -> EpisodeBatch:
        """The b most recent episodes (the on-policy buffer D')."""
        if b > len(self._episodes):
            raise ValueError(f"buffer holds {len(self._episodes)} episodes, need {b}")
        return batch_episodes(self._episodes[-b:])


def make_online_buffer(batch: int = 32) -> ReplayBuffer:
    """RIIT's online memory D': holds just the last `batch` episodes."""
    return ReplayBuffer(capacity=batch)
