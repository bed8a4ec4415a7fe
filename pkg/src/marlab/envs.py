"""Desk-scale benchmark environments.

Two environments with a shared episode API:

* ``MatrixGame`` — a one-shot 2-player cooperative matrix game defined by a
  payoff table; observations are agent one-hots and the global state is the
  constant ``[0]``.
* ``PredatorPrey`` — a discrete difficulty-enhanced predator-prey grid
  world: predators move on a W×H grid and must have at least two adjacent
  predators choose ``catch`` in the same step to capture a prey; a lone
  catch adds a configurable penalty. With the penalty at 0 the game is
  purely cooperative (no negative shared reward).

Both are fully deterministic given the reset rng and the action stream, and
can record per-step traces exportable as line-delimited JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

# Predator actions; prey use the first five (no catch).
UP, DOWN, LEFT, RIGHT, STAY, CATCH = range(6)
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1), STAY: (0, 0)}

TABLE1_PAYOFF = np.array(
    [[12.0, -12.0, -12.0], [-12.0, 0.0, 0.0], [-12.0, 0.0, 0.0]]
)
# Table 7 variant: the large miscoordination penalty replaced by -0.5.
TABLE7_PAYOFF = np.array(
    [[12.0, -0.5, -0.5], [-0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]]
)


@dataclass
class StepResult:
    reward: float
    terminated: bool
    truncated: bool
    obs: np.ndarray  # (n_agents, obs_dim)
    state: np.ndarray  # (state_dim,)


@dataclass(frozen=True)
class MatrixGameSpec:
    payoff: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.payoff, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ValueError(f"payoff must be square, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("payoff entries must be finite")
        object.__setattr__(self, "payoff", p)


@dataclass(frozen=True)
class PredatorPreySpec:
    width: int = 10
    height: int = 10
    n_predators: int = 8
    n_prey: int = 8
    episode_limit: int = 200
    capture_reward: float = 10.0
    lone_catch_penalty: float = 0.0
    obs_radius: int = 2

    def __post_init__(self):
        if self.width * self.height < self.n_predators + self.n_prey:
            raise ValueError(
                f"grid {self.width}x{self.height} too small for "
                f"{self.n_predators + self.n_prey} entities"
            )
        if self.n_predators < 1 or self.n_prey < 1:
            raise ValueError("need at least one predator and one prey")
        if self.episode_limit < 1 or self.obs_radius < 0:
            raise ValueError("episode_limit >= 1 and obs_radius >= 0 required")


class MatrixGame:
    """One-shot cooperative matrix game; episode length exactly 1."""

    n_agents = 2

    def __init__(self, spec: MatrixGameSpec, record_trace: bool = False):
        self.spec = spec
        self.n_actions = spec.payoff.shape[0]
        self.obs_dim = self.n_agents
        self.state_dim = 1
        self.episode_limit = 1
        self.record_trace = record_trace
        self.trace: List[dict] = []
        self._done = True

    def _obs(self):
        return np.eye(self.n_agents)

    def global_state(self):
        return np.zeros(1)

    def reset(self, rng: Optional[np.random.Generator] = None):
        self._done = False
        self.trace = []
        return self._obs(), self.global_state()

    def step(self, joint_action) -> StepResult:
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        u1, u2 = int(joint_action[0]), int(joint_action[1])
        for u in (u1, u2):
            if not 0 <= u < self.n_actions:
                raise ValueError(f"action {u} out of range [0, {self.n_actions})")
        reward = float(self.spec.payoff[u1, u2])
        self._done = True
        res = StepResult(reward, True, False, self._obs(), self.global_state())
        if self.record_trace:
            self.trace.append(_trace_record(0, res, [u1, u2]))
        return res

    def export_trace(self, path):
        export_trace_jsonl(self.trace, path)


class PredatorPrey:
    """Discrete difficulty-enhanced predator-prey grid world.

    Actions: up, down, left, right, stay, catch. Movement is resolved in
    entity-index order (predators first, then prey): a move off-grid or
    into a currently occupied cell becomes stay, so two movers contending
    for one cell are tie-broken by index. A live prey 4-adjacent to >= 2
    predators that chose catch is captured for +capture_reward; a catching
    predator adjacent only to uncaptured prey incurs the lone-catch
    penalty (once per predator per step).
    """

    def __init__(self, spec: PredatorPreySpec, record_trace: bool = False):
        self.spec = spec
        self.n_agents = spec.n_predators
        self.n_actions = 6
        side = 2 * spec.obs_radius + 1
        self.obs_dim = 2 * side * side + 2
        self._n_entities = spec.n_predators + spec.n_prey
        self.state_dim = 3 * self._n_entities
        self.episode_limit = spec.episode_limit
        self.record_trace = record_trace
        self.trace: List[dict] = []
        self._rng: Optional[np.random.Generator] = None
        self._done = True

    # ------------------------------------------------------------- episode

    def reset(self, rng: np.random.Generator):
        s = self.spec
        self._rng = rng
        cells = rng.choice(s.width * s.height, size=self._n_entities, replace=False)
        pos = np.stack([cells // s.width, cells % s.width], axis=1).astype(np.int64)
        self.pred_pos = pos[: s.n_predators]
        self.prey_pos = pos[s.n_predators :]
        self.prey_alive = np.ones(s.n_prey, dtype=bool)
        self.t = 0
        self._done = False
        self.trace = []
        return self.all_obs(), self.global_state()

    def _in_grid(self, r, c):
        return 0 <= r < self.spec.height and 0 <= c < self.spec.width

    def _resolve_moves(self, intents):
        """intents: list of (entity_index, target (r, c)); entity order = index order."""
        occupied = {tuple(p) for p in self.pred_pos}
        occupied |= {tuple(p) for i, p in enumerate(self.prey_pos) if self.prey_alive[i]}
        positions = [self.pred_pos, self.prey_pos]
        for ent, (r, c) in intents:
            arr, idx = (positions[0], ent) if ent < self.spec.n_predators else (
                positions[1],
                ent - self.spec.n_predators,
            )
            cur = tuple(arr[idx])
            if (r, c) == cur:
                continue
            if self._in_grid(r, c) and (r, c) not in occupied:
                occupied.discard(cur)
                occupied.add((r, c))
                arr[idx] = (r, c)

    def step(self, joint_action) -> StepResult:
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        s = self.spec
        actions = [int(u) for u in joint_action]
        if len(actions) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} actions, got {len(actions)}")
        for u in actions:
            if not 0 <= u < self.n_actions:
                raise ValueError(f"action {u} out of range [0, {self.n_actions})")

        # joint movement intents: predators in index order, then prey
        intents = []
        for i, u in enumerate(actions):
            dr, dc = _MOVES.get(u, (0, 0))  # catch behaves as stay for movement
            intents.append((i, (self.pred_pos[i, 0] + dr, self.pred_pos[i, 1] + dc)))
        for j in range(s.n_prey):
            if not self.prey_alive[j]:
                continue
            r, c = self.prey_pos[j]
            valid = [
                (r + dr, c + dc)
                for dr, dc in _MOVES.values()
                if self._in_grid(r + dr, c + dc)
            ]
            pick = valid[int(self._rng.integers(len(valid)))]
            intents.append((s.n_predators + j, pick))
        self._resolve_moves(intents)

        # capture resolution on post-move positions
        catchers = [i for i, u in enumerate(actions) if u == CATCH]
        reward = 0.0
        captured = np.zeros(s.n_prey, dtype=bool)
        for j in range(s.n_prey):
            if not self.prey_alive[j]:
                continue
            adj = [
                i
                for i in catchers
                if abs(self.pred_pos[i, 0] - self.prey_pos[j, 0])
                + abs(self.pred_pos[i, 1] - self.prey_pos[j, 1])
                == 1
            ]
            if len(adj) >= 2:
                captured[j] = True
                reward += s.capture_reward
        for i in catchers:
            adj_live = adj_captured = False
            for j in range(s.n_prey):
                if not self.prey_alive[j]:
                    continue
                if (
                    abs(self.pred_pos[i, 0] - self.prey_pos[j, 0])
                    + abs(self.pred_pos[i, 1] - self.prey_pos[j, 1])
                    == 1
                ):
                    if captured[j]:
                        adj_captured = True
                    else:
                        adj_live = True
            if adj_live and not adj_captured:
                reward += s.lone_catch_penalty
        self.prey_alive &= ~captured

        self.t += 1
        terminated = not self.prey_alive.any()
        truncated = (not terminated) and self.t >= s.episode_limit
        self._done = terminated or truncated
        res = StepResult(reward, terminated, truncated, self.all_obs(), self.global_state())
        if self.record_trace:
            self.trace.append(_trace_record(self.t - 1, res, actions))
        return res

    # --------------------------------------------------------- observations

    def observe(self, agent_i: int):
        s = self.spec
        r0, c0 = self.pred_pos[agent_i]
        side = 2 * s.obs_radius + 1
        grid = np.zeros((2, side, side))
        for i, (r, c) in enumerate(self.pred_pos):
            if i == agent_i:
                continue
            dr, dc = r - r0, c - c0
            if abs(dr) <= s.obs_radius and abs(dc) <= s.obs_radius:
                grid[0, dr + s.obs_radius, dc + s.obs_radius] = 1.0
        for j, (r, c) in enumerate(self.prey_pos):
            if not self.prey_alive[j]:
                continue
            dr, dc = r - r0, c - c0
            if abs(dr) <= s.obs_radius and abs(dc) <= s.obs_radius:
                grid[1, dr + s.obs_radius, dc + s.obs_radius] = 1.0
        own = np.array([r0 / max(s.height - 1, 1), c0 / max(s.width - 1, 1)])
        return np.concatenate([grid.ravel(), own])

    def all_obs(self):
        return np.stack([self.observe(i) for i in range(self.n_agents)])

    def global_state(self):
        s = self.spec
        out = np.zeros(self.state_dim)
        norm = np.array([max(s.height - 1, 1), max(s.width - 1, 1)], dtype=np.float64)
        for i, (r, c) in enumerate(self.pred_pos):
            out[3 * i : 3 * i + 2] = (r / norm[0], c / norm[1])
            out[3 * i + 2] = 1.0
        for j, (r, c) in enumerate(self.prey_pos):
            k = s.n_predators + j
            if self.prey_alive[j]:
                out[3 * k : 3 * k + 2] = (r / norm[0], c / norm[1])
                out[3 * k + 2] = 1.0
        return out

    def export_trace(self, path):
        export_trace_jsonl(self.trace, path)


def _trace_record(t, res: StepResult, actions):
    return {
        "t": int(t),
        "state": [float(x) for x in res.state],
        "actions": [int(u) for u in actions],
        "reward": float(res.reward),
        "terminated": bool(res.terminated),
        "truncated": bool(res.truncated),
    }


def export_trace_jsonl(records, path):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def make_env(name: str, record_trace: bool = False, **kwargs):
    """Environment factory used by the CLI config layer."""
    if name == "matrix":
        payoff = kwargs.pop("payoff", TABLE1_PAYOFF)
        if isinstance(payoff, str):
            payoff = {"table1": TABLE1_PAYOFF, "table7": TABLE7_PAYOFF}[payoff]
        if kwargs:
            raise ValueError(f"unknown matrix-game options: {sorted(kwargs)}")
        return MatrixGame(MatrixGameSpec(payoff), record_trace=record_trace)
    if name == "pp":
        return PredatorPrey(PredatorPreySpec(**kwargs), record_trace=record_trace)
    raise ValueError(f"unknown environment {name!r}")
