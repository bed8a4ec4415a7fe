"""Networks and optimizers.

Modules keep their parameters as a flat dict of named float64 arrays. For
a differentiable pass the dict is lifted onto a fresh tape (`lift`); for
target-network or rollout evaluation the arrays are wrapped as constants
(`constants`), which skips all tape bookkeeping.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad


def uniform_init(rng, fan_in, shape):
    """Weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    if fan_in <= 0:
        raise ValueError(f"zero fan-in for shape {shape}")
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Flat named-parameter container."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def _linear(self, rng, name, fan_in, fan_out, uniform_bias=False):
        # uniform_bias breaks the dead-gradient symmetry of hypernet layers
        # when the conditioning state is identically zero (matrix games)
        self.params[f"{name}.w"] = uniform_init(rng, fan_in, (fan_in, fan_out))
        self.params[f"{name}.b"] = (
            uniform_init(rng, fan_in, (fan_out,)) if uniform_bias else np.zeros(fan_out)
        )

    def lift(self, tape):
        return {k: tape.leaf(v) for k, v in self.params.items()}

    def constants(self):
        return {k: ad.Tensor(v) for k, v in self.params.items()}

    def param_count(self):
        return sum(v.size for v in self.params.values())

    def copy_from(self, other):
        for k, v in other.params.items():
            np.copyto(self.params[k], v)

    def grads_by_name(self, tape, lifted, gradmap):
        return {k: gradmap[t.node_id] for k, t in lifted.items()}


def linear(p, name, x):
    return ad.add(ad.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


class AgentNet(Module):
    """Shared DRQN-style agent network.

    Input per timestep: concat(observation, last action one-hot, agent id
    one-hot). A linear layer + ReLU feeds a GRU cell; a linear head maps
    the hidden state to one value per action (or to out_dim outputs).
    """

    GRU_KEYS = ("gru.wz", "gru.wr", "gru.wn", "gru.bz", "gru.br", "gru.bn")

    def __init__(self, obs_dim, n_actions, n_agents, hidden=64, out_dim=None, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.n_agents = n_agents
        self.hidden = hidden
        self.in_dim = obs_dim + n_actions + n_agents
        self.out_dim = n_actions if out_dim is None else out_dim
        self._linear(rng, "fc_in", self.in_dim, hidden)
        for gate in ("wz", "wr", "wn"):
            self.params[f"gru.{gate}"] = uniform_init(
                rng, 2 * hidden, (2 * hidden, hidden)
            )
        for gate in ("bz", "br", "bn"):
            self.params[f"gru.{gate}"] = np.zeros(hidden)
        self._linear(rng, "fc_out", hidden, self.out_dim)

    def expected_param_count(self):
        h, i, o = self.hidden, self.in_dim, self.out_dim
        return (i * h + h) + 3 * (2 * h * h + h) + (h * o + o)

    def init_hidden(self, batch):
        return ad.Tensor(np.zeros((batch, self.hidden)))

    def step(self, p, x, h):
        """One timestep: x (B, in_dim), h (B, H) -> (out (B, out_dim), h')."""
        z = ad.relu(linear(p, "fc_in", x))
        h_new = ad.gru_cell(z, h, *[p[k] for k in self.GRU_KEYS])
        return linear(p, "fc_out", h_new), h_new

    def forward_seq(self, p, inputs, h0=None):
        """inputs: (T, B, in_dim) array or Tensor -> outputs (T, B, out_dim).

        Hidden state threads through time; h0 defaults to zeros.
        """
        arr = inputs.data if isinstance(inputs, ad.Tensor) else np.asarray(inputs)
        t_max, batch = arr.shape[0], arr.shape[1]
        h = h0 if h0 is not None else self.init_hidden(batch)
        outs = []
        for t in range(t_max):
            out, h = self.step(p, ad.Tensor(arr[t]), h)
            outs.append(ad.reshape(out, (1, batch, self.out_dim)))
        return ad.concat(outs, axis=0)


def build_agent_inputs(obs, actions, n_actions, n_agents):
    """Assemble (T, B*n_agents, in_dim) agent inputs from episode arrays.

    obs: (T, B, n_agents, obs_dim); actions: (T, B, n_agents) int, used as
    last-action one-hots shifted by one step (zeros at t=0). Agent ids are
    one-hot appended so one parameter set serves all agents.
    """
    t_max, batch, n, obs_dim = obs.shape
    last = np.zeros((t_max, batch, n, n_actions))
    if t_max > 1:
        eye = np.eye(n_actions)
        last[1:] = eye[actions[: t_max - 1]]
    ids = np.broadcast_to(np.eye(n), (t_max, batch, n, n))
    full = np.concatenate([obs, last, ids], axis=-1)
    return full.reshape(t_max, batch * n, obs_dim + n_actions + n)


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class RMSProp:
    def __init__(self, lr=0.0005, rho=0.99, eps=1e-5):
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.t = 0
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        self.t += 1
        for k, g in grads.items():
            if k not in self.v:
                self.v[k] = np.zeros_like(params[k])
            v = self.v[k]
            v *= self.rho
            v += (1.0 - self.rho) * g * g
            params[k] -= self.lr * g / (np.sqrt(v) + self.eps)


def make_optimizer(kind, lr):
    if kind == "adam":
        return Adam(lr=lr)
    if kind == "rmsprop":
        return RMSProp(lr=lr)
    raise ValueError(f"unknown optimizer kind: {kind!r}")


def clip_grad_norm(grads, max_norm=10.0):
    """Scale gradients in place so their global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "marlab-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_params):
    """Write named arrays as versioned JSON ({name: {shape, data}})."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arrays": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in named_params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    return {
        name: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in doc["arrays"].items()
    }
