"""Joint-value heads: monotone and non-monotone mixing networks.

Every mixer is a Module whose forward takes lifted params (or None for a
no-grad pass over its stored arrays). The `constrain` flag controls only
whether produced mixing weights pass through abs; parameter counts are
identical either way, which is what makes the monotonicity ablation a
one-bit switch.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Tensor
from .nets import Module, linear


def _p(mixer, p):
    return mixer.constants() if p is None else p


def vdn_mix(q):
    """Q_tot = sum_i Q_i. q: (B, n_agents) -> (B,)."""
    return ad.sum_(ad.as_tensor(q), axis=-1)


class MonotonicMixer(Module):
    """State-conditioned two-layer mixer with hypernet weights.

    Weight-producing hypernets are single linear layers of the state; the
    output bias comes from a two-layer ReLU hypernet. With `constrain` the
    produced weights pass through abs, enforcing dQ_tot/dQ_i >= 0.
    """

    def __init__(self, n_agents, state_dim, embed=32, constrain=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.embed = embed
        self.constrain = constrain
        self._linear(rng, "hw1", state_dim, n_agents * embed, uniform_bias=True)
        self._linear(rng, "hb1", state_dim, embed, uniform_bias=True)
        self._linear(rng, "hw2", state_dim, embed, uniform_bias=True)
        self._linear(rng, "hb2_0", state_dim, embed, uniform_bias=True)
        self._linear(rng, "hb2_1", embed, 1, uniform_bias=True)

    def forward(self, p, q, s):
        """q: (B, n_agents), s: (B, state_dim) -> (B,)."""
        p = _p(self, p)
        q = ad.as_tensor(q)
        s = ad.as_tensor(s)
        b = q.shape[0]
        w1 = linear(p, "hw1", s)
        w2 = linear(p, "hw2", s)
        if self.constrain:
            w1 = ad.abs_(w1)
            w2 = ad.abs_(w2)
        w1 = ad.reshape(w1, (b, self.n_agents, self.embed))
        b1 = linear(p, "hb1", s)
        hidden = ad.elu(
            ad.add(ad.reshape(ad.matmul(ad.reshape(q, (b, 1, self.n_agents)), w1), (b, self.embed)), b1)
        )
        b2 = linear(p, "hb2_1", ad.relu(linear(p, "hb2_0", s)))
        return ad.add(ad.sum_(ad.mul(hidden, w2), axis=-1), ad.reshape(b2, (b,)))


def qmix_mix(mixer, q, s, p=None):
    return mixer.forward(p, q, s)


def value_mix(mixer, v, s, p=None):
    """VMIX value decomposition: same mixer applied to state values."""
    return mixer.forward(p, v, s)


class QattenMixer(Module):
    """Attention-head mixer: Q_tot = c(s) + sum_h w_h sum_i lambda_ih Q_i.

    lambda coefficients are a per-head softmax over agents of bilinear
    key/query scores between agent-feature and state embeddings, so they
    are nonnegative and sum to one per head; with `constrain` the head
    weights w_h pass through abs.
    """

    def __init__(self, n_agents, state_dim, agent_feat_dim, n_heads=4, embed=32,
                 constrain=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if n_heads < 1:
            raise ValueError("QattenMixer requires at least one attention head")
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.agent_feat_dim = agent_feat_dim
        self.n_heads = n_heads
        self.embed = embed
        self.constrain = constrain
        self._linear(rng, "emb_s", state_dim, embed, uniform_bias=True)
        self._linear(rng, "emb_a", agent_feat_dim, embed, uniform_bias=True)
        for h in range(n_heads):
            self.params[f"wq.{h}"] = nets.uniform_init(rng, embed, (embed, embed))
            self.params[f"wk.{h}"] = nets.uniform_init(rng, embed, (embed, embed))
        self._linear(rng, "head_w", state_dim, n_heads, uniform_bias=True)
        self._linear(rng, "c0", state_dim, embed, uniform_bias=True)
        self._linear(rng, "c1", embed, 1, uniform_bias=True)

    def forward(self, p, q, s, agent_feats):
        """q: (B, n), s: (B, sd), agent_feats: (B, n, fd) -> (B,)."""
        p = _p(self, p)
        q = ad.as_tensor(q)
        s = ad.as_tensor(s)
        agent_feats = ad.as_tensor(agent_feats)
        b = q.shape[0]
        e_s = linear(p, "emb_s", s)
        e_a = ad.reshape(
            linear(p, "emb_a", ad.reshape(agent_feats, (b * self.n_agents, self.agent_feat_dim))),
            (b, self.n_agents, self.embed),
        )
        head_w = linear(p, "head_w", s)
        if self.constrain:
            head_w = ad.abs_(head_w)
        total = ad.reshape(linear(p, "c1", ad.relu(linear(p, "c0", s))), (b,))
        for h in range(self.n_heads):
            query = ad.matmul(e_s, p[f"wq.{h}"])
            keys = ad.matmul(
                ad.reshape(e_a, (b * self.n_agents, self.embed)), p[f"wk.{h}"]
            )
            keys = ad.reshape(keys, (b, self.n_agents, self.embed))
            scores = ad.sum_(
                ad.mul(keys, ad.reshape(query, (b, 1, self.embed))), axis=-1
            )
            lam = ad.softmax(scores)
            head_val = ad.sum_(ad.mul(lam, q), axis=-1)
            w_h = ad.gather(head_w, np.full(b, h, dtype=np.int64))
            total = ad.add(total, ad.mul(w_h, head_val))
        return total

    def attention(self, q_arr, s_arr, feats_arr):
        """Numeric lambda coefficients per head, for tests: (H, B, n)."""
        p = self.constants()
        b = q_arr.shape[0]
        e_s = linear(p, "emb_s", Tensor(s_arr)).data
        e_a = linear(
            p, "emb_a", Tensor(feats_arr.reshape(b * self.n_agents, -1))
        ).data.reshape(b, self.n_agents, self.embed)
        out = []
        for h in range(self.n_heads):
            query = e_s @ self.params[f"wq.{h}"]
            keys = e_a @ self.params[f"wk.{h}"]
            scores = (keys * query[:, None, :]).sum(-1)
            e = np.exp(scores - scores.max(-1, keepdims=True))
            out.append(e / e.sum(-1, keepdims=True))
        return np.stack(out)


def qatten_mix(mixer, q, s, agent_feats, p=None):
    return mixer.forward(p, q, s, agent_feats)


class QplexMixer(Module):
    """Dueling decomposition with the monotonicity constraint on advantages.

    V_i = max_u Q_i(u), A_i = Q_i(chosen) - V_i <= 0. A_tot mixes the
    advantages with abs-weight hypernet coefficients (when constrained);
    V_tot is an unconstrained MLP over (s, V_1..V_n). Q_tot = V_tot + A_tot.
    """

    def __init__(self, n_agents, state_dim, hidden=32, constrain=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.constrain = constrain
        self._linear(rng, "hwa", state_dim, n_agents, uniform_bias=True)
        self._linear(rng, "hba", state_dim, 1, uniform_bias=True)
        self._linear(rng, "v0", state_dim + n_agents, hidden, uniform_bias=True)
        self._linear(rng, "v1", hidden, 1, uniform_bias=True)

    def advantage_mix(self, p, a, s):
        """A_tot over advantage inputs a: (B, n)."""
        p = _p(self, p)
        a = ad.as_tensor(a)
        w = linear(p, "hwa", ad.as_tensor(s))
        if self.constrain:
            w = ad.abs_(w)
        bias = ad.reshape(linear(p, "hba", ad.as_tensor(s)), (a.shape[0],))
        return ad.add(ad.sum_(ad.mul(w, a), axis=-1), bias)

    def value_head(self, p, v, s):
        p = _p(self, p)
        x = ad.concat([ad.as_tensor(s), ad.as_tensor(v)], axis=-1)
        out = linear(p, "v1", ad.relu(linear(p, "v0", x)))
        return ad.reshape(out, (out.shape[0],))

    def forward_parts(self, p, q_all, chosen, s):
        """q_all: (B, n, n_actions), chosen: (B, n) int -> (q_tot, v_tot, a_tot)."""
        q_all = ad.as_tensor(q_all)
        chosen = np.asarray(chosen, dtype=np.int64)
        if chosen.min() < 0 or chosen.max() >= q_all.shape[-1]:
            raise IndexError("qplex_mix: chosen action index out of range")
        greedy = np.argmax(q_all.data, axis=-1)
        v_i = ad.gather(q_all, greedy)
        a_i = ad.sub(ad.gather(q_all, chosen), v_i)
        a_tot = self.advantage_mix(p, a_i, s)
        v_tot = self.value_head(p, v_i, s)
        return ad.add(v_tot, a_tot), v_tot, a_tot

    def forward(self, p, q_all, chosen, s):
        return self.forward_parts(p, q_all, chosen, s)[0]


def qplex_mix(mixer, q_all, chosen, s, p=None):
    return mixer.forward(p, q_all, chosen, s)


class CentralCritic(Module):
    """Unconstrained feed-forward head over (s, chosen Q_1..Q_n).

    Serves as OW-QMIX's true-value network; alpha is the optimism weight
    applied to non-underestimating samples.
    """

    def __init__(self, n_agents, state_dim, hidden=64, alpha=0.1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {alpha}")
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.alpha = alpha
        self._linear(rng, "l0", state_dim + n_agents, hidden, uniform_bias=True)
        self._linear(rng, "l1", hidden, hidden, uniform_bias=True)
        self._linear(rng, "l2", hidden, 1, uniform_bias=True)

    def forward(self, p, q, s):
        p = _p(self, p)
        x = ad.concat([ad.as_tensor(s), ad.as_tensor(q)], axis=-1)
        h = ad.relu(linear(p, "l1", ad.relu(linear(p, "l0", x))))
        out = linear(p, "l2", h)
        return ad.reshape(out, (out.shape[0],))


def owqmix_weight(q_tot, y, alpha):
    """Optimistic sample weight: 1 where q_tot < y, alpha otherwise."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    return np.where(np.asarray(q_tot) < np.asarray(y), 1.0, alpha)


class LicaCritic(Module):
    """Hypernet critic mapping joint policy distributions to a Q value.

    Two mixing layers whose weights and biases are produced from the state;
    no sign constraint anywhere.
    """

    def __init__(self, n_agents, n_actions, state_dim, embed=32, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_agents = n_agents
        self.n_actions = n_actions
        self.state_dim = state_dim
        self.embed = embed
        self.in_dim = n_agents * n_actions
        self._linear(rng, "hw1", state_dim, self.in_dim * embed, uniform_bias=True)
        self._linear(rng, "hb1", state_dim, embed, uniform_bias=True)
        self._linear(rng, "hw2", state_dim, embed, uniform_bias=True)
        self._linear(rng, "hb2", state_dim, 1, uniform_bias=True)

    def forward(self, p, s, policies, check=True):
        """s: (B, sd), policies: (B, n_agents, n_actions) -> (B,)."""
        p = _p(self, p)
        policies = ad.as_tensor(policies)
        if check:
            rows = policies.data.reshape(-1, self.n_actions)
            if np.any(rows < -1e-9) or np.max(np.abs(rows.sum(-1) - 1.0)) > 1e-9:
                raise ValueError("lica_critic_eval: inputs are not distributions")
        s = ad.as_tensor(s)
        b = policies.shape[0]
        w1 = ad.reshape(linear(p, "hw1", s), (b, self.in_dim, self.embed))
        b1 = linear(p, "hb1", s)
        x = ad.reshape(policies, (b, 1, self.in_dim))
        h = ad.elu(ad.add(ad.reshape(ad.matmul(x, w1), (b, self.embed)), b1))
        w2 = linear(p, "hw2", s)
        b2 = ad.reshape(linear(p, "hb2", s), (b,))
        return ad.add(ad.sum_(ad.mul(h, w2), axis=-1), b2)


def lica_critic_eval(critic, s, policies, p=None):
    return critic.forward(p, s, policies)


# ---------------------------------------------------------------------------
# finite-difference monotonicity probing and payoff-table regression


def monotonicity_probes(mix_fn, n_agents, n_probes, rng, h=1e-4, input_scale=3.0):
    """Central finite differences of a scalar mixer output w.r.t. each agent
    input, over random draws. mix_fn maps a (1, n_agents) array to a float.
    Returns the minimum derivative seen across all probes and agents.
    """
    worst = np.inf
    for _ in range(n_probes):
        q = rng.normal(size=(1, n_agents)) * input_scale
        for i in range(n_agents):
            qp = q.copy()
            qp[0, i] += h
            qm = q.copy()
            qm[0, i] -= h
            d = (mix_fn(qp) - mix_fn(qm)) / (2 * h)
            worst = min(worst, d)
    return worst


def fit_payoff_table(payoff, constrain, iters=3000, seed=0, lr=0.01, embed=8):
    """Full-batch regression of a MonotonicMixer (plus free per-agent
    q-tables) onto a 2-agent payoff matrix. Returns the final MSE.

    The state is a constant scalar, so the hypernets contribute only their
    biases; the free q-tables play the role of the agent utilities.
    """
    payoff = np.asarray(payoff, dtype=np.float64)
    n_actions = payoff.shape[0]
    rng = np.random.default_rng(seed)
    mixer = MonotonicMixer(2, 1, embed=embed, constrain=constrain, rng=rng)
    qtab = rng.normal(size=(2, n_actions))
    u1, u2 = np.meshgrid(np.arange(n_actions), np.arange(n_actions), indexing="ij")
    u1, u2 = u1.ravel(), u2.ravel()
    target = payoff[u1, u2]
    n_pairs = target.size
    s = np.zeros((n_pairs, 1))
    # constant selectors mapping the flat q-table to per-pair agent inputs
    sel1 = np.zeros((n_pairs, 2 * n_actions))
    sel2 = np.zeros((n_pairs, 2 * n_actions))
    sel1[np.arange(n_pairs), u1] = 1.0
    sel2[np.arange(n_pairs), n_actions + u2] = 1.0
    opt = nets.Adam(lr=lr)
    mse = np.inf
    for _ in range(iters):
        tape = ad.Tape()
        lifted = mixer.lift(tape)
        qt = ad.reshape(tape.leaf(qtab), (2 * n_actions, 1))
        rows = ad.concat(
            [ad.matmul(Tensor(sel1), qt), ad.matmul(Tensor(sel2), qt)], axis=-1
        )
        pred = mixer.forward(lifted, rows, s)
        loss = ad.mean_(ad.square(ad.sub(pred, Tensor(target))))
        mse = float(loss.data)
        gm = tape.backward(loss)
        grads = {k: gm[t.node_id] for k, t in lifted.items()}
        grads["q"] = gm[qt.node_id].reshape(2, n_actions)
        nets.clip_grad_norm(grads, 10.0)
        allp = dict(mixer.params)
        allp["q"] = qtab
        opt.step(allp, grads)
    return mse


def fit_floor(payoff, constrain, restarts, iters=3000):
    """Best (minimum) regression MSE over independent restarts."""
    return min(
        fit_payoff_table(payoff, constrain, iters=iters, seed=k)
        for k in range(restarts)
    )
