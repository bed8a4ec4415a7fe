"""Training loops: value-based Q-learning (VDN/QMIX/Qatten/QPLEX/OW-QMIX),
RIIT two-stage actor-critic, and VMIX on-policy advantage actor-critic.

One learner owns all live and target modules plus the optimizer; updates
rebuild the autodiff tape from scratch every call. Targets are computed
numerically (tapeless) from the frozen target parameters, so mutating live
parameters between target construction and the loss cannot change them.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from . import envs, mixers, nets, returns, rollout

VALUE_ALGOS = ("vdn", "qmix", "qatten", "qplex", "ow-qmix")
POLICY_ALGOS = ("riit", "lica", "vmix")
ALGOS = VALUE_ALGOS + POLICY_ALGOS


@dataclass(frozen=True)
class TrainerConfig:
    algo: str = "qmix"
    gamma: float = 0.99
    lam: float = 0.6  # 0.8 for VMIX
    batch_size: int = 128  # value-based
    off_batch_size: int = 64  # RIIT offline stage
    on_batch_size: int = 32  # RIIT/VMIX on-policy stage
    buffer_capacity: int = 5000
    target_update_interval: int = 200  # episodes
    optimizer: str = "adam"
    lr: float = 0.001
    entropy_coef: float = 0.03  # 0.06 for LICA
    alpha: float = 0.1  # OW-QMIX optimism weight
    n_workers: int = 1
    total_env_steps: int = 20_000
    hidden: int = 64
    mixer_embed: int = 32
    constrain: bool = True
    eps_start: float = 1.0
    eps_finish: float = 0.05
    eps_anneal: int = 50_000
    eps_fixed: Optional[float] = None  # overrides the schedule when set
    eval_interval: int = 2000
    n_test_episodes: int = 32
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algo {self.algo!r}; choose from {ALGOS}")
        errs = []
        if not 0.0 <= self.gamma < 1.0:
            errs.append(f"gamma={self.gamma} not in [0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            errs.append(f"lam={self.lam} not in [0, 1]")
        if not 0.0 < self.alpha <= 1.0:
            errs.append(f"alpha={self.alpha} not in (0, 1]")
        for k in ("batch_size", "off_batch_size", "on_batch_size",
                  "buffer_capacity", "target_update_interval", "n_workers",
                  "hidden", "mixer_embed", "eval_interval", "n_test_episodes",
                  "eps_anneal"):
            if getattr(self, k) < 1:
                errs.append(f"{k}={getattr(self, k)} must be >= 1")
        if self.total_env_steps < 0:
            errs.append(f"total_env_steps={self.total_env_steps} must be >= 0")
        if self.lr <= 0:
            errs.append(f"lr={self.lr} must be > 0")
        if self.entropy_coef < 0:
            errs.append(f"entropy_coef={self.entropy_coef} must be >= 0")
        if self.optimizer not in ("adam", "rmsprop"):
            errs.append(f"optimizer={self.optimizer!r} not adam|rmsprop")
        if self.eps_fixed is not None and not 0.0 <= self.eps_fixed <= 1.0:
            errs.append(f"eps_fixed={self.eps_fixed} not in [0, 1]")
        if errs:
            raise ValueError("; ".join(errs))

    def epsilon_schedule(self):
        return rollout.EpsilonSchedule(self.eps_start, self.eps_finish, self.eps_anneal)


@dataclass(frozen=True)
class EnvInfo:
    obs_dim: int
    state_dim: int
    n_agents: int
    n_actions: int

    @staticmethod
    def of(env):
        return EnvInfo(env.obs_dim, env.state_dim, env.n_agents, env.n_actions)


# --------------------------------------------------------------- utilities


def _tb(x):
    """(B, T, ...) -> (T, B, ...)."""
    return np.swapaxes(np.asarray(x), 0, 1)


def _flatten_time(x):
    """(T, B, ...) -> (T*B, ...)."""
    x = np.asarray(x)
    return x.reshape((x.shape[0] * x.shape[1],) + x.shape[2:])


def _masked_mse(tape, pred, y, mask, weights=None):
    """sum(w * mask * (pred - y)^2) / sum(mask); pred on the tape."""
    w = mask if weights is None else mask * weights
    diff = ad.sub(pred, ad.Tensor(y))
    sq = ad.mul(ad.square(diff), ad.Tensor(w))
    return ad.scale(ad.sum_(sq), 1.0 / mask.sum())


def _numeric_agent_seq(net, target_params, inputs):
    """Tapeless agent forward over a full sequence -> (T, B*n, out) array."""
    p = {k: ad.Tensor(v) for k, v in target_params.items()}
    return net.forward_seq(p, inputs).data


class _LearnerBase:
    """Common plumbing: named modules, target copies, optimizer, targets cadence."""

    def __init__(self, cfg: TrainerConfig):
        self.cfg = cfg
        self.modules: Dict[str, nets.Module] = {}
        self.targets: Dict[str, nets.Module] = {}
        self.opt = nets.make_optimizer(cfg.optimizer, cfg.lr)
        self._target_crossings = 0
        self.updates = 0

    def _register(self, name, live, target):
        self.modules[name] = live
        self.targets[name] = target
        target.copy_from(live)

    def flat_params(self):
        return {
            f"{name}.{k}": arr
            for name, m in self.modules.items()
            for k, arr in m.params.items()
        }

    def sync_targets(self):
        for name, m in self.modules.items():
            self.targets[name].copy_from(m)

    def _apply(self, tape, lifted, loss, only: Optional[List[str]] = None,
               extra_grads: Optional[Dict[str, np.ndarray]] = None):
        gradmap = tape.backward(loss)
        grads = {}
        for name, lp in lifted.items():
            if only is not None and name not in only:
                continue
            for k, g in self.modules[name].grads_by_name(tape, lp, gradmap).items():
                grads[f"{name}.{k}"] = g.copy()
        if extra_grads:
            for k, g in extra_grads.items():
                grads[k] = grads[k] + g
        nets.clip_grad_norm(grads, self.cfg.grad_clip)
        self.opt.step(self.flat_params(), grads)
        self.updates += 1
        return grads


def maybe_update_targets(learner: _LearnerBase, episode_count: int) -> bool:
    """Full parameter copy exactly when the episode counter crosses a
    multiple of target_update_interval."""
    crossings = episode_count // learner.cfg.target_update_interval
    if crossings > learner._target_crossings:
        learner._target_crossings = crossings
        learner.sync_targets()
        return True
    return False


def _check_batch(batch: rollout.EpisodeBatch):
    if batch.mask.sum() == 0:
        raise ValueError("batch mask is empty: no real transitions to train on")


def _agent_inputs_full(batch, n_actions, n_agents):
    """Inputs over t = 0..T (the T+1 stored steps); actions feed the shift."""
    obs_tb = _tb(batch.obs)  # (T+1, B, n, od)
    act_tb = np.concatenate(
        [_tb(batch.actions), np.zeros((1,) + batch.actions.shape[:1] + batch.actions.shape[2:], dtype=np.int64)],
        axis=0,
    )
    return nets.build_agent_inputs(obs_tb, act_tb, n_actions, n_agents)


# ------------------------------------------------------- value-based learner


class QLearner(_LearnerBase):
    """VDN / QMIX / Qatten / QPLEX / OW-QMIX with Peng's Q(lambda) targets."""

    def __init__(self, info: EnvInfo, cfg: TrainerConfig, rng=None):
        super().__init__(cfg)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.info = info
        mk_agent = lambda: nets.AgentNet(
            info.obs_dim, info.n_actions, info.n_agents, hidden=cfg.hidden, rng=rng
        )
        self._register("agent", mk_agent(), mk_agent())
        algo = cfg.algo
        if algo == "qmix":
            mk = lambda: mixers.MonotonicMixer(
                info.n_agents, info.state_dim, embed=cfg.mixer_embed,
                constrain=cfg.constrain, rng=rng,
            )
            self._register("mixer", mk(), mk())
        elif algo == "qatten":
            mk = lambda: mixers.QattenMixer(
                info.n_agents, info.state_dim, info.obs_dim,
                embed=cfg.mixer_embed, constrain=cfg.constrain, rng=rng,
            )
            self._register("mixer", mk(), mk())
        elif algo == "qplex":
            mk = lambda: mixers.QplexMixer(
                info.n_agents, info.state_dim, hidden=cfg.mixer_embed,
                constrain=cfg.constrain, rng=rng,
            )
            self._register("mixer", mk(), mk())
        elif algo == "ow-qmix":
            mk = lambda: mixers.MonotonicMixer(
                info.n_agents, info.state_dim, embed=cfg.mixer_embed,
                constrain=True, rng=rng,
            )
            self._register("mixer", mk(), mk())
            mkc = lambda: mixers.CentralCritic(
                info.n_agents, info.state_dim, hidden=cfg.hidden,
                alpha=cfg.alpha, rng=rng,
            )
            self._register("central", mkc(), mkc())
        elif algo != "vdn":
            raise ValueError(f"{algo!r} is not a value-based algorithm")

    def actor(self):
        return rollout.AgentActor(self.modules["agent"], self.modules["agent"].params)

    # numeric mixing with target parameters
    def _mix_numeric(self, module_name, q, s, q_all=None, chosen=None, feats=None):
        m = self.targets[module_name]
        p = {k: ad.Tensor(v) for k, v in m.params.items()}
        algo = self.cfg.algo
        if algo in ("qmix",):
            return m.forward(p, q, s).data
        if algo == "qatten":
            return m.forward(p, q, s, feats).data
        if algo == "qplex":
            return m.forward(p, q_all, chosen, s).data
        raise AssertionError(module_name)

    def _build_targets(self, batch):
        cfg, info = self.cfg, self.info
        b, t = batch.reward.shape
        n, a = info.n_agents, info.n_actions
        inputs = _agent_inputs_full(batch, a, n)
        qt = _numeric_agent_seq(
            self.modules["agent"], self.targets["agent"].params, inputs
        )  # (T+1, B*n, A)
        qt_next = qt[1:].reshape(t, b, n, a)
        maxq = qt_next.max(axis=-1)  # (T, B, n)
        greedy = np.argmax(qt_next, axis=-1)
        s_next = _flatten_time(_tb(batch.state)[1:])  # (T*B, sd)
        if cfg.algo == "vdn":
            boot = maxq.sum(axis=-1)
        elif cfg.algo == "qmix":
            boot = self._mix_numeric(
                "mixer", _flatten_time(maxq), s_next
            ).reshape(t, b)
        elif cfg.algo == "qatten":
            feats = _flatten_time(_tb(batch.obs)[1:])
            boot = self._mix_numeric(
                "mixer", _flatten_time(maxq), s_next, feats=feats
            ).reshape(t, b)
        elif cfg.algo == "qplex":
            boot = self._mix_numeric(
                "mixer", None, s_next,
                q_all=_flatten_time(qt_next), chosen=_flatten_time(greedy),
            ).reshape(t, b)
        else:  # ow-qmix: bootstrap from the central critic target at greedy Qs
            m = self.targets["central"]
            boot = m.forward(None, ad.Tensor(_flatten_time(maxq)),
                             ad.Tensor(s_next)).data.reshape(t, b)
        y = returns.peng_q_lambda_targets(
            batch.reward, boot.T.reshape(b, t), batch.terminated, batch.mask,
            cfg.lam, cfg.gamma,
        )
        return y  # (B, T)

    def update(self, batch: rollout.EpisodeBatch):
        tape, lifted, loss = self.forward_loss(batch)
        self._apply(tape, lifted, loss)
        return float(loss.data)

    def forward_loss(self, batch: rollout.EpisodeBatch, fixed_weights=None):
        """Build the TD loss on a fresh tape (no parameter update).

        fixed_weights pins the OW-QMIX sample weights (which are a
        discontinuous function of q_tot) for finite-difference probing."""
        _check_batch(batch)
        cfg, info = self.cfg, self.info
        b, t = batch.reward.shape
        n, a = info.n_agents, info.n_actions
        y = self._build_targets(batch)  # (B, T)
        y_tb = _flatten_time(_tb(y[..., None])).reshape(-1)  # (T*B,)
        mask_tb = _flatten_time(_tb(batch.mask[..., None])).reshape(-1)

        obs_tb = _tb(batch.obs)[: t]
        act_tb = _tb(batch.actions)
        inputs = nets.build_agent_inputs(obs_tb, act_tb, a, n)  # (T, B*n, in)
        s_tb = _flatten_time(_tb(batch.state)[:t])  # (T*B, sd)

        tape = ad.Tape()
        lifted = {name: m.lift(tape) for name, m in self.modules.items()}
        q_seq = self.modules["agent"].forward_seq(lifted["agent"], inputs)
        q_chosen = ad.gather(q_seq, act_tb.reshape(t, b * n))  # (T, B*n)
        q_chosen = ad.reshape(q_chosen, (t * b, n))

        if cfg.algo == "vdn":
            q_tot = mixers.vdn_mix(q_chosen)
        elif cfg.algo == "qmix":
            q_tot = self.modules["mixer"].forward(lifted["mixer"], q_chosen, s_tb)
        elif cfg.algo == "qatten":
            feats = _flatten_time(obs_tb)
            q_tot = self.modules["mixer"].forward(lifted["mixer"], q_chosen, s_tb, feats)
        elif cfg.algo == "qplex":
            q_all = ad.reshape(q_seq, (t * b, n, a))
            q_tot = self.modules["mixer"].forward(
                lifted["mixer"], q_all, act_tb.reshape(t * b, n), s_tb
            )
        else:  # ow-qmix
            q_tot = self.modules["mixer"].forward(lifted["mixer"], q_chosen, s_tb)

        weights = None
        loss = None
        if cfg.algo == "ow-qmix":
            weights = (
                fixed_weights
                if fixed_weights is not None
                else mixers.owqmix_weight(q_tot.data, y_tb, cfg.alpha)
            )
            critic_out = self.modules["central"].forward(
                lifted["central"], q_chosen, ad.Tensor(s_tb)
            )
            loss = ad.add(
                _masked_mse(tape, q_tot, y_tb, mask_tb, weights),
                _masked_mse(tape, critic_out, y_tb, mask_tb),
            )
        else:
            loss = _masked_mse(tape, q_tot, y_tb, mask_tb)
        return tape, lifted, loss


    def joint_value(self, q_agents, chosen, state, obs):
        """Q_tot for one joint action from numeric per-agent values."""
        qc = q_agents[np.arange(len(chosen)), chosen][None]  # (1, n)
        s = np.asarray(state)[None]
        algo = self.cfg.algo
        if algo == "vdn":
            return float(qc.sum())
        m = self.modules["mixer"]
        if algo in ("qmix", "ow-qmix"):
            return float(m.forward(None, ad.Tensor(qc), ad.Tensor(s)).data[0])
        if algo == "qatten":
            return float(
                m.forward(
                    None, ad.Tensor(qc), ad.Tensor(s), ad.Tensor(np.asarray(obs)[None])
                ).data[0]
            )
        return float(  # qplex
            m.forward(None, ad.Tensor(q_agents[None]), chosen[None], ad.Tensor(s)).data[0]
        )


def q_learner_update(learner: QLearner, batch) -> float:
    return learner.update(batch)


# ---------------------------------------------------------------- RIIT/LICA


class RiitLearner(_LearnerBase):
    """Two-stage actor-critic (Algorithm 1); also serves the LICA baseline.

    Modules: policy nets pi_i (logit heads), utility nets Q_i, and a critic
    head — a MonotonicMixer over per-agent utilities for RIIT (the
    `constrain` flag is the monotonicity-ablation switch) or a LicaCritic
    over the joint policy for LICA.
    """

    def __init__(self, info: EnvInfo, cfg: TrainerConfig, rng=None):
        super().__init__(cfg)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.info = info
        self.lica = cfg.algo == "lica"
        mk_policy = lambda: nets.AgentNet(
            info.obs_dim, info.n_actions, info.n_agents, hidden=cfg.hidden, rng=rng
        )
        self._register("policy", mk_policy(), mk_policy())
        if self.lica:
            mk_critic = lambda: mixers.LicaCritic(
                info.n_agents, info.n_actions, info.state_dim,
                embed=cfg.mixer_embed, rng=rng,
            )
            self._register("critic", mk_critic(), mk_critic())
        else:
            mk_util = lambda: nets.AgentNet(
                info.obs_dim, info.n_actions, info.n_agents, hidden=cfg.hidden, rng=rng
            )
            self._register("utility", mk_util(), mk_util())
            mk_critic = lambda: mixers.MonotonicMixer(
                info.n_agents, info.state_dim, embed=cfg.mixer_embed,
                constrain=cfg.constrain, rng=rng,
            )
            self._register("critic", mk_critic(), mk_critic())

    def actor(self):
        return PolicyActor(self.modules["policy"], self.modules["policy"].params)

    # -- numeric helpers ---------------------------------------------------

    def _policies_numeric(self, inputs, params):
        logits = _numeric_agent_seq(self.modules["policy"], params, inputs)
        return _softmax_np(logits)

    def _critic_numeric(self, s, chosen_q=None, policies=None, onehots=None):
        """Critic value with target parameters. For RIIT pass chosen_q
        (per-agent utility of the evaluated actions); for LICA pass the
        joint distributions (or action one-hots)."""
        m = self.targets["critic"]
        p = {k: ad.Tensor(v) for k, v in m.params.items()}
        if self.lica:
            x = policies if policies is not None else onehots
            return m.forward(p, s, x, check=False).data
        return m.forward(p, chosen_q, s).data

    def _bootstrap(self, batch, rng):
        """Next-state critic value under actions sampled from the current
        policies, evaluated with target networks. (B, T)."""
        info, cfg = self.info, self.cfg
        b, t = batch.reward.shape
        n, a = info.n_agents, info.n_actions
        inputs = _agent_inputs_full(batch, a, n)
        pol = self._policies_numeric(inputs, self.modules["policy"].params)
        pol_next = pol[1:].reshape(t, b, n, a)
        u = _sample_categorical(pol_next.reshape(-1, a), rng).reshape(t, b, n)
        s_next = _flatten_time(_tb(batch.state)[1:])
        if self.lica:
            onehots = np.eye(a)[u].reshape(t * b, n, a)
            v = self._critic_numeric(ad.Tensor(s_next), onehots=onehots)
        else:
            qt = _numeric_agent_seq(
                self.modules["utility"], self.targets["utility"].params, inputs
            )[1:].reshape(t, b, n, a)
            chosen_q = np.take_along_axis(qt, u[..., None], axis=-1)[..., 0]
            v = self._critic_numeric(
                ad.Tensor(s_next), chosen_q=ad.Tensor(_flatten_time(chosen_q))
            )
        return v.reshape(t, b).T.copy()

    # -- critic stages -------------------------------------------------------

    def _critic_stage(self, batch, y):
        tape, lifted, loss, only = self.critic_loss(batch, y)
        self._apply(tape, lifted, loss, only=only)
        return float(loss.data)

    def critic_loss(self, batch, y):
        """Masked critic MSE on taken actions (no update); trains utility +
        critic (RIIT) or the LICA critic."""
        info, cfg = self.info, self.cfg
        b, t = batch.reward.shape
        n, a = info.n_agents, info.n_actions
        y_tb = _flatten_time(_tb(y[..., None])).reshape(-1)
        mask_tb = _flatten_time(_tb(batch.mask[..., None])).reshape(-1)
        s_tb = _flatten_time(_tb(batch.state)[:t])
        act_tb = _tb(batch.actions)

        tape = ad.Tape()
        lifted = {name: m.lift(tape) for name, m in self.modules.items()}
        if self.lica:
            onehots = np.eye(a)[batch.actions]  # (B, T, n, a)
            x = _flatten_time(_tb(onehots))
            out = self.modules["critic"].forward(
                lifted["critic"], ad.Tensor(s_tb), ad.Tensor(x), check=False
            )
            only = ["critic"]
        else:
            inputs = nets.build_agent_inputs(_tb(batch.obs)[:t], act_tb, a, n)
            q_seq = self.modules["utility"].forward_seq(lifted["utility"], inputs)
            q_chosen = ad.reshape(
                ad.gather(q_seq, act_tb.reshape(t, b * n)), (t * b, n)
            )
            out = self.modules["critic"].forward(lifted["critic"], q_chosen, s_tb)
            only = ["critic", "utility"]
        loss = _masked_mse(tape, out, y_tb, mask_tb)
        return tape, lifted, loss, only

    def critic_update_offline(self, batch, rng):
        _check_batch(batch)
        boot = self._bootstrap(batch, rng)
        y = returns.one_step_targets(
            batch.reward, boot, batch.terminated, batch.mask, self.cfg.gamma
        )
        return self._critic_stage(batch, y)

    def critic_update_online(self, batch, rng):
        _check_batch(batch)
        boot = self._bootstrap(batch, rng)
        y = returns.td_lambda_targets(
            batch.reward, boot, batch.terminated, batch.mask,
            self.cfg.lam, self.cfg.gamma,
        )
        return self._critic_stage(batch, y)

    # -- policy stage --------------------------------------------------------

    def policy_update(self, batch):
        """Maximize critic(s, policy-expected utilities) with the adaptive
        entropy bonus: the entropy term's gradient over the policy
        parameters is normalized to unit L2 and scaled by entropy_coef."""
        tape, lifted, main_loss, neg_entropy = self.policy_loss(batch)
        cfg = self.cfg

        gmap_ent = tape.backward(neg_entropy)
        ent_grads = {
            f"policy.{k}": g.copy()
            for k, g in self.modules["policy"].grads_by_name(
                tape, lifted["policy"], gmap_ent
            ).items()
        }
        norm = np.sqrt(sum(float((g * g).sum()) for g in ent_grads.values()))
        scale = cfg.entropy_coef / max(norm, 1e-12)
        for g in ent_grads.values():
            g *= scale

        self._apply(tape, lifted, main_loss, only=["policy"], extra_grads=ent_grads)
        ent_value = -float(neg_entropy.data)
        return float(main_loss.data), ent_value

    def policy_loss(self, batch):
        """Build main policy loss (-E[critic]) and the masked mean negative
        entropy on one tape (no update)."""
        _check_batch(batch)
        info, cfg = self.info, self.cfg
        b, t = batch.reward.shape
        n, a = info.n_agents, info.n_actions
        mask_tb = _flatten_time(_tb(batch.mask[..., None])).reshape(-1)
        s_tb = _flatten_time(_tb(batch.state)[:t])
        inputs = nets.build_agent_inputs(_tb(batch.obs)[:t], _tb(batch.actions), a, n)

        tape = ad.Tape()
        lifted = {"policy": self.modules["policy"].lift(tape)}
        logits = self.modules["policy"].forward_seq(lifted["policy"], inputs)
        pol = ad.softmax(ad.reshape(logits, (t * b * n, a)))
        if self.lica:
            critic_out = self.modules["critic"].forward(
                self.modules["critic"].constants(), ad.Tensor(s_tb),
                ad.reshape(pol, (t * b, n, a)), check=False,
            )
        else:
            q_util = _numeric_agent_seq(
                self.modules["utility"], self.modules["utility"].params, inputs
            ).reshape(t * b * n, a)
            expected = ad.sum_(ad.mul(pol, ad.Tensor(q_util)), axis=-1)
            critic_out = self.modules["critic"].forward(
                self.modules["critic"].constants(),
                ad.reshape(expected, (t * b, n)), s_tb,
            )
        masked = ad.mul(critic_out, ad.Tensor(mask_tb))
        main_loss = ad.scale(ad.sum_(masked), -1.0 / mask_tb.sum())

        # entropy term (Eq. 5 sign: maximize H), gradient normalized
        plogp = ad.mul(pol, ad.log(pol))
        agent_mask = np.repeat(mask_tb, n)
        ent_rows = ad.mul(ad.sum_(plogp, axis=-1), ad.Tensor(agent_mask))
        neg_entropy = ad.scale(ad.sum_(ent_rows), 1.0 / agent_mask.sum())
        return tape, lifted, main_loss, neg_entropy


def riit_update(learner: RiitLearner, offline_batch, online_batch, rng):
    """Algorithm 1 order: off-policy critic, on-policy critic, policy."""
    l_off = learner.critic_update_offline(offline_batch, rng)
    l_on = learner.critic_update_online(online_batch, rng)
    l_pol, ent = learner.policy_update(online_batch)
    return {"critic_off": l_off, "critic_on": l_on, "policy": l_pol, "entropy": ent}


# --------------------------------------------------------------------- VMIX


class VmixLearner(_LearnerBase):
    """On-policy A2C with a monotonic value mixer (lambda = 0.8, RMSProp)."""

    def __init__(self, info: EnvInfo, cfg: TrainerConfig, rng=None):
        super().__init__(cfg)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.info = info
        mk_policy = lambda: nets.AgentNet(
            info.obs_dim, info.n_actions, info.n_agents, hidden=cfg.hidden, rng=rng
        )
        self._register("policy", mk_policy(), mk_policy())
        mk_value = lambda: nets.AgentNet(
            info.obs_dim, info.n_actions, info.n_agents, hidden=cfg.hidden,
            out_dim=1, rng=rng,
        )
        self._register("value", mk_value(), mk_value())
        mk_mixer = lambda: mixers.MonotonicMixer(
            info.n_agents, info.state_dim, embed=cfg.mixer_embed,
            constrain=cfg.constrain, rng=rng,
        )
        self._register("mixer", mk_mixer(), mk_mixer())
        self._last_batch_tag = -1

    def actor(self):
        return PolicyActor(self.modules["policy"], self.modules["policy"].params)

    def _v_tot_numeric(self, batch, params_value, params_mixer):
        """V_tot at every stored step (T+1, B) with the given parameters."""
        info = self.info
        b = batch.reward.shape[0]
        inputs = _agent_inputs_full(batch, info.n_actions, info.n_agents)
        v_i = _numeric_agent_seq(self.modules["value"], params_value, inputs)
        t1 = v_i.shape[0]
        v_i = v_i.reshape(t1 * b, info.n_agents)
        m = self.modules["mixer"]
        p = {k: ad.Tensor(v) for k, v in params_mixer.items()}
        s = _flatten_time(_tb(batch.state))
        return m.forward(p, ad.Tensor(v_i), ad.Tensor(s)).data.reshape(t1, b)

    def update(self, batch: rollout.EpisodeBatch, batch_tag: int):
        """batch_tag must strictly increase: stale (re-used) batches are
        rejected to keep the update on-policy."""
        if batch_tag <= self._last_batch_tag:
            raise ValueError(
                f"stale on-policy batch: tag {batch_tag} <= last {self._last_batch_tag}"
            )
        self._last_batch_tag = batch_tag
        tape, lifted, v_loss, pg, loss = self.forward_loss(batch)
        self._apply(tape, lifted, loss)
        return {
            "value": float(v_loss.data),
            "policy": float(pg.data),
            "total": float(loss.data),
        }

    def forward_loss(self, batch: rollout.EpisodeBatch):
        """Build the combined value + policy-gradient + entropy loss."""
        _check_batch(batch)
        info, cfg = self.info, self.cfg
        b, t = batch.reward.shape
        n, a = info.n_agents, info.n_actions

        # targets from the frozen copies; advantages from the live values
        v_tgt = self._v_tot_numeric(
            batch, self.targets["value"].params, self.targets["mixer"].params
        )  # (T+1, B)
        y = returns.td_lambda_targets(
            batch.reward, v_tgt[1:].T.copy(), batch.terminated, batch.mask,
            cfg.lam, cfg.gamma,
        )
        v_live = self._v_tot_numeric(
            batch, self.modules["value"].params, self.modules["mixer"].params
        )
        adv = a2c_advantage(
            batch.reward, v_live.transpose(1, 0), batch.terminated, batch.mask, cfg.gamma
        )

        y_tb = _flatten_time(_tb(y[..., None])).reshape(-1)
        mask_tb = _flatten_time(_tb(batch.mask[..., None])).reshape(-1)
        adv_tb = _flatten_time(_tb(adv[..., None])).reshape(-1)
        s_tb = _flatten_time(_tb(batch.state)[:t])
        act_tb = _tb(batch.actions)
        inputs = nets.build_agent_inputs(_tb(batch.obs)[:t], act_tb, a, n)

        # value loss
        tape = ad.Tape()
        lifted = {name: m.lift(tape) for name, m in self.modules.items()}
        v_seq = self.modules["value"].forward_seq(lifted["value"], inputs)
        v_i = ad.reshape(v_seq, (t * b, n))
        v_tot = self.modules["mixer"].forward(lifted["mixer"], v_i, s_tb)
        v_loss = _masked_mse(tape, v_tot, y_tb, mask_tb)

        # policy gradient with entropy bonus
        logits = self.modules["policy"].forward_seq(lifted["policy"], inputs)
        pol = ad.softmax(ad.reshape(logits, (t * b * n, a)))
        logpol = ad.log(pol)
        chosen = ad.gather(logpol, act_tb.reshape(t * b * n))
        adv_rows = np.repeat(adv_tb, n)
        pg = ad.scale(
            ad.sum_(ad.mul(chosen, ad.Tensor(adv_rows))), -1.0 / max(mask_tb.sum(), 1.0)
        )
        agent_mask = np.repeat(mask_tb, n)
        ent = ad.scale(
            ad.sum_(ad.mul(ad.sum_(ad.mul(pol, logpol), axis=-1), ad.Tensor(agent_mask))),
            cfg.entropy_coef / agent_mask.sum(),
        )
        loss = ad.add(v_loss, ad.add(pg, ent))
        return tape, lifted, v_loss, pg, loss


def a2c_advantage(reward, v, terminated, mask, gamma):
    """A_t = r_t + gamma * (1 - terminated_t) * V_{t+1} - V_t, masked.

    reward/terminated/mask: (B, T); v: (B, T+1) joint values including the
    final stored step. At a terminal step the bootstrap drops: A = r - V_t.
    """
    t = reward.shape[1]
    adv = reward + gamma * (1.0 - terminated) * v[:, 1:] - v[:, :t]
    return adv * mask


def vmix_update(learner: VmixLearner, batch, batch_tag):
    return learner.update(batch, batch_tag)


def matrix_joint_q(learner: QLearner, env):
    """Enumerate Q_tot over every joint action of a 2-agent matrix game.

    Returns (table (A, A), per-agent greedy values q (n, A))."""
    obs, state = env.reset(np.random.default_rng(0))
    actor = learner.actor()
    q, _ = actor.act(obs[None], None, actor.init_state(1))
    q = q[0]  # (n, A)
    a = learner.info.n_actions
    table = np.zeros((a, a))
    for u1 in range(a):
        for u2 in range(a):
            table[u1, u2] = learner.joint_value(
                q, np.array([u1, u2], dtype=np.int64), state, obs
            )
    return table, q


# -------------------------------------------------------------- policy actor


class PolicyActor(rollout.AgentActor):
    """Actor emitting categorical distributions (softmax of logits)."""

    def act(self, obs, last_actions, hidden):
        out, h = super().act(obs, last_actions, hidden)
        return _softmax_np(out), h


def _softmax_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _sample_categorical(p, rng):
    cdf = np.cumsum(p, axis=-1)
    u = rng.random((p.shape[0], 1)) * cdf[:, -1:]
    return (u > cdf[:, :-1]).sum(axis=-1).astype(np.int64)


# ----------------------------------------------------------------- metrics


METRIC_COLUMNS = (
    "env_steps", "episodes", "loss", "test_return_mean", "test_win_rate",
    "epsilon", "wall_ms",
)


class MetricLog:
    """Append-only eval rows; one row per evaluation point."""

    def __init__(self, meta: Optional[dict] = None):
        self.meta = dict(meta or {})
        self.rows: List[dict] = []

    def append(self, **kw):
        missing = set(METRIC_COLUMNS) - set(kw)
        if missing:
            raise ValueError(f"missing metric columns: {sorted(missing)}")
        self.rows.append({k: kw[k] for k in METRIC_COLUMNS})

    def to_csv(self) -> str:
        out = io.StringIO()
        for k, v in sorted(self.meta.items()):
            out.write(f"# {k}: {v}\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
        return out.getvalue()

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())

    @staticmethod
    def read_rows(path):
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        rdr = csv.DictReader(lines)
        return [
            {k: float(v) for k, v in row.items()} for row in rdr
        ]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# ------------------------------------------------------------- train loop


def make_learner(info: EnvInfo, cfg: TrainerConfig, rng=None):
    if cfg.algo in VALUE_ALGOS:
        return QLearner(info, cfg, rng)
    if cfg.algo == "vmix":
        return VmixLearner(info, cfg, rng)
    return RiitLearner(info, cfg, rng)


def _evaluate(learner, env_fn, cfg, seed, eval_round):
    pool = rollout.WorkerPool(
        env_fn, cfg.n_test_episodes, seed * 31 + 7_777_777 + eval_round
    )
    mode = "greedy"
    episodes = pool.collect(learner.actor(), epsilon=0.0, mode=mode, test_mode=True)
    returns_ = [e.ret for e in episodes]
    wins = [1.0 if (e.terminated.sum() > 0 and not e.truncated) else 0.0 for e in episodes]
    return float(np.mean(returns_)), float(np.mean(wins))


def train(cfg: TrainerConfig, env_fn, seed: int, log_path=None,
          meta: Optional[dict] = None) -> MetricLog:
    """Run one training; returns the MetricLog (flushed to log_path even on
    errors when a path is given)."""
    log = MetricLog(meta)
    try:
        _train_inner(cfg, env_fn, seed, log)
    finally:
        if log_path is not None:
            log.write(log_path)
    return log


def _train_inner(cfg, env_fn, seed, log):
    t0 = time.monotonic()
    probe = env_fn()
    info = EnvInfo.of(probe)
    rng = np.random.default_rng(seed)
    learner = make_learner(info, cfg, np.random.default_rng(seed + 1))
    pool = rollout.WorkerPool(env_fn, cfg.n_workers, seed)
    schedule = cfg.epsilon_schedule()
    value_based = cfg.algo in VALUE_ALGOS
    mode = "greedy" if value_based else "sample"
    buffer = rollout.ReplayBuffer(cfg.buffer_capacity)
    online = rollout.make_online_buffer(max(cfg.on_batch_size, cfg.n_workers))

    env_steps = 0
    episodes = 0
    last_loss = float("nan")
    next_eval = 0
    eval_round = 0

    def log_eval():
        nonlocal next_eval, eval_round
        ret, win = _evaluate(learner, env_fn, cfg, seed, eval_round)
        log.append(
            env_steps=env_steps,
            episodes=episodes,
            loss=last_loss,
            test_return_mean=ret,
            test_win_rate=win,
            epsilon=eps_now(),
            wall_ms=(time.monotonic() - t0) * 1000.0,
        )
        eval_round += 1
        next_eval += cfg.eval_interval

    def eps_now():
        if not value_based:
            return 0.0
        if cfg.eps_fixed is not None:
            return cfg.eps_fixed
        return rollout.epsilon_at(schedule, env_steps)

    while env_steps < cfg.total_env_steps:
        if env_steps >= next_eval:
            log_eval()
        batch_eps = pool.collect(learner.actor(), epsilon=eps_now(), mode=mode)
        for e in batch_eps:
            buffer.insert(e)
            online.insert(e)
            env_steps += e.length
            episodes += 1
        if value_based:
            if len(buffer) >= cfg.batch_size:
                last_loss = learner.update(buffer.sample(cfg.batch_size, rng))
        elif cfg.algo == "vmix":
            take = min(len(online), cfg.on_batch_size)
            losses = learner.update(online.latest(take), batch_tag=buffer.inserted)
            last_loss = losses["total"]
        else:  # riit / lica
            if len(buffer) >= cfg.off_batch_size and len(online) >= min(
                cfg.on_batch_size, online.capacity
            ):
                losses = riit_update(
                    learner,
                    buffer.sample(cfg.off_batch_size, rng),
                    online.latest(min(len(online), cfg.on_batch_size)),
                    rng,
                )
                last_loss = losses["critic_off"] + losses["critic_on"]
        maybe_update_targets(learner, episodes)
    if cfg.total_env_steps > 0:
        log_eval()  # final eval row; a zero-step run leaves just the header
    return learner


def train_with_learner(cfg, env_fn, seed, meta=None):
    """As train(), but also returns the learner (for tests and analysis)."""
    log = MetricLog(meta)
    learner = _train_inner(cfg, env_fn, seed, log)
    return log, learner
