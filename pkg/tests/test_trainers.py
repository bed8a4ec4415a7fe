import numpy as np
import pytest

from marlab import autodiff as ad
from marlab import envs, nets, rollout, trainers
from marlab.trainers import (
    EnvInfo,
    MetricLog,
    TrainerConfig,
    a2c_advantage,
    make_learner,
    matrix_joint_q,
    maybe_update_targets,
    q_learner_update,
    riit_update,
    train,
    vmix_update,
)


def matrix_fn():
    return envs.MatrixGame(envs.MatrixGameSpec(envs.TABLE1_PAYOFF))


def pp_fn():
    return envs.PredatorPrey(
        envs.PredatorPreySpec(width=5, height=5, n_predators=3, n_prey=1, episode_limit=8)
    )


def tiny_cfg(**kw):
    kw.setdefault("hidden", 8)
    kw.setdefault("mixer_embed", 4)
    kw.setdefault("total_env_steps", 0)
    return TrainerConfig(**kw)


def collect_batch(learner, env_fn, n_eps, seed=1, mode="greedy", epsilon=1.0):
    pool = rollout.WorkerPool(env_fn, n_eps, seed)
    if mode == "sample":
        return rollout.batch_episodes(pool.collect(learner.actor(), mode="sample"))
    return rollout.batch_episodes(pool.collect(learner.actor(), epsilon=epsilon))


# ------------------------------------------------------------------ config


def test_config_validation_lists_all_errors():
    with pytest.raises(ValueError, match="gamma.*lam"):
        TrainerConfig(gamma=1.5, lam=2.0)
    with pytest.raises(ValueError, match="unknown algo"):
        TrainerConfig(algo="dop")
    with pytest.raises(ValueError):
        TrainerConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        TrainerConfig(eps_fixed=1.5)
    with pytest.raises(ValueError):
        TrainerConfig(batch_size=0)


# --------------------------------------------------------- q-learner basics


def test_vdn_one_step_loss_hand_value():
    # 1 agent, 1 action, lambda = 0: loss = (r + gamma*Q_target - Q)^2
    info = EnvInfo(obs_dim=2, state_dim=1, n_agents=1, n_actions=1)
    cfg = tiny_cfg(algo="vdn", lam=0.0, gamma=0.9)
    learner = make_learner(info, cfg, np.random.default_rng(0))
    batch = rollout.EpisodeBatch(
        obs=np.ones((1, 2, 1, 2)) * 0.3,
        state=np.zeros((1, 2, 1)),
        actions=np.zeros((1, 1, 1), dtype=np.int64),
        reward=np.array([[1.5]]),
        terminated=np.zeros((1, 1)),
        mask=np.ones((1, 1)),
    )
    agent = learner.modules["agent"]
    p = agent.constants()
    inputs = trainers._agent_inputs_full(batch, 1, 1)
    q_seq = agent.forward_seq(p, inputs).data[:, 0, 0]  # Q at t=0, 1
    expect = (1.5 + 0.9 * q_seq[1] - q_seq[0]) ** 2
    loss = q_learner_update(learner, batch)
    assert abs(loss - expect) < 1e-12


def test_all_masked_batch_raises():
    info = EnvInfo(obs_dim=2, state_dim=1, n_agents=2, n_actions=3)
    batch = rollout.EpisodeBatch(
        obs=np.zeros((1, 2, 2, 2)),
        state=np.zeros((1, 2, 1)),
        actions=np.zeros((1, 1, 2), dtype=np.int64),
        reward=np.zeros((1, 1)),
        terminated=np.zeros((1, 1)),
        mask=np.zeros((1, 1)),
    )
    q = make_learner(info, tiny_cfg(algo="qmix"), np.random.default_rng(0))
    with pytest.raises(ValueError, match="mask"):
        q.update(batch)
    r = make_learner(info, tiny_cfg(algo="riit"), np.random.default_rng(0))
    with pytest.raises(ValueError, match="mask"):
        r.critic_update_offline(batch, np.random.default_rng(0))
    v = make_learner(info, tiny_cfg(algo="vmix"), np.random.default_rng(0))
    with pytest.raises(ValueError, match="mask"):
        v.update(batch, batch_tag=0)


def _fd_check(learner, loss_fn, module_names, n_coords=6, h=1e-5, tol=1e-4):
    """Compare tape gradients of loss_fn() against central differences on a
    random sample of coordinates of each module's parameters."""
    tape, lifted, loss = loss_fn()
    gradmap = tape.backward(loss)
    rng = np.random.default_rng(0)
    worst = 0.0
    for name in module_names:
        mod = learner.modules[name]
        grads = mod.grads_by_name(tape, lifted[name], gradmap)
        for k, arr in mod.params.items():
            flat = arr.ravel()
            for idx in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                up = float(loss_fn()[2].data)
                flat[idx] = orig - h
                dn = float(loss_fn()[2].data)
                flat[idx] = orig
                fd = (up - dn) / (2 * h)
                an = grads[k].ravel()[idx]
                rel = abs(an - fd) / max(1.0, abs(an))
                worst = max(worst, rel)
    assert worst < tol, worst


@pytest.mark.parametrize("algo", ["vdn", "qmix", "qatten", "qplex", "ow-qmix"])
def test_q_learner_gradients_match_fd(algo):
    cfg = tiny_cfg(algo=algo, lam=0.5)
    learner = make_learner(EnvInfo.of(matrix_fn()), cfg, np.random.default_rng(0))
    batch = collect_batch(learner, matrix_fn, 3)
    names = list(learner.modules)
    weights = None
    if algo == "ow-qmix":
        # the optimism weights are a step function of q_tot; pin them so
        # finite differences probe the same (weight-frozen) loss the
        # analytic gradient differentiates
        _, _, loss = learner.forward_loss(batch)
        n_rows = batch.reward.size
        weights = np.full(n_rows, 0.6)
    _fd_check(learner, lambda: learner.forward_loss(batch, fixed_weights=weights), names)


def test_riit_policy_gradient_matches_fd():
    cfg = tiny_cfg(algo="riit")
    learner = make_learner(EnvInfo.of(matrix_fn()), cfg, np.random.default_rng(0))
    batch = collect_batch(learner, matrix_fn, 3, mode="sample")

    def loss_fn():
        tape, lifted, main_loss, _ = learner.policy_loss(batch)
        return tape, lifted, main_loss

    _fd_check(learner, loss_fn, ["policy"])


def test_riit_critic_gradient_matches_fd():
    cfg = tiny_cfg(algo="riit")
    learner = make_learner(EnvInfo.of(pp_fn()), cfg, np.random.default_rng(0))
    batch = collect_batch(learner, pp_fn, 2, mode="sample")
    boot = learner._bootstrap(batch, np.random.default_rng(3))
    from marlab import returns as R

    y = R.one_step_targets(batch.reward, boot, batch.terminated, batch.mask, cfg.gamma)

    def loss_fn():
        tape, lifted, loss, _ = learner.critic_loss(batch, y)
        return tape, lifted, loss

    _fd_check(learner, loss_fn, ["critic", "utility"], n_coords=3)


def test_vmix_gradient_matches_fd():
    cfg = tiny_cfg(algo="vmix", lam=0.8, optimizer="rmsprop")
    learner = make_learner(EnvInfo.of(pp_fn()), cfg, np.random.default_rng(0))
    batch = collect_batch(learner, pp_fn, 2, mode="sample")

    # freeze targets and advantages: forward_loss recomputes the advantage
    # from live values, so FD must perturb only the policy/mixer inputs of
    # the differentiated loss. Perturbing value params changes adv (treated
    # as a constant by the loss), so check policy params only plus the
    # value loss via the value/mixer modules with adv contribution constant.
    def loss_fn():
        tape, lifted, v_loss, pg, loss = learner.forward_loss(batch)
        return tape, lifted, pg

    _fd_check(learner, loss_fn, ["policy"], n_coords=4)


# ------------------------------------------------------------ invariants


def test_padding_invariance_of_loss_and_grads():
    cfg = tiny_cfg(algo="qmix", lam=0.6)
    learner = make_learner(EnvInfo.of(pp_fn()), cfg, np.random.default_rng(0))
    batch = collect_batch(learner, pp_fn, 3)

    def padded(b, extra):
        z = lambda shape: np.zeros(shape)
        return rollout.EpisodeBatch(
            obs=np.concatenate([b.obs, z((3, extra) + b.obs.shape[2:])], axis=1),
            state=np.concatenate([b.state, z((3, extra) + b.state.shape[2:])], axis=1),
            actions=np.concatenate(
                [b.actions, np.zeros((3, extra) + b.actions.shape[2:], dtype=np.int64)],
                axis=1,
            ),
            reward=np.concatenate([b.reward, z((3, extra))], axis=1),
            terminated=np.concatenate([b.terminated, z((3, extra))], axis=1),
            mask=np.concatenate([b.mask, z((3, extra))], axis=1),
        )

    tape1, lifted1, loss1 = learner.forward_loss(batch)
    g1 = tape1.backward(loss1)
    grads1 = learner.modules["mixer"].grads_by_name(tape1, lifted1["mixer"], g1)
    tape2, lifted2, loss2 = learner.forward_loss(padded(batch, 3))
    g2 = tape2.backward(loss2)
    grads2 = learner.modules["mixer"].grads_by_name(tape2, lifted2["mixer"], g2)
    assert abs(float(loss1.data) - float(loss2.data)) < 1e-12
    for k in grads1:
        np.testing.assert_allclose(grads1[k], grads2[k], atol=1e-12)


def test_targets_use_target_params_only():
    cfg = tiny_cfg(algo="qmix")
    learner = make_learner(EnvInfo.of(matrix_fn()), cfg, np.random.default_rng(0))
    batch = collect_batch(learner, matrix_fn, 4)
    y1 = learner._build_targets(batch)
    for m in learner.modules.values():
        for arr in m.params.values():
            arr += 0.37  # mutate every live parameter
    y2 = learner._build_targets(batch)
    np.testing.assert_array_equal(y1, y2)


def test_riit_constrain_switch_changes_only_abs():
    info = EnvInfo.of(pp_fn())
    on = make_learner(info, tiny_cfg(algo="riit", constrain=True), np.random.default_rng(0))
    off = make_learner(info, tiny_cfg(algo="riit", constrain=False), np.random.default_rng(0))
    assert on.modules["critic"].param_count() == off.modules["critic"].param_count()
    assert {k: v.shape for k, v in on.modules["critic"].params.items()} == {
        k: v.shape for k, v in off.modules["critic"].params.items()
    }


def test_greedy_consistency_constrained_qmix():
    # IGM: joint argmax of the 3x3 enumerated Q_tot equals per-agent argmaxes
    cfg = TrainerConfig(
        algo="qmix", total_env_steps=600, batch_size=32, hidden=16,
        mixer_embed=8, eps_fixed=1.0, eval_interval=600, n_test_episodes=4,
    )
    log, learner = trainers.train_with_learner(cfg, matrix_fn, seed=2)
    table, q = matrix_joint_q(learner, matrix_fn())
    joint = np.unravel_index(np.argmax(table), table.shape)
    assert joint == (int(np.argmax(q[0])), int(np.argmax(q[1])))


# ------------------------------------------------------------- riit details


def test_riit_entropy_uniform_and_deterministic():
    cfg = tiny_cfg(algo="riit")
    learner = make_learner(EnvInfo.of(matrix_fn()), cfg, np.random.default_rng(0))
    batch = collect_batch(learner, matrix_fn, 3, mode="sample")
    # zero policy params -> uniform distributions -> H = ln(n_actions)
    for arr in learner.modules["policy"].params.values():
        arr[...] = 0.0
    _, ent = learner.policy_update(batch)
    assert abs(ent - np.log(3)) < 1e-9
    # near-deterministic policy -> H ~ 0
    learner2 = make_learner(EnvInfo.of(matrix_fn()), cfg, np.random.default_rng(0))
    for k, arr in learner2.modules["policy"].params.items():
        arr[...] = 0.0
    learner2.modules["policy"].params["fc_out.b"][0] = 50.0
    _, ent2 = learner2.policy_update(batch)
    assert ent2 < 1e-9


def test_riit_buffer_underflow():
    cfg = tiny_cfg(algo="riit", off_batch_size=8)
    learner = make_learner(EnvInfo.of(matrix_fn()), cfg, np.random.default_rng(0))
    buf = rollout.ReplayBuffer(10)
    pool = rollout.WorkerPool(matrix_fn, 2, 3)
    buf.extend(pool.collect(learner.actor(), mode="sample"))
    with pytest.raises(ValueError):
        buf.sample(cfg.off_batch_size, np.random.default_rng(0))


# ------------------------------------------------------------- vmix details


def test_a2c_advantage_formula():
    r = np.array([[1.0, 2.0]])
    v = np.array([[0.5, 0.3, 0.9]])
    term = np.array([[0.0, 1.0]])
    mask = np.ones((1, 2))
    adv = a2c_advantage(r, v, term, mask, 0.9)
    assert abs(adv[0, 0] - (1.0 + 0.9 * 0.3 - 0.5)) < 1e-12
    assert abs(adv[0, 1] - (2.0 - 0.3)) < 1e-12  # terminal: gamma-term drops


def test_vmix_zero_advantage_keeps_policy_fixed():
    cfg = tiny_cfg(algo="vmix", lam=0.8, optimizer="rmsprop", entropy_coef=0.0)
    learner = make_learner(EnvInfo.of(pp_fn()), cfg, np.random.default_rng(0))
    batch = collect_batch(learner, pp_fn, 2, mode="sample")
    batch.reward[...] = 0.0  # zero rewards
    for name in ("value", "mixer"):
        for arr in learner.modules[name].params.values():
            arr[...] = 0.0
        for arr in learner.targets[name].params.values():
            arr[...] = 0.0
    before = {k: v.copy() for k, v in learner.modules["policy"].params.items()}
    learner.update(batch, batch_tag=1)
    for k, v in learner.modules["policy"].params.items():
        np.testing.assert_array_equal(v, before[k])


def test_vmix_rejects_stale_batch():
    cfg = tiny_cfg(algo="vmix", lam=0.8, optimizer="rmsprop")
    learner = make_learner(EnvInfo.of(pp_fn()), cfg, np.random.default_rng(0))
    batch = collect_batch(learner, pp_fn, 2, mode="sample")
    vmix_update(learner, batch, 5)
    with pytest.raises(ValueError, match="stale"):
        vmix_update(learner, batch, 5)


# ---------------------------------------------------------- target cadence


def test_target_update_cadence():
    cfg = tiny_cfg(algo="qmix", target_update_interval=200)
    learner = make_learner(EnvInfo.of(matrix_fn()), cfg, np.random.default_rng(0))
    learner.modules["agent"].params["fc_out.b"] += 1.0
    assert not maybe_update_targets(learner, 199)
    assert not np.allclose(
        learner.targets["agent"].params["fc_out.b"],
        learner.modules["agent"].params["fc_out.b"],
    )
    assert maybe_update_targets(learner, 200)
    np.testing.assert_array_equal(
        learner.targets["agent"].params["fc_out.b"],
        learner.modules["agent"].params["fc_out.b"],
    )
    assert not maybe_update_targets(learner, 201)
    assert not maybe_update_targets(learner, 399)
    # between copies targets are constant even if live params move
    learner.modules["agent"].params["fc_out.b"] += 5.0
    snapshot = learner.targets["agent"].params["fc_out.b"].copy()
    assert not maybe_update_targets(learner, 399)
    np.testing.assert_array_equal(learner.targets["agent"].params["fc_out.b"], snapshot)
    assert maybe_update_targets(learner, 400)


# -------------------------------------------------------------- metric log


def test_metric_log_roundtrip(tmp_path):
    log = MetricLog({"config_hash": "abc123"})
    log.append(
        env_steps=100, episodes=10, loss=0.5, test_return_mean=1.25,
        test_win_rate=0.5, epsilon=0.9, wall_ms=12.0,
    )
    path = tmp_path / "m.csv"
    log.write(path)
    text = path.read_text()
    assert text.startswith("# config_hash: abc123\n")
    rows = MetricLog.read_rows(path)
    assert rows[0]["test_return_mean"] == 1.25
    with pytest.raises(ValueError, match="missing"):
        log.append(env_steps=1)


# -------------------------------------------------------------- train loop


def test_train_zero_steps_gives_header_only(tmp_path):
    cfg = tiny_cfg(algo="qmix", total_env_steps=0)
    path = tmp_path / "log.csv"
    log = train(cfg, matrix_fn, seed=0, log_path=path)
    assert log.rows == []
    assert path.read_text().strip() == ",".join(trainers.METRIC_COLUMNS)


def test_train_matrix_smoke_and_determinism():
    cfg = TrainerConfig(
        algo="qmix", total_env_steps=800, batch_size=16, hidden=16,
        mixer_embed=8, eps_fixed=1.0, eval_interval=400, n_test_episodes=4,
    )
    log1 = train(cfg, matrix_fn, seed=0)
    log2 = train(cfg, matrix_fn, seed=0)
    assert len(log1.rows) >= 2

    def strip(log):
        return [{k: v for k, v in r.items() if k != "wall_ms"} for r in log.rows[1:]]

    assert strip(log1) == strip(log2)


def test_train_flushes_log_on_error(tmp_path):
    cfg = tiny_cfg(algo="qmix", total_env_steps=100, batch_size=2)

    calls = {"n": 0}

    def flaky_fn():
        calls["n"] += 1
        if calls["n"] > 3:
            raise RuntimeError("env exploded")
        return matrix_fn()

    path = tmp_path / "log.csv"
    with pytest.raises(RuntimeError):
        train(cfg, flaky_fn, seed=0, log_path=path)
    assert path.exists()  # header flushed despite the abort
