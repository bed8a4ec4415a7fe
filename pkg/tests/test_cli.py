import json

import numpy as np
import pytest

from marlab import cli, trainers
from marlab.cli import ConfigError


# ------------------------------------------------------------ parse_config


def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{}")
    cfg = cli.parse_config(path=p)
    assert cfg.env["name"] == "matrix"
    assert cfg.trainer == trainers.TrainerConfig()
    assert cfg.n_seeds == 5
    assert cfg.base_seed == 0


def test_unknown_keys_are_named(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"trainner": {}, "trainer": {"lrr": 1}}))
    with pytest.raises(ConfigError) as ei:
        cli.parse_config(path=p)
    msg = str(ei.value)
    assert "trainner" in msg and "trainer.'lrr'" in msg


def test_range_error_names_lambda(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"trainer": {"lambda": 1.5}}))
    with pytest.raises(ConfigError) as ei:
        cli.parse_config(path=p)
    assert "trainer.lambda=1.5" in str(ei.value)


def test_multiple_range_errors_all_listed(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"trainer": {"lambda": -1, "lr": 0, "gamma": 2}}))
    with pytest.raises(ConfigError) as ei:
        cli.parse_config(path=p)
    msg = str(ei.value)
    assert "trainer.lambda=-1" in msg and "lr=0" in msg and "gamma=2" in msg


def test_invalid_json_reports_line(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "trainer": {,}\n}')
    with pytest.raises(ConfigError) as ei:
        cli.parse_config(path=p)
    assert "line 2" in str(ei.value)


def test_flag_overrides_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"trainer": {"lam": 0.9}}))
    cfg = cli.parse_config(path=p, flags=["--trainer.lambda=0.3", "--env.payoff=table7"])
    assert cfg.trainer.lam == 0.3
    assert cfg.env["payoff"] == "table7"


def test_flag_only_parsing():
    cfg = cli.parse_config(flags=["--n_seeds=2", "--trainer.optimizer=rmsprop"])
    assert cfg.n_seeds == 2
    assert cfg.trainer.optimizer == "rmsprop"


def test_malformed_flag_rejected():
    with pytest.raises(ConfigError):
        cli.parse_config(flags=["trainer.lam=0.3"])


def test_bad_env_rejected():
    with pytest.raises(ConfigError):
        cli.parse_config(flags=["--env.name=chess"])


def test_roundtrip_through_json(tmp_path):
    a = cli.parse_config(preset="table7-qmix")
    p = tmp_path / "dump.json"
    p.write_text(json.dumps(a.to_dict()))
    b = cli.parse_config(path=p)
    assert a == b
    assert a.hash() == b.hash()


# ---------------------------------------------------------------- presets


EXPECTED_PRESETS = {
    "table1-qmix", "table1-vdn", "table1-riit", "table1-riit-nomono",
    "table7-qmix",
    "pp-qmix", "pp-riit", "pp-riit-nomono", "pp-vmix", "pp-vmix-nomono",
    "trick-adam", "trick-rmsprop",
    "trick-qlambda-0", "trick-qlambda-0.3", "trick-qlambda-0.6",
    "trick-qlambda-0.9",
    "trick-buffer-5000", "trick-buffer-20000",
    "trick-workers-1", "trick-workers-4", "trick-workers-8",
    "trick-hidden-64", "trick-hidden-256",
    "trick-anneal-100k", "trick-anneal-500k",
}


def test_all_presets_exist_and_validate():
    presets = cli.list_presets()
    assert set(presets) == EXPECTED_PRESETS
    for cfg in presets.values():
        assert isinstance(cfg, cli.ExperimentConfig)


def test_unknown_preset_errors():
    with pytest.raises(ConfigError) as ei:
        cli.parse_config(preset="table9-qmix")
    assert "table9-qmix" in str(ei.value)


def test_trick_pairs_differ_in_exactly_one_trainer_key():
    presets = cli.list_presets()
    for members in cli.TRICK_PAIRS.values():
        base = presets[members[0]].to_dict()
        for other in members[1:]:
            cand = presets[other].to_dict()
            assert base["env"] == cand["env"]
            diff = {
                k for k in base["trainer"]
                if base["trainer"][k] != cand["trainer"][k]
            }
            assert len(diff) == 1, (members[0], other, diff)


def test_trick_pair_hashes_distinct():
    presets = cli.list_presets()
    assert presets["trick-adam"].hash() != presets["trick-rmsprop"].hash()


def test_table1_uses_full_exploration():
    cfg = cli.parse_config(preset="table1-qmix")
    assert cfg.trainer.eps_fixed == 1.0
    assert cfg.env["payoff"] == "table1"


def test_hash_ignores_out_dir():
    a = cli.parse_config(flags=["--out_dir=a"])
    b = cli.parse_config(flags=["--out_dir=b"])
    assert a.hash() == b.hash()
    c = cli.parse_config(flags=["--trainer.lr=0.002"])
    assert a.hash() != c.hash()


# ------------------------------------------------------- experiment runner


_TINY = [
    "--trainer.total_env_steps=6",
    "--trainer.batch_size=4",
    "--trainer.buffer_capacity=16",
    "--trainer.eval_interval=3",
    "--trainer.n_test_episodes=4",
    "--trainer.n_workers=1",
]


def test_run_experiment_single_seed_matches_csv(tmp_path):
    cfg = cli.parse_config(flags=_TINY + ["--n_seeds=1"])
    summary = cli.run_experiment(cfg, out_dir=tmp_path)
    rows = trainers.MetricLog.read_rows(tmp_path / "seed0.csv")
    assert [s["status"] for s in summary["seeds"]] == ["ok"]
    assert len(summary["eval"]) == len(rows)
    for agg, row in zip(summary["eval"], rows):
        assert agg["return_median"] == row["test_return_mean"]
        assert agg["return_min"] == agg["return_max"] == row["test_return_mean"]
        assert agg["win_median"] == row["test_win_rate"]
    meta = cli._read_meta(tmp_path / "seed0.csv")
    assert meta["config_hash"] == cfg.hash() == summary["config_hash"]
    saved = json.loads((tmp_path / "summary.json").read_text())
    assert saved["config_hash"] == cfg.hash()


def test_run_experiment_multi_seed_aggregates(tmp_path):
    cfg = cli.parse_config(flags=_TINY + ["--n_seeds=3"])
    summary = cli.run_experiment(cfg, out_dir=tmp_path)
    assert sorted(s["seed"] for s in summary["seeds"]) == [0, 1, 2]
    per_seed = [trainers.MetricLog.read_rows(tmp_path / f"seed{k}.csv")
                for k in range(3)]
    for i, agg in enumerate(summary["eval"]):
        rets = [rows[i]["test_return_mean"] for rows in per_seed]
        assert agg["return_median"] == np.median(rets)
        assert agg["return_min"] == min(rets)
        assert agg["return_max"] == max(rets)


def _fake_csv(path, seed, returns, chash="deadbeef0123"):
    log = trainers.MetricLog({"config_hash": chash, "seed": seed})
    for i, r in enumerate(returns):
        log.append(env_steps=i * 10, episodes=i, loss=0.0,
                   test_return_mean=r, test_win_rate=float(r > 1.5),
                   epsilon=1.0, wall_ms=1.0)
    log.write(path)


def test_eval_median_is_robust_to_outliers(tmp_path):
    for seed, ret in enumerate([1.0, 2.0, 100.0]):
        _fake_csv(tmp_path / f"seed{seed}.csv", seed, [ret, ret])
    summary = cli.recompute_summary(tmp_path)
    assert [r["return_median"] for r in summary["eval"]] == [2.0, 2.0]
    assert summary["eval"][0]["return_max"] == 100.0
    assert summary["config_hash"] == "deadbeef0123"
    assert (tmp_path / "summary.json").exists()


def test_eval_rejects_mixed_hashes(tmp_path):
    _fake_csv(tmp_path / "seed0.csv", 0, [1.0], chash="aaaa")
    _fake_csv(tmp_path / "seed1.csv", 1, [1.0], chash="bbbb")
    with pytest.raises(ConfigError):
        cli.recompute_summary(tmp_path)


def test_failed_seed_recorded_and_exit_nonzero(tmp_path, monkeypatch):
    calls = {"n": 0}
    real_train = trainers.train

    def flaky(cfg, env_fn, seed, log_path=None, meta=None):
        calls["n"] += 1
        if seed == 1:
            raise RuntimeError("env exploded")
        return real_train(cfg, env_fn, seed, log_path=log_path, meta=meta)

    monkeypatch.setattr(trainers, "train", flaky)
    rc = cli.main(["run", "--out", str(tmp_path), "--n_seeds=2"] + _TINY)
    assert rc == 1
    summary = json.loads((tmp_path / "summary.json").read_text())
    status = {s["seed"]: s["status"] for s in summary["seeds"]}
    assert status == {0: "ok", 1: "failed"}
    assert "env exploded" in summary["seeds"][1]["error"]
    assert summary["eval"]  # surviving seed still aggregated


def test_main_run_success_exit_zero(tmp_path):
    rc = cli.main(["run", "--out", str(tmp_path), "--n_seeds=1"] + _TINY)
    assert rc == 0
    assert (tmp_path / "summary.json").exists()


def test_main_config_error_exit_two(capsys):
    rc = cli.main(["run", "--trainer.lambda=7"])
    assert rc == 2
    assert "trainer.lambda=7" in capsys.readouterr().err


def test_main_list_presets(capsys):
    assert cli.main(["list-presets"]) == 0
    out = capsys.readouterr().out.split()
    assert set(out) == EXPECTED_PRESETS


def test_area_under_curve():
    rows = [{"env_steps": 0, "return_median": 0.0},
            {"env_steps": 10, "return_median": 2.0},
            {"env_steps": 20, "return_median": 2.0}]
    assert cli.area_under_curve(rows) == pytest.approx(30.0)
