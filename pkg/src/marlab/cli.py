"""Experiment runner: JSON configs with dotted-flag overrides, presets,
seed fan-out, and across-seed median aggregation.

Config document shape (all keys optional, defaults filled):

    {
      "env": {"name": "matrix" | "pp", ...environment parameters},
      "trainer": {...TrainerConfig fields; "lambda" is accepted for "lam"},
      "n_seeds": 5,
      "base_seed": 0,
      "out_dir": "runs/exp"
    }

Every output file embeds the config hash (sha256 of the canonical config
JSON, first 12 hex digits) so outputs from different configs cannot be
mixed silently.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import envs, trainers

_TRAINER_FIELDS = {f.name for f in dataclasses.fields(trainers.TrainerConfig)}
_TOP_KEYS = ("env", "trainer", "n_seeds", "base_seed", "out_dir")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    trainer: trainers.TrainerConfig
    env: Dict
    n_seeds: int = 5
    base_seed: int = 0
    out_dir: Optional[str] = None

    def to_dict(self):
        t = dataclasses.asdict(self.trainer)
        return {
            "env": dict(self.env),
            "trainer": t,
            "n_seeds": self.n_seeds,
            "base_seed": self.base_seed,
            "out_dir": self.out_dir,
        }

    def hash(self) -> str:
        doc = self.to_dict()
        doc.pop("out_dir")  # where outputs land doesn't change the experiment
        canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def env_fn(self):
        kw = dict(self.env)
        name = kw.pop("name")
        return lambda: envs.make_env(name, **kw)


def _merge(base: dict, override: dict, prefix=""):
    for k, v in override.items():
        path = f"{prefix}{k}"
        if k in ("env", "trainer") and prefix == "":
            if not isinstance(v, dict):
                raise ConfigError(f"{path} must be an object")
            base.setdefault(k, {})
            base[k].update(v)
        else:
            base[k] = v
    return base


def _validate_doc(doc: dict) -> ExperimentConfig:
    errs = []
    for k in doc:
        if k not in _TOP_KEYS:
            errs.append(f"unknown key {k!r}")
    env = dict(doc.get("env", {"name": "matrix"}))
    env.setdefault("name", "matrix")
    traw = dict(doc.get("trainer", {}))
    if "lambda" in traw:
        traw["lam"] = traw.pop("lambda")
    for k in traw:
        if k not in _TRAINER_FIELDS:
            errs.append(f"unknown key trainer.{k!r}")
    if errs:
        raise ConfigError("; ".join(errs))
    try:
        tcfg = trainers.TrainerConfig(**traw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"trainer: {e}".replace("lam=", "trainer.lambda=")) from e
    name = env.get("name")
    try:
        envs.make_env(name, **{k: v for k, v in env.items() if k != "name"})
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError(f"env: {e}") from e
    n_seeds = doc.get("n_seeds", 5)
    base_seed = doc.get("base_seed", 0)
    if not isinstance(n_seeds, int) or n_seeds < 1:
        raise ConfigError(f"n_seeds={n_seeds!r} must be a positive integer")
    return ExperimentConfig(
        trainer=tcfg, env=env, n_seeds=n_seeds, base_seed=base_seed,
        out_dir=doc.get("out_dir"),
    )


def _parse_flag_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_flag(doc: dict, flag: str):
    if not flag.startswith("--") or "=" not in flag:
        raise ConfigError(f"malformed flag {flag!r}; expected --dotted.key=value")
    key, _, value = flag[2:].partition("=")
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"flag {flag!r}: {p!r} is not an object")
    node[parts[-1]] = _parse_flag_value(value)


def parse_config(path=None, flags=(), preset: Optional[str] = None) -> ExperimentConfig:
    """Resolution order: preset < file < flags; then validate."""
    doc: dict = {}
    if preset is not None:
        doc = copy.deepcopy(_preset_doc(preset))
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
            loaded = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        _merge(doc, loaded)
    for flag in flags:
        _apply_flag(doc, flag)
    return _validate_doc(doc)


# ----------------------------------------------------------------- presets


def _matrix_preset(algo, payoff="table1", **trainer):
    base = {
        "env": {"name": "matrix", "payoff": payoff},
        "trainer": {
            "algo": algo,
            "total_env_steps": 20_000,
            "batch_size": 128,
            "buffer_capacity": 5000,
            "hidden": 64,
            "mixer_embed": 32,
            "eval_interval": 2000,
            "n_workers": 8,
        },
        "n_seeds": 5,
    }
    if algo in trainers.VALUE_ALGOS:
        base["trainer"]["eps_fixed"] = 1.0  # full exploration coverage
    base["trainer"].update(trainer)
    return base


_PP_ENV = {
    "name": "pp",
    "width": 5,
    "height": 5,
    "n_predators": 3,
    "n_prey": 1,
    "episode_limit": 50,
    "capture_reward": 10,
    "lone_catch_penalty": 0,
    "obs_radius": 2,
}


def _pp_preset(algo, **trainer):
    base = {
        "env": dict(_PP_ENV),
        "trainer": {
            "algo": algo,
            "total_env_steps": 2_000_000,
            "n_workers": 8,
            "hidden": 64,
            "mixer_embed": 32,
            "eval_interval": 50_000,
            "eps_anneal": 100_000,
        },
        "n_seeds": 5,
    }
    if algo == "vmix":
        base["trainer"].update({"lam": 0.8, "optimizer": "rmsprop", "lr": 0.0005})
    if algo == "lica":
        base["trainer"]["entropy_coef"] = 0.06
    base["trainer"].update(trainer)
    return base


def _trick_preset(**trainer):
    # trick studies toggle one knob on a QMIX DEPP baseline
    base = _pp_preset("qmix", total_env_steps=100_000)
    base["trainer"].update(trainer)
    return base


def _build_presets():
    p = {
        "table1-qmix": _matrix_preset("qmix"),
        "table1-vdn": _matrix_preset("vdn"),
        "table1-riit": _matrix_preset("riit", off_batch_size=64, on_batch_size=32),
        "table1-riit-nomono": _matrix_preset(
            "riit", off_batch_size=64, on_batch_size=32, constrain=False
        ),
        "table7-qmix": _matrix_preset("qmix", payoff="table7"),
        "pp-qmix": _pp_preset("qmix"),
        "pp-riit": _pp_preset("riit"),
        "pp-riit-nomono": _pp_preset("riit", constrain=False),
        "pp-vmix": _pp_preset("vmix"),
        "pp-vmix-nomono": _pp_preset("vmix", constrain=False),
        # trick pairs: each member differs from its partner in exactly one key
        "trick-adam": _trick_preset(optimizer="adam"),
        "trick-rmsprop": _trick_preset(optimizer="rmsprop"),
        "trick-buffer-5000": _trick_preset(buffer_capacity=5000),
        "trick-buffer-20000": _trick_preset(buffer_capacity=20000),
        "trick-workers-1": _trick_preset(n_workers=1),
        "trick-workers-4": _trick_preset(n_workers=4),
        "trick-workers-8": _trick_preset(n_workers=8),
        "trick-hidden-64": _trick_preset(hidden=64),
        "trick-hidden-256": _trick_preset(hidden=256),
        "trick-anneal-100k": _trick_preset(eps_anneal=100_000),
        "trick-anneal-500k": _trick_preset(eps_anneal=500_000),
    }
    for lam in (0, 0.3, 0.6, 0.9):
        name = f"trick-qlambda-{lam:g}"
        p[name] = _trick_preset(lam=lam)
    return p


_PRESETS = _build_presets()

TRICK_PAIRS = {
    "adam-vs-rmsprop": ("trick-adam", "trick-rmsprop"),
    "buffer": ("trick-buffer-5000", "trick-buffer-20000"),
    "hidden": ("trick-hidden-64", "trick-hidden-256"),
    "anneal": ("trick-anneal-100k", "trick-anneal-500k"),
    "qlambda": tuple(f"trick-qlambda-{l:g}" for l in (0, 0.3, 0.6, 0.9)),
    "workers": ("trick-workers-1", "trick-workers-4", "trick-workers-8"),
}


def _preset_doc(name: str) -> dict:
    if name not in _PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(sorted(_PRESETS))}"
        )
    return _PRESETS[name]


def list_presets() -> Dict[str, ExperimentConfig]:
    """All shipped presets, each validated."""
    return {name: parse_config(preset=name) for name in sorted(_PRESETS)}


# -------------------------------------------------------------- experiment


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Train n_seeds independent runs and aggregate medians across seeds.

    Writes seed<k>.csv per seed plus summary.json; per-seed failures are
    recorded in the summary instead of aborting the whole experiment."""
    out = Path(out_dir if out_dir is not None else (cfg.out_dir or "."))
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.hash()
    env_fn = cfg.env_fn()
    seeds = []
    logs = {}
    for k in range(cfg.n_seeds):
        seed = cfg.base_seed + k
        csv_path = out / f"seed{seed}.csv"
        entry = {"seed": seed, "csv": csv_path.name, "status": "ok"}
        try:
            log = trainers.train(
                cfg.trainer, env_fn, seed, log_path=csv_path,
                meta={"config_hash": chash, "seed": seed},
            )
            logs[seed] = log.rows
        except Exception as e:  # noqa: BLE001 - recorded, not swallowed silently
            entry["status"] = "failed"
            entry["error"] = f"{type(e).__name__}: {e}"
        seeds.append(entry)
    summary = {
        "config_hash": chash,
        "config": cfg.to_dict(),
        "seeds": seeds,
        "eval": _aggregate(logs),
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def _aggregate(logs: Dict[int, List[dict]]) -> List[dict]:
    """Across-seed median/min/max per eval row index."""
    if not logs:
        return []
    n_rows = min(len(rows) for rows in logs.values())
    out = []
    for i in range(n_rows):
        rets = [rows[i]["test_return_mean"] for rows in logs.values()]
        wins = [rows[i]["test_win_rate"] for rows in logs.values()]
        steps = [rows[i]["env_steps"] for rows in logs.values()]
        out.append(
            {
                "env_steps": int(np.median(steps)),
                "return_median": float(np.median(rets)),
                "return_min": float(np.min(rets)),
                "return_max": float(np.max(rets)),
                "win_median": float(np.median(wins)),
                "win_min": float(np.min(wins)),
                "win_max": float(np.max(wins)),
            }
        )
    return out


def recompute_summary(run_dir) -> dict:
    """Rebuild summary.json from the per-seed CSVs in run_dir."""
    run_dir = Path(run_dir)
    logs = {}
    hashes = set()
    seeds = []
    for csv_path in sorted(run_dir.glob("seed*.csv")):
        meta = _read_meta(csv_path)
        hashes.add(meta.get("config_hash", ""))
        seed = int(meta.get("seed", csv_path.stem.replace("seed", "") or -1))
        logs[seed] = trainers.MetricLog.read_rows(csv_path)
        seeds.append({"seed": seed, "csv": csv_path.name, "status": "ok"})
    if len(hashes) > 1:
        raise ConfigError(
            f"{run_dir}: seed CSVs carry different config hashes {sorted(hashes)}"
        )
    summary = {
        "config_hash": next(iter(hashes)) if hashes else "",
        "seeds": seeds,
        "eval": _aggregate(logs),
    }
    with open(run_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def _read_meta(path) -> dict:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("# "):
                break
            k, _, v = line[2:].strip().partition(": ")
            meta[k] = v
    return meta


def area_under_curve(rows: List[dict]) -> float:
    """Trapezoidal area under the test-return learning curve."""
    xs = np.array([r["env_steps"] for r in rows], dtype=float)
    ys = np.array([r["return_median"] if "return_median" in r
                   else r["test_return_mean"] for r in rows], dtype=float)
    if len(xs) < 2:
        return 0.0
    return float(np.trapezoid(ys, xs))


# --------------------------------------------------------------------- cli


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="marlab")
    sub = parser.add_subparsers(dest="cmd", required=True)
    run_p = sub.add_parser("run", help="run an experiment")
    run_p.add_argument("--config", help="JSON config path")
    run_p.add_argument("--preset", help="named preset (see list-presets)")
    run_p.add_argument("--out", help="output directory", default=None)
    eval_p = sub.add_parser("eval", help="recompute summary.json from CSVs")
    eval_p.add_argument("--dir", required=True)
    sub.add_parser("list-presets", help="print available presets")
    args, overrides = parser.parse_known_args(argv)
    if overrides and args.cmd != "run":
        parser.error(f"unrecognized arguments: {' '.join(overrides)}")

    if args.cmd == "list-presets":
        for name in sorted(_PRESETS):
            print(name)
        return 0
    if args.cmd == "eval":
        try:
            recompute_summary(args.dir)
        except (ConfigError, OSError) as e:
            print(f"error: {e}", file=sys.stderr)
            return 1
        return 0
    try:
        cfg = parse_config(path=args.config, flags=overrides, preset=args.preset)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    summary = run_experiment(cfg, out_dir=args.out)
    failed = [s for s in summary["seeds"] if s["status"] != "ok"]
    for s in failed:
        print(f"seed {s['seed']} failed: {s['error']}", file=sys.stderr)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
