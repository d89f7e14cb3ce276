"""Command-line entry point: ``kbse train | eval | certify | inspect``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .agent import PolicyParams, ReplayBuffer, Transition, act
from .barrier import BarrierModel, CorruptBarrierFile, InvalidBarrier, barrier_summary, certify
from .envs import ENV_NAMES, make_env
from .loop import RunConfig, config_dict, run_kbse_full
from .shield import fit_local_dynamics, safe_action

log = logging.getLogger("kbse")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# published values for the pendulum benchmark, shown for comparison only
REFERENCE = {
    "pendulum": {"safety_probability": 0.643, "violation_p90_pct": 81.60, "avg_reward": -164.68},
    "mountain_car": {"safety_probability": 0.572, "violation_p90_pct": 82.14, "avg_reward": 93.04},
    "inverted_pendulum": {"safety_probability": 0.972, "violation_p90_pct": 7.05, "avg_reward": 1000.0},
}

# section -> {key: RunConfig field}
CONFIG_KEYS = {
    "env": {"name": "env", "noise_sigma": "noise_sigma", "episode_length": "episode_length"},
    "run": {
        "training_horizon": "training_horizon", "epoch_length": "epoch_length",
        "barrier_sample_size": "barrier_sample_size", "zeta": "zeta", "seed": "seed",
        "warmup_steps": "warmup_steps",
    },
    "kernel": {
        "bandwidth_state": "bandwidth_state", "bandwidth_state_action": "bandwidth_state_action",
        "regularization_lambda": "regularization_lambda", "ridge_lambda": "ridge_lambda",
        "c_mode": "c_mode",
    },
    "shield": {"window": "shield_window", "margin": "shield_margin", "preemptive": "preemptive_shield"},
    "policy": {
        "hidden": "hidden", "batch_size": "batch_size", "learning_rate": "learning_rate",
        "critic_learning_rate": "critic_learning_rate", "tau": "tau",
        "discount_gamma": "discount_gamma", "exploration_sigma": "exploration_sigma",
    },
}


class ConfigError(ValueError):
    pass


def _convert(field_name: str, raw: str):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    kind = str(kinds[field_name])
    raw = raw.strip()
    try:
        if field_name == "hidden":
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if field_name in ("env", "c_mode"):
            return raw
        if field_name == "preemptive_shield":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if raw.lower() in ("", "auto", "none") and "None" in kind:
            return None
        if kind.startswith("int"):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {field_name!r}: {raw!r}") from None


def load_config(path) -> RunConfig:
    """Parse an INI-style config file into a :class:`RunConfig`."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in CONFIG_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in CONFIG_KEYS[section]:
                raise ConfigError(f"unknown config key {key!r} in section [{section}]")
            target = CONFIG_KEYS[section][key]
            values[target] = _convert(target, raw)
    cfg = RunConfig(**values)
    if cfg.env not in ENV_NAMES:
        raise ConfigError(f"unknown env {cfg.env!r}; choose from {', '.join(ENV_NAMES)}")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    d = config_dict(cfg)
    for section, keys in CONFIG_KEYS.items():
        parser[section] = {}
        for key, target in keys.items():
            val = d[target]
            if val is None:
                val = "auto"
            elif isinstance(val, list):
                val = " ".join(str(v) for v in val)
            parser[section][key] = str(val)
    from io import StringIO
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def certificate_sentence(model: BarrierModel) -> str:
    if not model.valid:
        return "invalid barrier: no safety guarantee"
    return (f"P(reach unsafe set within {model.horizon_T} steps) <= {model.delta:.6g}, "
            f"i.e. safety probability >= {1 - model.delta:.6g}, with confidence {1 - model.zeta:.6g}")


def build_summary(cfg: RunConfig, barrier: BarrierModel | None, metrics) -> dict:
    eps = metrics.episodes
    summary = {
        "env": cfg.env,
        "seed": cfg.seed,
        "training_horizon": cfg.training_horizon,
        "episodes": len(eps),
        "total_violations": metrics.total_violations,
        "violation_p90_pct": metrics.violation_percentile(90.0),
        "shield_interventions": metrics.shield_interventions,
        "mean_episode_reward": float(np.mean([e["reward"] for e in eps])) if eps else None,
        "interrupted": metrics.interrupted,
        "wall_clock_s": metrics.wall_clock_s,
        "barrier_valid": barrier is not None and barrier.valid,
        "confidence": 1.0 - cfg.zeta,
        "zeta": cfg.zeta,
        "reference": REFERENCE.get(cfg.env),
    }
    if barrier is not None and barrier.valid:
        summary.update({
            "delta": barrier.delta,
            "safety_probability": 1.0 - barrier.delta,
            "delta_minmax": barrier.delta_minmax,
            "vacuous": barrier.delta >= 1.0,
            "certificate": certificate_sentence(barrier),
            "barrier": barrier_summary(barrier),
        })
    else:
        summary.update({
            "delta": None, "safety_probability": None, "delta_minmax": None, "vacuous": None,
            "certificate": "no valid barrier", "barrier": None,
        })
    return summary


def write_run(out: Path, cfg: RunConfig, policy: PolicyParams, barrier, metrics, buffer) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    policy.save(out / "policy.json")
    if barrier is not None:
        doc = barrier.to_dict()
        doc["env"] = cfg.env
        (out / "barrier.json").write_text(json.dumps(doc, indent=1))
    _write_jsonl(out / "metrics.jsonl", metrics.episodes)
    _write_jsonl(out / "epochs.jsonl", metrics.epochs)
    with open(out / "violations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"])
        writer.writerows([[t] for t in metrics.violation_steps])
    buffer.save(out / "buffer.jsonl")
    (out / "config.ini").write_text(dump_config(cfg))
    summary = build_summary(cfg, barrier, metrics)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.env is not None:
        cfg = replace(cfg, env=args.env)
    if args.horizon is not None:
        cfg = replace(cfg, training_horizon=args.horizon)
    try:
        cfg.validate(make_env(cfg.env, cfg.noise_sigma))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(args.out)
    try:
        policy, barrier, metrics, buffer = run_kbse_full(cfg)
    except Exception as exc:  # noqa: BLE001 - report and exit non-zero
        log.exception("training failed")
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    summary = write_run(out, cfg, policy, barrier, metrics, buffer)
    print(json.dumps({k: summary[k] for k in (
        "env", "total_violations", "violation_p90_pct", "delta", "safety_probability",
        "confidence", "wall_clock_s")}, indent=1))
    if summary["vacuous"]:
        print("note: the certificate is vacuous (delta = 1)")
    return EXIT_RUNTIME if metrics.interrupted else EXIT_OK


def clopper_pearson(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    a = 1.0 - level
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


def evaluate(policy: PolicyParams, barrier: BarrierModel | None, env, episodes: int, seed: int,
             history: list[Transition] | None = None, window: int = 500,
             margin: float = 0.05, shield: bool = True) -> dict:
    """Run ``episodes`` deterministic-policy episodes, shielded by ``barrier``."""
    report = {"episodes": episodes, "env": env.name}
    if episodes == 0:
        report.update({"mean_reward": None, "mean_cost": None, "mean_length": None,
                       "unsafe_episode_frequency": None, "unsafe_episode_ci95": None,
                       "delta": barrier.delta if barrier is not None else None})
        return report
    base = list(history or [])[-window:]
    rewards, costs, lengths, unsafe_eps = [], [], [], 0
    for ss in np.random.SeedSequence(seed).spawn(episodes):
        rng = np.random.default_rng(ss)
        recent = list(base)
        s = env.reset(rng)
        total, cost, hit = 0.0, 0, False
        for t in range(env.episode_length):
            a = act(policy, s, False)
            if env.is_unsafe(s):
                cost += 1
                hit = True
                if shield and barrier is not None and barrier.valid and recent:
                    dyn = fit_local_dynamics(recent, window)
                    a = safe_action(barrier, dyn, s, a, env.action_box, margin=margin, rng=rng)
            s_plus, r = env.step(s, a, rng)
            total += r
            recent.append(Transition(s, a, r, s_plus))
            if len(recent) > window:
                del recent[0]
            if env.terminal(s_plus):
                t += 1
                break
            s = s_plus
        else:
            t = env.episode_length
        rewards.append(total)
        costs.append(cost)
        lengths.append(t if env.terminal(s_plus) else env.episode_length)
        unsafe_eps += int(hit)
    lo, hi = clopper_pearson(unsafe_eps, episodes)
    report.update({
        "mean_reward": float(np.mean(rewards)),
        "mean_cost": float(np.mean(costs)),
        "mean_length": float(np.mean(lengths)),
        "unsafe_episodes": unsafe_eps,
        "unsafe_episode_frequency": unsafe_eps / episodes,
        "unsafe_episode_ci95": [lo, hi],
        "delta": barrier.delta if barrier is not None and barrier.valid else None,
    })
    return report


def _load_barrier(path) -> BarrierModel:
    return BarrierModel.from_json(Path(path).read_text())


def _resolve_run_paths(args):
    run = Path(args.run) if args.run else None
    policy = args.policy or (run / "policy.json" if run else None)
    barrier = args.barrier or (run / "barrier.json" if run and (run / "barrier.json").exists() else None)
    config = args.config or (run / "config.ini" if run and (run / "config.ini").exists() else None)
    buffer = run / "buffer.jsonl" if run and (run / "buffer.jsonl").exists() else None
    return policy, barrier, config, buffer


def cmd_eval(args) -> int:
    policy_path, barrier_path, config_path, buffer_path = _resolve_run_paths(args)
    if policy_path is None:
        print("error: need --policy or --run", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(config_path) if config_path else RunConfig()
    except (FileNotFoundError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.env:
        cfg = replace(cfg, env=args.env)
    try:
        policy = PolicyParams.load(policy_path)
        barrier = _load_barrier(barrier_path) if barrier_path else None
        history = ReplayBuffer.load(buffer_path).recent(cfg.shield_window) if buffer_path else None
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    env = make_env(cfg.env, cfg.noise_sigma)
    seed = cfg.seed if args.seed is None else args.seed
    report = evaluate(policy, barrier, env, args.episodes, seed + 1_000_003, history,
                      cfg.shield_window, cfg.shield_margin)
    text = json.dumps(report, indent=1, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(text)
    return EXIT_OK


def certify_report(model: BarrierModel, horizon: int | None = None) -> dict:
    if horizon is not None:
        model = replace(model, horizon_T=int(horizon))
    rep = barrier_summary(model)
    env = None
    try:
        delta = certify(model)
        valid = model.valid
    except InvalidBarrier:
        delta, valid = None, False
    rep["horizon_T"] = model.horizon_T
    rep["delta"] = delta
    rep["valid"] = valid
    rep["vacuous"] = bool(valid and delta >= 1.0)
    if valid:
        rep["certificate"] = certificate_sentence(replace(model, delta=delta))
    else:
        rep["certificate"] = "invalid barrier: no safety guarantee"
    rep["env"] = env
    return rep


def cmd_certify(args) -> int:
    path = args.barrier or (Path(args.run) / "barrier.json" if args.run else None)
    if path is None:
        print("error: need --barrier or --run", file=sys.stderr)
        return EXIT_USAGE
    try:
        text = Path(path).read_text()
        model = BarrierModel.from_json(text)
    except FileNotFoundError:
        print(f"error: barrier file not found: {path}", file=sys.stderr)
        return EXIT_USAGE
    except CorruptBarrierFile as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    rep = certify_report(model, args.horizon)
    env = json.loads(text).get("env")
    rep["env"] = env
    lines = [f"{k:>8} = {rep[k]}" for k in ("eta", "nu", "c", "b_bar", "epsilon", "zeta", "horizon_T", "delta")]
    print("\n".join(lines))
    print(rep["certificate"])
    if rep["vacuous"]:
        print("warning: vacuous certificate (delta = 1)")
    if env in REFERENCE:
        print(f"reference safety probability published for {env}: {REFERENCE[env]['safety_probability']}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "certificate.json").write_text(json.dumps(rep, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args) -> int:
    target = Path(args.path)
    if not target.exists():
        print(f"error: not found: {target}", file=sys.stderr)
        return EXIT_USAGE
    if target.is_dir():
        summary = target / "summary.json"
        if not summary.exists():
            print(f"error: {target} has no summary.json", file=sys.stderr)
            return EXIT_USAGE
        print(summary.read_text())
        return EXIT_OK
    if target.suffix == ".jsonl":
        recs = [json.loads(line) for line in target.read_text().splitlines() if line.strip()]
        print(f"{len(recs)} records")
        if recs and "reward" in recs[0]:
            r = np.array([x["reward"] for x in recs])
            print(f"reward: first {r[0]:.2f}, last {r[-1]:.2f}, mean {r.mean():.2f}")
        return EXIT_OK
    try:
        model = BarrierModel.from_json(target.read_text())
    except CorruptBarrierFile as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(barrier_summary(model), indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kbse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run KBSE training")
    t.add_argument("--config", help="INI config file")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--env", choices=ENV_NAMES)
    t.add_argument("--horizon", type=int, help="override the training horizon")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained policy under the shield")
    e.add_argument("--run", help="training output directory")
    e.add_argument("--policy")
    e.add_argument("--barrier")
    e.add_argument("--config")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int)
    e.add_argument("--env", choices=ENV_NAMES)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("certify", help="print the safety certificate of a barrier file")
    c.add_argument("--barrier")
    c.add_argument("--run")
    c.add_argument("--horizon", type=int, help="certificate horizon override")
    c.add_argument("--out")
    c.set_defaults(func=cmd_certify)

    i = sub.add_parser("inspect", help="summarize a run directory, barrier or metrics file")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def _setup_logging() -> None:
    level = os.environ.get("KBSE_LOG_LEVEL", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    if getattr(args, "episodes", 0) is not None and getattr(args, "episodes", 0) < 0:
        print("error: --episodes must be non-negative", file=sys.stderr)
        return EXIT_USAGE
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
