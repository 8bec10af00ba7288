"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import oracles
from .config import ConfigError, LoadedConfig, game_from_items, load_config, mdp_from_items
from .csvio import SchemaError
from .events import RngStream
from .fql import run_fql, write_fql_csv
from .marl import BaselinePolicy, MarlRunner, eval_seed, mean_eval_aoi, run_baseline, write_metrics_csv
from .mec import MecEnv
from .nashq import run_fnql, write_fnql_csv

log = logging.getLogger("fracaoi")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _config(path: Optional[str]) -> LoadedConfig:
    return load_config(path) if path else LoadedConfig()


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    sc = cfg.scenario if args.horizon is None else cfg.scenario.with_(horizon=args.horizon)
    policy = BaselinePolicy(args.policy, sc, args.seed)
    env = MecEnv(sc, args.seed, record_events=True)
    while True:
        d = env.advance_until_decision(sc.horizon)
        if d is None:
            break
        env.apply_action(d.device, policy(d))
    from .aoi import time_average_aoi, write_sawtooth_csv, write_task_csv

    out = _out_dir(args.out)
    env.write_event_csv(out / "events.csv")
    write_sawtooth_csv(out / "sawtooth.csv", env.log, sc.horizon)
    write_task_csv(out / "tasks.csv", env.log)
    avg = [time_average_aoi(env.log, sc.horizon, m) for m in range(sc.n_devices)]
    print(json.dumps({"avg_aoi": float(np.mean(avg)), "per_device": [round(a, 9) for a in avg]}))
    return EXIT_OK


def _fql_with(cfg: LoadedConfig, episodes: Optional[int]):
    return cfg.fql if episodes is None else replace(cfg.fql, episodes=episodes)


def cmd_train_fql(args) -> int:
    cfg = load_config(args.mdp)
    if cfg.mdp is None:
        raise ConfigError(f"{args.mdp} has no [mdp] section")
    mdp = mdp_from_items(cfg.mdp)
    fcfg = _fql_with(cfg, args.episodes)
    gstar = None
    try:
        gstar, _ = oracles.exact_gamma_star(mdp)
    except oracles.EnumerationCapError:
        log.warning("instance too large for the enumeration oracle")
    res = run_fql(mdp, fcfg, RngStream(args.seed, "fql"), gamma_star=gstar)
    out = _out_dir(args.out)
    write_fql_csv(out / "fql_trace.csv", res)
    print(json.dumps({"gamma": res.gamma, "gamma_star": gstar, "policy": res.policy.tolist(),
                      "iterations": len(res.rows)}))
    return EXIT_OK


def cmd_train_fnql(args) -> int:
    cfg = load_config(args.game)
    if cfg.game is None:
        raise ConfigError(f"{args.game} has no [game] section")
    game = game_from_items(cfg.game)
    ncfg = cfg.fnql if args.max_outer is None else replace(cfg.fnql, max_outer=args.max_outer)
    res = run_fnql(game, ncfg, RngStream(args.seed, "fnql"))
    out = _out_dir(args.out)
    write_fnql_csv(out / "fnql_trace.csv", res)
    scan = None
    try:
        scan = oracles.nash_deviation_scan(game, res.joint_policy).tolist()
    except oracles.EnumerationCapError:
        log.warning("game too large for the deviation scan")
    print(json.dumps({"gamma": res.gamma_traces[-1].tolist(), "converged": res.converged,
                      "joint_policy": res.joint_policy.tolist(), "deviation_scan": scan}))
    return EXIT_OK


def cmd_train_marl(args) -> int:
    cfg = _config(args.config)
    lc = cfg.learner
    if args.episodes is not None:
        lc = replace(lc, episodes=args.episodes)
    if args.fractional is not None:
        lc = replace(lc, fractional=args.fractional)
    if args.asynchronous is not None:
        lc = replace(lc, asynchronous=args.asynchronous)
    out = _out_dir(args.out)
    if args.baseline:
        rows = run_baseline(cfg.scenario, args.baseline, args.seed, lc.episodes, lc.delta,
                            lc.wait_points, lc.eval_episodes)
        write_metrics_csv(out / "metrics.csv", rows)
        print(json.dumps({"avg_aoi": mean_eval_aoi(rows, last=lc.episodes)}))
        return EXIT_OK
    res = MarlRunner(cfg.scenario, lc, args.seed).train(
        on_episode=lambda ep, row: log.info("episode %d gamma %.4g", ep, row["gamma"]))
    write_metrics_csv(out / "metrics.csv", res.rows)
    fe = res.final_eval
    print(json.dumps({"avg_aoi": float(np.mean(fe.avg_aoi)), "gamma": res.gamma_trace[-1].tolist(),
                      "discounted": fe.discounted.tolist()}))
    return EXIT_OK


def _csv_list(text: str, conv):
    try:
        return [conv(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad list {text!r}") from exc


def cmd_sweep(args) -> int:
    from .sweep import SweepError, median_table, sweep, worker_count, write_sweep_csv

    cfg = _config(args.config)
    lc = cfg.learner if args.episodes is None else replace(cfg.learner, episodes=args.episodes)
    seeds = _csv_list(args.seeds, int) if args.seeds else list(cfg.run.seeds)
    modes = _csv_list(args.modes, str) if args.modes else list(cfg.run.modes) + list(cfg.run.baselines)
    values = _csv_list(args.values, float)
    try:
        workers = worker_count()
        rows = sweep(cfg.scenario, lc, args.axis, values, modes, seeds, workers)
    except SweepError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(args.out)
    write_sweep_csv(out / "sweep.csv", rows)
    print(json.dumps({f"{v:g}/{m}": a for (v, m), a in median_table(rows).items()}))
    return EXIT_OK


def cmd_oracle(args) -> int:
    if sum(x is not None for x in (args.mdp, args.game, args.wait_scan)) != 1:
        raise UsageError("oracle needs exactly one of --mdp, --game, --wait-scan")
    if args.mdp:
        cfg = load_config(args.mdp)
        if cfg.mdp is None:
            raise ConfigError(f"{args.mdp} has no [mdp] section")
        g, pol = oracles.exact_gamma_star(mdp_from_items(cfg.mdp))
        rec = {"gamma_star": g, "policy": pol.tolist()}
    elif args.game:
        cfg = load_config(args.game)
        if cfg.game is None:
            raise ConfigError(f"{args.game} has no [game] section")
        eqs = oracles.pure_equilibria(game_from_items(cfg.game))
        rec = {"pure_equilibria": [e.tolist() for e in eqs]}
    else:
        cfg = load_config(args.wait_scan)
        seeds = [eval_seed(args.seed, j) for j in range(cfg.learner.eval_episodes)]
        scan = oracles.constant_wait_scan(cfg.scenario, seeds, cfg.learner.wait_points)
        rec = {"grid": scan.grid.tolist(), "avg_aoi": scan.avg_aoi.tolist(),
               "best_wait": scan.best_wait, "best_aoi": scan.best_aoi}
    print(json.dumps(rec))
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_csv

    plot_csv(args.csv, args.kind, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .sweep import AXES, MODES

    p = _Parser(prog="fracaoi", description="Fractional AoI learning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run a fixed policy and export event and AoI CSVs")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--horizon", type=float)
    s.add_argument("--policy", choices=BaselinePolicy.NAMES, default="zero-wait")
    s.add_argument("--out", default="out/simulate")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-fql", help="single-agent fractional Q-learning on a tabular MDP")
    s.add_argument("--mdp", required=True)
    s.add_argument("--episodes", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="out/fql")
    s.set_defaults(func=cmd_train_fql)

    s = sub.add_parser("train-fnql", help="fractional Nash Q-learning on a tabular game")
    s.add_argument("--game", required=True)
    s.add_argument("--max-outer", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="out/fnql")
    s.set_defaults(func=cmd_train_fnql)

    s = sub.add_parser("train-marl", help="asynchronous multi-agent training on a scenario")
    s.add_argument("--config")
    s.add_argument("--episodes", type=int)
    s.add_argument("--fractional", action=argparse.BooleanOptionalAction, default=None,
                   help="fractional cost (default) or the per-step ratio ablation")
    sync = s.add_mutually_exclusive_group()
    sync.add_argument("--async", dest="asynchronous", action="store_const", const=True, default=None)
    sync.add_argument("--sync-padded", dest="asynchronous", action="store_const", const=False)
    s.add_argument("--baseline", choices=BaselinePolicy.NAMES, help="evaluate a fixed policy instead")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="out/marl")
    s.set_defaults(func=cmd_train_marl)

    s = sub.add_parser("sweep", help="paired-seed sweep over one scenario axis")
    s.add_argument("--config")
    s.add_argument("--axis", required=True, choices=AXES)
    s.add_argument("--values", required=True)
    s.add_argument("--modes", help=f"comma list from {', '.join(MODES)}")
    s.add_argument("--seeds")
    s.add_argument("--episodes", type=int)
    s.add_argument("--out", default="out/sweep")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("oracle", help="certified ground truth as a JSON record")
    s.add_argument("--mdp")
    s.add_argument("--game")
    s.add_argument("--wait-scan", help="scenario config for the constant-wait scan")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("plot", help="render a CSV as SVG")
    s.add_argument("--csv", required=True)
    s.add_argument("--kind", required=True, choices=("convergence", "bars"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures surface as exit 2 with the reason
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
