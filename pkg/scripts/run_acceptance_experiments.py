"""Learning experiments behind the slow acceptance criteria, with per-seed detail.

Trains fractional and non-fractional learners on the desk scenario, scores
the random baseline on the same evaluation streams, and compares learners on
the congested scenario against the constant-wait oracle. Metric CSVs and a
JSON summary land in --out.

    python scripts/run_acceptance_experiments.py --out out/acceptance
"""
import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from fracaoi.config import load_config
from fracaoi.marl import MarlRunner, eval_seed, run_baseline, write_metrics_csv
from fracaoi.oracles import constant_wait_scan

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def desk(out: Path, seeds) -> dict:
    cfg = load_config(CONFIGS / "desk.cfg")
    sc, learner = cfg.scenario, cfg.learner
    seeds = seeds or cfg.run.seeds
    table = {"fractional": [], "nonfractional": [], "random": [], "gamma_rel": []}
    for seed in seeds:
        for mode in ("fractional", "nonfractional"):
            res = MarlRunner(sc, replace(learner, fractional=mode == "fractional"), seed).train()
            write_metrics_csv(out / f"desk_{mode}_{seed}.csv", res.rows)
            table[mode].append(float(np.mean(res.final_eval.avg_aoi)))
            if mode == "fractional":
                disc = res.final_eval.discounted
                table["gamma_rel"].append(max(abs(a.gamma - disc[m]) / abs(disc[m])
                                              for m, a in enumerate(res.learners)))
        rows = run_baseline(sc, "random", seed, 1, learner.delta, learner.wait_points, learner.eval_episodes)
        table["random"].append(float(np.mean([r["eval_avg_aoi"] for r in rows])))
        print(f"desk seed {seed}: fractional {table['fractional'][-1]:.3f} "
              f"nonfractional {table['nonfractional'][-1]:.3f} random {table['random'][-1]:.3f} "
              f"gamma rel gap {table['gamma_rel'][-1]:.3f}", flush=True)
    wins = int(np.sum(np.array(table["fractional"]) < np.array(table["random"])))
    table["sign_test_p"] = binomtest(wins, len(seeds), 0.5, alternative="greater").pvalue
    table["medians"] = {k: float(np.median(table[k])) for k in ("fractional", "nonfractional", "random")}
    return table


def congested(out: Path, seeds) -> list[dict]:
    cfg = load_config(CONFIGS / "congested.cfg")
    sc, learner = cfg.scenario, cfg.learner
    rows = []
    for seed in seeds or cfg.run.seeds:
        scan = constant_wait_scan(sc, [eval_seed(seed, j) for j in range(learner.eval_episodes)],
                                  learner.wait_points)
        res = MarlRunner(sc, learner, seed).train()
        write_metrics_csv(out / f"congested_{seed}.csv", res.rows)
        rows.append(dict(seed=seed, best_wait=scan.best_wait, oracle=scan.best_aoi,
                         zero_wait=float(scan.avg_aoi[0]), learner=float(np.mean(res.final_eval.avg_aoi))))
        print("congested", rows[-1], flush=True)
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/acceptance")
    ap.add_argument("--seeds", help="comma list overriding the config seed lists")
    ap.add_argument("--only", choices=("desk", "congested"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else None
    summary = {}
    if args.only in (None, "desk"):
        summary["desk"] = desk(out, seeds)
    if args.only in (None, "congested"):
        summary["congested"] = congested(out, seeds)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
