"""Parameter sweeps over scenario axes with paired seeds across modes."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Sequence

import numpy as np

from .csvio import schema_writer
from .marl import BaselinePolicy, LearnerConfig, MarlRunner, evaluate_policy
from .mec import Scenario

AXES = ("edge_capacity", "drop_coefficient", "task_density", "mobile_capacity",
        "processing_variance", "num_agents", "bandwidth")
LEARNED_MODES = ("fractional", "nonfractional", "sync-fractional")
MODES = LEARNED_MODES + BaselinePolicy.NAMES
WORKERS_ENV = "FRACAOI_WORKERS"
SWEEP_FIELDS = ("axis", "value", "seed", "mode", "avg_aoi", "discounted", "drops")


class SweepError(ValueError):
    """Invalid axis, value, mode or seed list."""


def apply_axis(scenario: Scenario, axis: str, value: float) -> Scenario:
    if axis == "edge_capacity":
        return scenario.with_(edge_capacity=float(value), edge_capacities=None)
    if axis == "drop_coefficient":
        return scenario.with_(drop_coefficient=float(value))
    if axis == "task_density":
        return scenario.with_(task_density=float(value))
    if axis == "mobile_capacity":
        return scenario.with_(local_capacity=float(value))
    if axis == "processing_variance":
        return scenario.with_(service_dist="lognormal", service_sigma=float(value))
    if axis == "num_agents":
        m = int(value)
        if m != value or m < 1:
            raise SweepError(f"num_agents needs a positive integer, got {value}")
        # orthogonal channel plans stay orthogonal as the population changes
        orth = scenario.n_subchannels == scenario.n_devices
        return scenario.with_(n_devices=m, n_subchannels=m if orth else scenario.n_subchannels)
    if axis == "bandwidth":
        return scenario.with_(bandwidth=float(value))
    raise SweepError(f"unknown axis {axis!r}; choose from {', '.join(AXES)}")


def run_one(job: tuple) -> dict:
    """One isolated (value, seed, mode) run; picklable for worker processes."""
    scenario, learner, axis, value, seed, mode = job
    sc = apply_axis(scenario, axis, value)
    if mode in LEARNED_MODES:
        cfg = replace(learner, fractional=mode != "nonfractional", asynchronous=mode != "sync-fractional")
        st = MarlRunner(sc, cfg, seed).train().final_eval
    else:
        st = evaluate_policy(sc, BaselinePolicy(mode, sc, seed, learner.wait_points), seed,
                             learner.eval_episodes, learner.delta)
    return dict(axis=axis, value=float(value), seed=int(seed), mode=mode,
                avg_aoi=float(np.mean(st.avg_aoi)), discounted=float(np.nanmean(st.discounted)),
                drops=int(np.sum(st.drops)))


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise SweepError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


def sweep(scenario: Scenario, learner: LearnerConfig, axis: str, values: Sequence[float],
          modes: Sequence[str], seeds: Sequence[int], workers: int = 1) -> list[dict]:
    """Cartesian (value, seed, mode) runs; rows sorted by (value, seed, mode)."""
    if axis not in AXES:
        raise SweepError(f"unknown axis {axis!r}; choose from {', '.join(AXES)}")
    if not seeds:
        raise SweepError("at least one seed is required")
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise SweepError(f"unknown modes {bad}; choose from {', '.join(MODES)}")
    for v in values:
        apply_axis(scenario, axis, v)  # validate before launching anything
    jobs = [(scenario, learner, axis, v, s, m) for v in values for s in seeds for m in modes]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_one, jobs))
    else:
        rows = [run_one(j) for j in jobs]
    return sorted(rows, key=lambda r: (r["value"], r["seed"], r["mode"]))


def write_sweep_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = schema_writer(fh, "sweep", SWEEP_FIELDS)
        for r in rows:
            w.writerow([r["axis"], f"{r['value']:.10g}", r["seed"], r["mode"], f"{r['avg_aoi']:.10g}",
                        f"{r['discounted']:.10g}", r["drops"]])


def median_table(rows: Sequence[dict]) -> dict:
    """{(value, mode): median AoI across seeds}."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["value"], r["mode"]), []).append(r["avg_aoi"])
    return {k: float(np.median(v)) for k, v in sorted(groups.items())}
