"""Age-of-Information bookkeeping.

Every device starts from a virtual completion at ``origin`` with age 0.
Per-task fractional costs are split so that their sum telescopes onto the
exact sawtooth integral, including across dropped tasks (see ``task_costs``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .csvio import schema_writer

DENOM_FLOOR = 1e-12


@dataclass(frozen=True)
class TaskRecord:
    generation: float
    finish: float  # completion time, or drop time for dropped tasks
    wait: float  # waiting time Z chosen before this generation
    dropped: bool = False
    task_id: int = 0

    @property
    def duration(self) -> float:
        return self.finish - self.generation


@dataclass(frozen=True)
class FractionalCost:
    c_n: float
    c_d: float


@dataclass
class CompletionLog:
    n_devices: int
    origin: float = 0.0
    tasks: dict[int, list[TaskRecord]] = field(default_factory=dict)

    def __post_init__(self):
        for m in range(self.n_devices):
            self.tasks.setdefault(m, [])

    def add(self, device: int, record: TaskRecord) -> None:
        seq = self.tasks[device]
        if seq and record.generation < seq[-1].finish - 1e-12:
            raise ValueError("records must be time-ordered with one task in flight")
        if record.finish < record.generation:
            raise ValueError("finish precedes generation")
        seq.append(record)

    def records(self, device: int) -> list[TaskRecord]:
        return self.tasks[device]

    def shifted(self, dt: float) -> "CompletionLog":
        out = CompletionLog(self.n_devices, self.origin + dt)
        for m, seq in self.tasks.items():
            out.tasks[m] = [TaskRecord(r.generation + dt, r.finish + dt, r.wait, r.dropped, r.task_id)
                            for r in seq]
        return out


def trapezoid_area(y_k: float, z_next: float, y_next: float) -> float:
    """AoI area between consecutive completions: 1/2 (Y+Z+Y')^2 - 1/2 Y'^2."""
    if y_k < 0 or z_next < 0 or y_next < 0:
        raise ValueError("trapezoid inputs must be non-negative")
    total = y_k + z_next + y_next
    return 0.5 * total * total - 0.5 * y_next * y_next


def fractional_step_cost(y_k: float, z_next: float, y_next: float, gamma: float) -> float:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return trapezoid_area(y_k, z_next, y_next) - gamma * (y_k + z_next)


def _completions(log: CompletionLog, device: int) -> list[tuple[float, float]]:
    return [(r.finish, r.generation) for r in log.records(device) if not r.dropped]


def instantaneous_aoi(log: CompletionLog, device: int, t: float) -> float:
    """t minus the generation time of the freshest task completed by t."""
    ref = log.origin
    for finish, gen in _completions(log, device):
        if finish <= t:
            ref = max(ref, gen)
    return t - ref


def _sawtooth_area(log: CompletionLog, device: int, start: float, end: float) -> float:
    ref = log.origin
    events = sorted(_completions(log, device))
    area = 0.0
    t = start
    for finish, gen in events:
        if finish <= start:
            ref = max(ref, gen)
            continue
        if finish >= end:
            break
        area += 0.5 * ((finish - ref) ** 2 - (t - ref) ** 2)
        t = finish
        ref = max(ref, gen)
    area += 0.5 * ((end - ref) ** 2 - (t - ref) ** 2)
    return area


def time_average_aoi(log: CompletionLog, horizon: float, device: int = 0,
                     start: float | None = None) -> float:
    """Exact integral of the sawtooth over [start, start+horizon] / horizon.

    An empty log grows linearly from the origin, giving horizon/2 when the
    window starts at the origin.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    a = log.origin if start is None else start
    return _sawtooth_area(log, device, a, a + horizon) / horizon


class CostTracker:
    """Online form of ``task_costs``: feed finished tasks in order."""

    def __init__(self, origin: float = 0.0):
        self.ref = origin
        self.prev_finish = origin
        self.prev_gen = origin
        self.prev_age = 0.0

    def push(self, r: TaskRecord) -> FractionalCost:
        before = self.prev_age + (r.finish - self.prev_finish)
        if r.dropped:
            age_after = before
        else:
            self.ref = max(self.ref, r.generation)
            age_after = r.finish - self.ref
        cost = FractionalCost(0.5 * before * before - 0.5 * age_after * age_after,
                              r.generation - self.prev_gen)
        self.prev_finish, self.prev_gen, self.prev_age = r.finish, r.generation, age_after
        return cost


def task_costs(records: Sequence[TaskRecord], origin: float = 0.0) -> list[FractionalCost]:
    """Per-interval (c_N, c_D) pairs for a device's finished tasks.

    Entry k covers the generation epochs [S_k, S_{k+1}] where S_0 is the
    virtual task at ``origin``. With a_k the age right after task k finishes
    (Y_k on completion, unchanged age on a drop) and L the time between the
    two finishes, c_N = 1/2 (a_k + L)^2 - 1/2 a_{k+1}^2, which is the
    trapezoid A(Y_k, Z_{k+1}, Y_{k+1}) between genuine completions. A drop
    gets c_N = 0 and its area is carried into the next completion's entry.
    c_D = S_{k+1} - S_k = Y_k + Z_{k+1} always.
    """
    tracker = CostTracker(origin)
    return [tracker.push(r) for r in records]


def cycle_triples(records: Sequence[TaskRecord], origin: float = 0.0) -> list[tuple[float, float, float]]:
    """(Y_k, Z_{k+1}, Y_{k+1}) triples, starting from the virtual task (Y_0 = 0)."""
    out = []
    prev_y = 0.0
    for r in records:
        out.append((prev_y, r.wait, r.duration))
        prev_y = r.duration
    return out


def discounted_fractional_objective(costs: Iterable[FractionalCost], delta: float) -> float:
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    num = den = 0.0
    w = 1.0
    for c in costs:
        num += w * c.c_n
        den += w * c.c_d
        w *= delta
    if den <= 0:
        raise ZeroDivisionError("discounted denominator is zero")
    return num / den


def ratio_of_sums(costs: Sequence[FractionalCost]) -> tuple[float, bool]:
    """Sum c_N / sum c_D, floored; the flag marks a floored (degenerate) ratio."""
    num = sum(c.c_n for c in costs)
    den = sum(c.c_d for c in costs)
    if den < DENOM_FLOOR:
        return num / DENOM_FLOOR, True
    return num / den, False


def write_sawtooth_csv(path, log: CompletionLog, horizon: float) -> None:
    """One row per sawtooth breakpoint (values just before/after each reset)."""
    with open(path, "w", newline="") as fh:
        w = schema_writer(fh, "sawtooth", ["device", "time", "aoi"])
        for m in range(log.n_devices):
            w.writerow([m, f"{log.origin:.9g}", "0"])
            for finish, _gen in sorted(_completions(log, m)):
                if finish > log.origin + horizon:
                    break
                w.writerow([m, f"{finish:.9g}", f"{instantaneous_aoi(log, m, np.nextafter(finish, -np.inf)):.9g}"])
                w.writerow([m, f"{finish:.9g}", f"{instantaneous_aoi(log, m, finish):.9g}"])
            end = log.origin + horizon
            w.writerow([m, f"{end:.9g}", f"{instantaneous_aoi(log, m, end):.9g}"])


def write_task_csv(path, log: CompletionLog) -> None:
    with open(path, "w", newline="") as fh:
        w = schema_writer(fh, "tasks", ["device", "task", "area", "y", "z", "dropped"])
        for m in range(log.n_devices):
            recs = log.records(m)
            costs = task_costs(recs, log.origin)
            for r, c in zip(recs, costs):
                w.writerow([m, r.task_id, f"{c.c_n:.9g}", f"{r.duration:.9g}", f"{r.wait:.9g}", int(r.dropped)])
