"""Mobile edge computing world driven by the event core.

Devices generate tasks at will, pick local or edge processing, and observe
edge queue lengths. Edge servers serve FCFS. Tasks older than the deadline
are dropped wherever they are.
"""
from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Union

from .aoi import CompletionLog, TaskRecord
from .csvio import schema_writer
from .events import (Event, EventKind, EventQueue, RngStream, exponential_from_uniform,
                     lognormal_from_uniform)


class IllegalActionError(ValueError):
    pass


class LivelockError(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    size_l: float = 30.0  # Mbit
    density_d: float = 0.297  # Gcycles / Mbit

    def __post_init__(self):
        if self.size_l <= 0 or self.density_d <= 0:
            raise ValueError("task size and density must be positive")

    @property
    def work(self) -> float:
        """Gigacycles."""
        return self.size_l * self.density_d


@dataclass(frozen=True)
class DeviceConfig:
    local_capacity: float = 2.5  # GHz
    tx_power: float = 20.0  # dBm
    position: tuple[float, float] = (0.0, 0.0)
    subchannel: int = 0

    def __post_init__(self):
        if self.local_capacity <= 0:
            raise ValueError("local capacity must be positive")


@dataclass(frozen=True)
class EdgeConfig:
    edge_capacity: float = 41.8  # GHz
    position: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.edge_capacity <= 0:
            raise ValueError("edge capacity must be positive")


@dataclass(frozen=True)
class ChannelParams:
    bandwidth_W: float = 10e6  # Hz
    noise_eta0: float = -114.0  # dBm
    pathloss_exponent: float = 3.0
    fading: bool = True  # Rayleigh power gains, unit mean; False pins g = 1

    def __post_init__(self):
        if self.bandwidth_W <= 0:
            raise ValueError("bandwidth must be positive")
        if self.pathloss_exponent < 0:
            raise ValueError("path-loss exponent must be non-negative")


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def channel_gain(fading_g: float, distance: float, pathloss_exponent: float) -> float:
    if distance <= 0:
        raise ValueError("zero distance")
    return fading_g * distance ** (-pathloss_exponent)


def channel_rate(p_dbm: float, gain: float, params: ChannelParams,
                 interference: Iterable[tuple[float, float]] = ()) -> float:
    """Shannon rate in Mbit/s.

    ``interference`` holds (power_dbm, gain) pairs of co-channel transmitters
    as seen at the same receiver.
    """
    noise = dbm_to_watt(params.noise_eta0)
    interf = sum(dbm_to_watt(p) * g for p, g in interference)
    sinr = dbm_to_watt(p_dbm) * gain / (noise + interf)
    return params.bandwidth_W * math.log2(1.0 + sinr) / 1e6


def transmission_time(task: TaskSpec, rate: float, literal_paper_tx: bool = False) -> float:
    if rate <= 0:
        raise ValueError("rate must be positive")
    bits = task.size_l * task.density_d if literal_paper_tx else task.size_l
    return bits / rate


class ServiceDist(enum.Enum):
    Exponential = "exponential"
    Lognormal = "lognormal"


def service_time_from_uniform(task: TaskSpec, capacity: float, dist: ServiceDist,
                              sigma: float, u: float) -> float:
    if capacity <= 0:
        raise ValueError("capacity must be positive")
    mean = task.work / capacity
    if dist is ServiceDist.Exponential:
        return exponential_from_uniform(1.0 / mean, u)
    return lognormal_from_uniform(mean, sigma, u)


def service_time(task: TaskSpec, capacity: float, dist: ServiceDist, stream: RngStream,
                 sigma: float = 0.0) -> float:
    """Random processing time with mean size*density/capacity."""
    if capacity <= 0:
        raise ValueError("capacity must be positive")
    if dist is ServiceDist.Lognormal and sigma == 0:
        return task.work / capacity
    return service_time_from_uniform(task, capacity, dist, sigma, stream.uniform())


@dataclass
class Scenario:
    n_devices: int = 20
    n_edges: int = 2
    local_capacity: float = 2.5
    edge_capacity: float = 41.8
    edge_capacities: Optional[tuple[float, ...]] = None
    task_size: float = 30.0
    task_density: float = 0.297
    drop_coefficient: float = 1.5
    service_dist: str = "exponential"
    service_sigma: float = 0.0
    tx_power: float = 20.0
    noise_dbm: float = -114.0
    pathloss_exponent: float = 3.0
    bandwidth: float = 10e6
    fading: bool = True
    n_subchannels: Optional[int] = None
    literal_paper_tx: bool = False
    device_radius: float = 100.0
    edge_radius: float = 150.0
    horizon: float = 200.0  # episode length in seconds
    livelock_horizon: float = 1e6

    @property
    def task(self) -> TaskSpec:
        return TaskSpec(self.task_size, self.task_density)

    @property
    def channel(self) -> ChannelParams:
        return ChannelParams(self.bandwidth, self.noise_dbm, self.pathloss_exponent, self.fading)

    @property
    def deadline(self) -> float:
        """Drop deadline: drop coefficient times the mean local processing time."""
        return self.drop_coefficient * self.task.work / self.local_capacity

    @property
    def dist(self) -> ServiceDist:
        return ServiceDist(self.service_dist)

    def devices(self) -> list[DeviceConfig]:
        nsub = self.n_subchannels or self.n_edges
        out = []
        for m in range(self.n_devices):
            ang = 2 * math.pi * (m + 0.5) / self.n_devices
            r = self.device_radius * (0.6 + 0.4 * ((m * 7) % 5) / 4)
            out.append(DeviceConfig(self.local_capacity, self.tx_power,
                                    (r * math.cos(ang), r * math.sin(ang)), m % nsub))
        return out

    def edges(self) -> list[EdgeConfig]:
        caps = self.edge_capacities or (self.edge_capacity,) * self.n_edges
        if len(caps) != self.n_edges:
            raise ValueError("edge_capacities length must equal n_edges")
        out = []
        for n in range(self.n_edges):
            ang = 2 * math.pi * n / self.n_edges
            out.append(EdgeConfig(caps[n], (self.edge_radius * math.cos(ang),
                                             self.edge_radius * math.sin(ang))))
        return out

    def with_(self, **kw) -> "Scenario":
        return replace(self, **kw)


class Indicator(enum.Enum):
    NeedsOffload = "offload"
    NeedsUpdate = "update"
    Busy = "busy"


@dataclass(frozen=True)
class Wait:
    duration: float


@dataclass(frozen=True)
class Offload:
    target: int  # 0 = local, n >= 1 = edge n-1


HybridAction = Union[Wait, Offload]


@dataclass(frozen=True)
class SystemState:
    time: float
    indicators: tuple[Indicator, ...]
    queue_lengths: tuple[int, ...]
    last_latency: tuple[float, ...]
    aoi_now: tuple[float, ...]


@dataclass(frozen=True)
class Decision:
    device: int
    state: SystemState
    elapsed: float

    @property
    def kind(self) -> Indicator:
        return self.state.indicators[self.device]


@dataclass
class _Task:
    task_id: int
    generation: float
    wait: float
    u_service: float
    fading: tuple[float, ...]
    phase: str = "new"  # new, local, tx, queued, service, done
    edge: Optional[int] = None


class MecEnv:
    """Event-driven MEC simulator exposing observe -> act -> advance."""

    def __init__(self, scenario: Scenario, seed: int = 0, record_events: bool = True):
        self.scenario = scenario
        self.seed = seed
        self.record_events = record_events
        self.reset(seed)

    def reset(self, seed: Optional[int] = None) -> None:
        if seed is not None:
            self.seed = seed
        sc = self.scenario
        self.task_spec = sc.task
        self.channel = sc.channel
        self.device_cfg = sc.devices()
        self.edge_cfg = sc.edges()
        self.dist = sc.dist
        self.deadline = sc.deadline
        M, N = sc.n_devices, sc.n_edges
        self.queue = EventQueue(0.0)
        self._svc_streams = [RngStream(self.seed, f"service/{m}") for m in range(M)]
        self._fade_streams = [RngStream(self.seed, f"fading/{m}") for m in range(M)]
        self.indicators = [Indicator.NeedsUpdate] * M
        self.last_latency = [0.0] * M
        self.ref_gen = [0.0] * M  # generation time of freshest completed task
        self.tasks: list[Optional[_Task]] = [None] * M
        self.task_counter = [0] * M
        self.pending_wait = [0.0] * M
        self.edge_queue: list[deque] = [deque() for _ in range(N)]
        self.in_service: list[Optional[tuple[int, int]]] = [None] * N
        self.enqueued = [0] * N
        self.dequeued = [0] * N
        self.transmitting: set[int] = set()
        self.log = CompletionLog(M, 0.0)
        self.event_log: list[tuple[float, str, int, Optional[int], int]] = []
        self.pending: deque[int] = deque(range(M))
        self.last_decision_time = 0.0
        self.n_completed = 0
        self.n_dropped = 0
        self.offload_counts = [0] * (N + 1)

    # ------------------------------------------------------------------ views
    @property
    def clock(self) -> float:
        return self.queue.clock

    def queue_lengths(self) -> tuple[int, ...]:
        return tuple(len(q) + (1 if s is not None else 0)
                     for q, s in zip(self.edge_queue, self.in_service))

    def state(self) -> SystemState:
        t = self.clock
        return SystemState(t, tuple(self.indicators), self.queue_lengths(),
                           tuple(self.last_latency), tuple(t - r for r in self.ref_gen))

    def distance(self, device: int, edge: int) -> float:
        (x0, y0), (x1, y1) = self.device_cfg[device].position, self.edge_cfg[edge].position
        return math.hypot(x0 - x1, y0 - y1)

    # ---------------------------------------------------------------- actions
    def apply_action(self, device: int, action: HybridAction) -> None:
        ind = self.indicators[device]
        now = self.clock
        if isinstance(action, Wait):
            if ind is not Indicator.NeedsUpdate:
                raise IllegalActionError(f"device {device} cannot wait in state {ind}")
            if action.duration < 0 or not math.isfinite(action.duration):
                raise IllegalActionError("wait duration must be finite and >= 0")
            self.indicators[device] = Indicator.Busy
            self.pending_wait[device] = float(action.duration)
            self.queue.schedule(now + action.duration, EventKind.TaskGenerated, device,
                                None, self.task_counter[device] + 1)
        elif isinstance(action, Offload):
            if ind is not Indicator.NeedsOffload:
                raise IllegalActionError(f"device {device} cannot offload in state {ind}")
            if not 0 <= action.target <= self.scenario.n_edges:
                raise IllegalActionError(f"unknown offload target {action.target}")
            task = self.tasks[device]
            self.indicators[device] = Indicator.Busy
            self.offload_counts[action.target] += 1
            if action.target == 0:
                task.phase = "local"
                dt = service_time_from_uniform(self.task_spec, self.device_cfg[device].local_capacity,
                                               self.dist, self.scenario.service_sigma, task.u_service)
                self.queue.schedule(now + dt, EventKind.LocalDone, device, None, task.task_id)
            else:
                edge = action.target - 1
                task.phase = "tx"
                task.edge = edge
                rate = self._rate(device, edge)
                dt = transmission_time(self.task_spec, rate, self.scenario.literal_paper_tx)
                self.transmitting.add(device)
                self.queue.schedule(now + dt, EventKind.TransmissionDone, device, edge, task.task_id)
        else:
            raise IllegalActionError(f"unknown action {action!r}")

    def _rate(self, device: int, edge: int) -> float:
        cfg = self.device_cfg[device]
        g = self.tasks[device].fading[edge]
        h = channel_gain(g, self.distance(device, edge), self.channel.pathloss_exponent)
        interf = []
        for i in sorted(self.transmitting):
            if i != device and self.device_cfg[i].subchannel == cfg.subchannel:
                gi = self.tasks[i].fading[edge]
                interf.append((self.device_cfg[i].tx_power,
                               channel_gain(gi, self.distance(i, edge), self.channel.pathloss_exponent)))
        return channel_rate(cfg.tx_power, h, self.channel, tuple(interf))

    # ----------------------------------------------------------------- engine
    def advance_until_decision(self, stop_time: Optional[float] = None) -> Optional[Decision]:
        """Process events until a device needs a decision.

        Returns None once the next event lies beyond ``stop_time`` (the clock
        is then parked at ``stop_time``).
        """
        start = self.clock
        while not self.pending:
            nxt = self.queue.peek_time()
            if stop_time is not None and nxt > stop_time:
                self.queue.clock = max(self.clock, stop_time)
                return None
            if nxt - start > self.scenario.livelock_horizon:
                raise LivelockError(f"no decision within {self.scenario.livelock_horizon} s")
            self._process(self.queue.pop_next())
        device = self.pending.popleft()
        now = self.clock
        elapsed = now - self.last_decision_time
        self.last_decision_time = now
        return Decision(device, self.state(), elapsed)

    def _log_event(self, ev: Event) -> None:
        if self.record_events:
            self.event_log.append((ev.time, ev.kind.value, ev.device_id, ev.edge_id, ev.task_id))

    def _process(self, ev: Event) -> None:
        m = ev.device_id
        task = self.tasks[m]
        kind = ev.kind
        if kind is EventKind.TaskGenerated:
            self._log_event(ev)
            self.task_counter[m] += 1
            u = self._svc_streams[m].uniform()
            fading = tuple(-math.log(self._fade_streams[m].uniform()) if self.channel.fading else 1.0
                           for _ in range(self.scenario.n_edges))
            self.tasks[m] = _Task(self.task_counter[m], ev.time, self.pending_wait[m], u, fading)
            self.queue.schedule(ev.time + self.deadline, EventKind.Deadline, m, None, self.task_counter[m])
            self.indicators[m] = Indicator.NeedsOffload
            self.pending.append(m)
            return
        if task is None or task.task_id != ev.task_id or task.phase == "done":
            return  # stale event of a dropped task
        if kind is EventKind.LocalDone:
            self._log_event(ev)
            self._finish(m, dropped=False)
        elif kind is EventKind.TransmissionDone:
            self._log_event(ev)
            self.transmitting.discard(m)
            task.phase = "queued"
            self.edge_queue[ev.edge_id].append((m, task.task_id))
            self.enqueued[ev.edge_id] += 1
            self._try_start(ev.edge_id)
        elif kind is EventKind.EdgeServiceStart:
            if self.in_service[ev.edge_id] != (m, task.task_id):
                return
            self._log_event(ev)
            task.phase = "service"
            dt = service_time_from_uniform(self.task_spec, self.edge_cfg[ev.edge_id].edge_capacity,
                                           self.dist, self.scenario.service_sigma, task.u_service)
            self.queue.schedule(ev.time + dt, EventKind.EdgeServiceDone, m, ev.edge_id, task.task_id)
        elif kind is EventKind.EdgeServiceDone:
            if self.in_service[ev.edge_id] != (m, task.task_id):
                return
            self._log_event(ev)
            self.in_service[ev.edge_id] = None
            self._finish(m, dropped=False)
            self._try_start(ev.edge_id)
        elif kind is EventKind.Deadline:
            self._log_event(ev)
            self._drop(m)

    def _try_start(self, edge: int) -> None:
        if self.in_service[edge] is None and self.edge_queue[edge]:
            dev, tid = self.edge_queue[edge].popleft()
            self.dequeued[edge] += 1
            self.in_service[edge] = (dev, tid)
            self.queue.schedule(self.clock, EventKind.EdgeServiceStart, dev, edge, tid)

    def _drop(self, m: int) -> None:
        task = self.tasks[m]
        if task.phase == "tx":
            self.transmitting.discard(m)
        elif task.edge is not None and self.in_service[task.edge] == (m, task.task_id):
            self.in_service[task.edge] = None
            task.phase = "done"
            self._try_start(task.edge)
        elif task.phase == "queued":
            self.edge_queue[task.edge].remove((m, task.task_id))
            self.dequeued[task.edge] += 1
        self._finish(m, dropped=True)

    def _finish(self, m: int, dropped: bool) -> None:
        task = self.tasks[m]
        now = self.clock
        task.phase = "done"
        y = now - task.generation
        self.last_latency[m] = y
        if dropped:
            self.n_dropped += 1
        else:
            self.n_completed += 1
            self.ref_gen[m] = max(self.ref_gen[m], task.generation)
        self.log.add(m, TaskRecord(task.generation, now, task.wait, dropped, task.task_id))
        self.indicators[m] = Indicator.NeedsUpdate
        self.pending.append(m)

    # ----------------------------------------------------------------- export
    def write_event_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = schema_writer(fh, "events", ["time", "kind", "device", "edge", "task"])
            for t, k, d, e, tid in self.event_log:
                w.writerow([f"{t:.9f}", k, d, "" if e is None else e, tid])
