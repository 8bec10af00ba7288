"""Asynchronous fractional multi-agent learning on the MEC simulator.

Each device runs two small Q-learners (offload target, discretised wait)
that act on their own observation plus a shared history aggregate. The
history is a recurrent summary of every decision taken so far in global
event order (or, in the synchronous ablation, of every agent's latest
decision padded in agent order).

A task cycle k spans the wait decision before task k+1 and its offload
decision. Its cost is known once task k+1 finishes, which is also the
moment of the device's next wait decision, so the offload transition
carries the cost and the wait transition is cost-free.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .aoi import CostTracker, FractionalCost, discounted_fractional_objective, task_costs, time_average_aoi, trapezoid_area
from .approximators import (AdamState, NonFiniteError, ParamVector, adam_update, gru_params, gru_step,
                            linear_backward, linear_forward, linear_params, mlp_backward, mlp_forward,
                            mlp_params, sgd_update)
from .csvio import schema_writer
from .events import RngStream
from .mec import Decision, Indicator, MecEnv, Offload, Scenario, Wait

WAIT_GRID_POINTS = 11


class CollectorOrderError(ValueError):
    pass


class TrainingDivergence(FloatingPointError):
    pass


def wait_grid(deadline: float, points: int = WAIT_GRID_POINTS) -> np.ndarray:
    """{0, Y/(p-1), ..., Y} with Y the drop deadline."""
    return np.linspace(0.0, deadline, points)


def fractional_cost(y_k: float, z_next: float, y_next: float, gamma: float, fractional: bool = True) -> float:
    """A(Y_k, Z, Y') - gamma (Y_k + Z), or A / (Y_k + Z) in the ratio ablation."""
    area = trapezoid_area(y_k, z_next, y_next)
    if fractional:
        return area - gamma * (y_k + z_next)
    return area / (y_k + z_next)


def cost_from_pair(c: FractionalCost, gamma: float, fractional: bool) -> float:
    if fractional:
        return c.c_n - gamma * c.c_d
    return c.c_n / max(c.c_d, 1e-12)


@dataclass
class CostModuleState:
    """Discounted per-episode sums feeding the gamma update."""
    delta: float
    num: float = 0.0
    den: float = 0.0
    weight: float = 1.0
    episode: int = 0
    window_num: float = 0.0
    window_den: float = 0.0

    def add(self, c: FractionalCost) -> None:
        self.num += self.weight * c.c_n
        self.den += self.weight * c.c_d
        self.weight *= self.delta

    def close_episode(self) -> None:
        self.window_num += self.num
        self.window_den += self.den
        self.num = self.den = 0.0
        self.weight = 1.0
        self.episode += 1


def gamma_episode_update(state: CostModuleState) -> float:
    """Sum of discounted areas over sum of discounted cycle lengths for the
    episodes closed since the last update; resets the window."""
    if state.window_den <= 0:
        raise ZeroDivisionError("no positive denominator in the gamma window")
    g = state.window_num / state.window_den
    state.window_num = state.window_den = 0.0
    return g


# --- features and history -------------------------------------------------

def feature_dim(scenario: Scenario, history_dim: int) -> int:
    return scenario.n_edges + 2 + history_dim


def embed_dim(scenario: Scenario) -> int:
    # queues, device one-hot, [is_wait, z / Y], offload one-hot
    return scenario.n_edges + scenario.n_devices + 2 + scenario.n_edges + 1


def local_features(scenario: Scenario, deadline: float, decision: Decision) -> np.ndarray:
    st = decision.state
    m = decision.device
    q = np.asarray(st.queue_lengths, dtype=float) / scenario.n_devices
    return np.concatenate([q, [st.last_latency[m] / deadline, st.aoi_now[m] / deadline]])


def embed_event(scenario: Scenario, deadline: float, decision: Decision, action) -> np.ndarray:
    M, N = scenario.n_devices, scenario.n_edges
    v = np.zeros(embed_dim(scenario))
    v[:N] = np.asarray(decision.state.queue_lengths, dtype=float) / M
    v[N + decision.device] = 1.0
    if isinstance(action, Wait):
        v[N + M] = 1.0
        v[N + M + 1] = action.duration / deadline
    else:
        v[N + M + 2 + action.target] = 1.0
    return v


class HistoryCollector:
    """Single writer of the shared history aggregate and trajectory."""

    def __init__(self, scenario: Scenario, params: ParamVector, history_dim: int, asynchronous: bool = True,
                 keep_trajectory: bool = False):
        self.scenario = scenario
        self.params = params
        self.dim = history_dim
        self.asynchronous = asynchronous
        self.keep = keep_trajectory
        self.reset()

    def reset(self) -> None:
        self.h = np.zeros(self.dim)
        self.index = 0
        self.last_time = -math.inf
        self.latest = np.zeros((self.scenario.n_devices, embed_dim(self.scenario)))
        self.trajectory: list[dict] = []

    def history_for(self, device: int) -> np.ndarray:
        if self.asynchronous:
            return self.h
        # padded snapshot of every agent's latest decision, folded in agent order
        h = np.zeros(self.dim)
        for row in self.latest:
            h = gru_step(row, h, self.params)
        return h

    def collect(self, time: float, device: int, embedded: np.ndarray, h_used: np.ndarray) -> int:
        if time < self.last_time:
            raise CollectorOrderError(f"event at {time} precedes {self.last_time}")
        self.last_time = time
        T = self.index
        if self.keep:
            self.trajectory.append(dict(T=T, time=time, device=device, embed=embedded.copy(), h=h_used.copy()))
        if self.asynchronous:
            self.h = gru_step(embedded, self.h, self.params)
        else:
            self.latest[device] = embedded
        self.index += 1
        return T


# --- agents ---------------------------------------------------------------

@dataclass
class LearnerConfig:
    episodes: int = 40
    delta: float = 0.95
    model: str = "mlp"  # mlp | linear
    hidden: int = 32
    history_dim: int = 8
    lr: float = 1e-3
    optimizer: str = "adam"  # adam | sgd
    grad_clip: float = 10.0
    batch: int = 32
    buffer_size: int = 10_000
    train_steps: int = 100  # per head per agent per episode
    target_period: int = 100  # train steps between target refreshes
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.3
    gamma_period: int = 50
    gamma_ema: float = 0.9
    fractional: bool = True
    value_mode: str = "direct"  # direct: Q on c_N - gamma c_D; decomposed: N and D heads
    asynchronous: bool = True
    eval_every: int = 1
    eval_episodes: int = 10
    gamma_rollouts: int = 10
    wait_points: int = WAIT_GRID_POINTS

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.model not in ("mlp", "linear"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.value_mode not in ("direct", "decomposed"):
            raise ValueError(f"unknown value mode {self.value_mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.episodes < 1 or self.batch < 1 or self.gamma_period < 1:
            raise ValueError("episodes, batch and gamma_period must be positive")
        if self.eval_episodes < 1 or self.gamma_rollouts < 1:
            raise ValueError("eval_episodes and gamma_rollouts must be positive")

    def epsilon(self, episode: int) -> float:
        span = max(1, int(round(self.eps_fraction * self.episodes)))
        frac = min(1.0, episode / span)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


class QHead:
    """Q approximator (MLP or linear) with a frozen target copy."""

    def __init__(self, n_in: int, n_out: int, config: LearnerConfig, rng: np.random.Generator):
        if config.model == "mlp":
            self.params = mlp_params(n_in, config.hidden, n_out, rng)
            self.params["W2"] *= 0.1
            self.params["b2"] = 0.0
        else:
            self.params = linear_params(n_in, n_out)
        self.model = config.model
        self.target = self.params.copy()
        self.adam = AdamState.for_params(self.params)
        self.n_out = n_out

    def forward(self, x: np.ndarray, params: Optional[ParamVector] = None, cache: Optional[dict] = None):
        p = self.params if params is None else params
        if self.model == "mlp":
            return mlp_forward(x, p, cache)
        if cache is not None:
            cache["x"] = x
        return linear_forward(x, p)

    def backward(self, cache: dict, dout: np.ndarray):
        if self.model == "mlp":
            return mlp_backward(cache, self.params, dout)
        return linear_backward(cache["x"], self.params, dout)

    def sync_target(self) -> None:
        self.target = self.params.copy()


@dataclass
class Transition:
    kind: str  # "offload" | "wait"
    features: np.ndarray
    action: int
    cost: Optional[FractionalCost]
    next_features: np.ndarray


class ReplayBuffer:
    def __init__(self, capacity: int):
        self.data: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.data)

    def append(self, t: Transition) -> None:
        self.data.append(t)

    def sample(self, n: int, gen: np.random.Generator) -> list[Transition]:
        idx = gen.integers(0, len(self.data), size=n)
        return [self.data[i] for i in idx]


class AgentLearner:
    """Offload and wait heads for one device.

    Direct fractional mode learns Q on c_N - gamma c_D. Decomposed mode
    outputs numerator and denominator values per action and reads
    Q = N - gamma D, so a gamma change needs no relearning. The ratio
    ablation learns Q on A / (Y + Z).
    """

    def __init__(self, device: int, scenario: Scenario, config: LearnerConfig, seed: int):
        self.device = device
        self.config = config
        self.deadline = scenario.deadline
        self.grid = wait_grid(self.deadline, config.wait_points)
        self.n_offload = scenario.n_edges + 1
        self.n_actions = {"offload": self.n_offload, "wait": len(self.grid)}
        self.decomposed = config.fractional and config.value_mode == "decomposed"
        blocks = 2 if self.decomposed else 1
        n_in = feature_dim(scenario, config.history_dim)
        init = RngStream(seed, f"init/{device}").generator
        self.heads = {k: QHead(n_in, blocks * n, config, init) for k, n in self.n_actions.items()}
        self.explore_rng = RngStream(seed, f"explore/{device}")
        self.replay_rng = RngStream(seed, f"replay/{device}").generator
        self.buffers = {"offload": ReplayBuffer(config.buffer_size), "wait": ReplayBuffer(config.buffer_size)}
        self.gamma = 0.0
        self.gamma_ema: Optional[float] = None
        self.cost_state = CostModuleState(config.delta)
        self.train_count = 0
        # reference time = one wait-grid step; keeps targets O(1)
        self.tau = self.deadline / (config.wait_points - 1)

    def _split(self, out: np.ndarray, kind: str):
        n = self.n_actions[kind]
        return out[..., :n], out[..., n:]

    def q_from_output(self, out: np.ndarray, kind: str) -> np.ndarray:
        if not self.decomposed:
            return out
        num, den = self._split(out, kind)
        # both blocks are in units of tau: N / tau^2 and D / tau
        return num - (self.gamma / self.tau) * den

    def q_values(self, kind: str, features: np.ndarray) -> np.ndarray:
        return self.q_from_output(self.heads[kind].forward(features), kind)

    def act(self, kind: Indicator, features: np.ndarray, explore: bool, epsilon: float = 0.0):
        """Epsilon-greedy argmin; ties go to the lowest index."""
        if kind is Indicator.NeedsUpdate:
            head = "wait"
        elif kind is Indicator.NeedsOffload:
            head = "offload"
        else:
            raise ValueError(f"no decision for indicator {kind}")
        n = self.n_actions[head]
        if explore and self.explore_rng.uniform() < epsilon:
            a = self.explore_rng.integers(0, n)
        else:
            a = int(np.argmin(self.q_values(head, features)))
        return (Wait(float(self.grid[a])) if head == "wait" else Offload(a)), a

    def targets(self, kind: str, batch: Sequence[Transition]) -> np.ndarray:
        """TD targets, shape (B, blocks): cost + delta * value of the greedy
        next action under the frozen target heads."""
        cfg = self.config
        nxt = "wait" if kind == "offload" else "offload"
        x2 = np.array([t.next_features for t in batch])
        out2 = self.heads[nxt].forward(x2, self.heads[nxt].target)
        q2 = self.q_from_output(out2, nxt)
        a2 = np.argmin(q2, axis=1)
        idx = np.arange(len(batch))
        if self.decomposed:
            num2, den2 = self._split(out2, nxt)
            boot = np.stack([num2[idx, a2], den2[idx, a2]], axis=1)
        else:
            boot = q2[idx, a2][:, None]
        if kind == "wait":
            return boot  # same cycle: no cost, no discount
        if self.decomposed:
            c = np.array([[t.cost.c_n / self.tau ** 2, t.cost.c_d / self.tau] for t in batch])
        elif cfg.fractional:
            c = np.array([[cost_from_pair(t.cost, self.gamma, True) / self.tau ** 2] for t in batch])
        else:
            c = np.array([[cost_from_pair(t.cost, 0.0, False) / self.tau] for t in batch])
        # values are stored times (1 - delta) so they read as per-cycle averages
        return (1.0 - cfg.delta) * c + cfg.delta * boot

    def loss_and_grad(self, kind: str, batch: Sequence[Transition],
                      targets: Optional[np.ndarray] = None) -> tuple[float, ParamVector]:
        """Mean squared TD error of ``kind``'s head and its parameter gradient."""
        if not batch:
            raise ValueError("empty batch")
        head = self.heads[kind]
        n = self.n_actions[kind]
        x = np.array([t.features for t in batch])
        acts = np.array([t.action for t in batch])
        y = self.targets(kind, batch) if targets is None else targets
        cache: dict = {}
        out = head.forward(x, cache=cache)
        idx = np.arange(len(batch))
        cols = [acts + b * n for b in range(y.shape[1])]
        err = np.stack([out[idx, c] for c in cols], axis=1) - y
        loss = float(np.mean(err * err))
        dout = np.zeros_like(out)
        for b, c in enumerate(cols):
            dout[idx, c] = 2.0 * err[:, b] / err.size
        grad, _ = head.backward(cache, dout)
        return loss, grad

    def train_step(self, kind: str, batch: Sequence[Transition]) -> float:
        """One TD(0) step on ``kind``'s head; returns the mean squared TD error."""
        cfg = self.config
        head = self.heads[kind]
        loss, grad = self.loss_and_grad(kind, batch)
        if not math.isfinite(loss):
            raise TrainingDivergence(json.dumps({"device": self.device, "kind": kind, "gamma": self.gamma,
                                                 "train_count": self.train_count}))
        try:
            if cfg.optimizer == "adam":
                adam_update(head.params, grad, head.adam, cfg.lr)
            else:
                sgd_update(head.params, grad, cfg.lr, cfg.grad_clip)
        except NonFiniteError as exc:
            raise TrainingDivergence(f"device {self.device}: {exc}") from exc
        self.train_count += 1
        if self.train_count % cfg.target_period == 0:
            for h in self.heads.values():
                h.sync_target()
        return loss

    def train(self) -> float:
        losses = []
        for kind in ("offload", "wait"):
            buf = self.buffers[kind]
            if len(buf) < self.config.batch:
                continue
            for _ in range(self.config.train_steps):
                losses.append(self.train_step(kind, buf.sample(self.config.batch, self.replay_rng)))
        return float(np.mean(losses)) if losses else float("nan")


# --- policies used for rollouts ----------------------------------------------

def shortest_queue_target(decision: Decision) -> int:
    q = decision.state.queue_lengths
    return 1 + int(np.argmin(q))


class BaselinePolicy:
    """Fixed policies: random, zero-wait, local-only, greedy-queue."""

    NAMES = ("random", "zero-wait", "local-only", "greedy-queue")

    def __init__(self, name: str, scenario: Scenario, seed: int, wait_points: int = WAIT_GRID_POINTS):
        if name not in self.NAMES:
            raise ValueError(f"unknown baseline {name!r}")
        self.name = name
        self.scenario = scenario
        self.grid = wait_grid(scenario.deadline, wait_points)
        self.rng = RngStream(seed, f"baseline/{name}")
        edges = scenario.edges()
        self.edge_mean = [scenario.task.work / e.edge_capacity for e in edges]
        self.local_mean = scenario.task.work / scenario.local_capacity

    def __call__(self, decision: Decision):
        kind = decision.kind
        if self.name == "random":
            if kind is Indicator.NeedsUpdate:
                return Wait(float(self.grid[self.rng.integers(0, len(self.grid))]))
            return Offload(self.rng.integers(0, self.scenario.n_edges + 1))
        if kind is Indicator.NeedsUpdate:
            return Wait(0.0)
        if self.name == "local-only":
            return Offload(0)
        if self.name == "zero-wait":
            return Offload(shortest_queue_target(decision))
        # greedy-queue: smallest expected completion time among local and edges
        q = decision.state.queue_lengths
        est = [self.local_mean] + [(q[n] + 1) * self.edge_mean[n] for n in range(self.scenario.n_edges)]
        return Offload(int(np.argmin(est)))


@dataclass
class EpisodeStats:
    avg_aoi: np.ndarray  # per device, time average over the horizon
    discounted: np.ndarray  # per device discounted fractional objective
    drops: np.ndarray
    offload_counts: np.ndarray  # (M, N + 1)
    n_decisions: int
    disc_num: Optional[np.ndarray] = None
    disc_den: Optional[np.ndarray] = None


def pool_stats(stats: Sequence[EpisodeStats]) -> EpisodeStats:
    """Average AoI over episodes; discounted ratio as pooled sum / sum."""
    num = np.sum([s.disc_num for s in stats], axis=0)
    den = np.sum([s.disc_den for s in stats], axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        disc = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return EpisodeStats(np.mean([s.avg_aoi for s in stats], axis=0), disc,
                        np.sum([s.drops for s in stats], axis=0),
                        np.sum([s.offload_counts for s in stats], axis=0),
                        int(sum(s.n_decisions for s in stats)), num, den)


def discounted_sums(costs: Sequence[FractionalCost], delta: float) -> tuple[float, float]:
    num = den = 0.0
    w = 1.0
    for c in costs:
        num += w * c.c_n
        den += w * c.c_d
        w *= delta
    return num, den


def episode_stats(env: MecEnv, horizon: float, delta: float, offload_counts: np.ndarray, n_decisions: int) -> EpisodeStats:
    M = env.scenario.n_devices
    avg = np.array([time_average_aoi(env.log, horizon, m) for m in range(M)])
    disc = np.full(M, np.nan)
    num = np.zeros(M)
    den = np.zeros(M)
    drops = np.zeros(M, dtype=int)
    for m in range(M):
        recs = env.log.records(m)
        drops[m] = sum(r.dropped for r in recs)
        costs = task_costs(recs, env.log.origin)
        num[m], den[m] = discounted_sums(costs, delta)
        if den[m] > 0:
            disc[m] = discounted_fractional_objective(costs, delta)
    return EpisodeStats(avg, disc, drops, offload_counts, n_decisions, num, den)


def rollout(scenario: Scenario, seed: int, policy: Callable[[Decision], object],
            delta: float = 0.95) -> EpisodeStats:
    """Run one episode of a fixed policy and score it."""
    env = MecEnv(scenario, seed, record_events=False)
    counts = np.zeros((scenario.n_devices, scenario.n_edges + 1), dtype=int)
    n = 0
    while True:
        d = env.advance_until_decision(scenario.horizon)
        if d is None:
            break
        a = policy(d)
        if isinstance(a, Offload):
            counts[d.device, a.target] += 1
        env.apply_action(d.device, a)
        n += 1
    return episode_stats(env, scenario.horizon, delta, counts, n)


# --- training loop --------------------------------------------------------

@dataclass
class TrainingResult:
    rows: list[dict]
    learners: list[AgentLearner]
    gamma_trace: list[np.ndarray]
    final_eval: Optional[EpisodeStats]
    collector: Optional[HistoryCollector] = None


def env_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode, 0xE7]).generate_state(1)[0])


def gamma_seed(seed: int, episode: int, index: int = 0) -> int:
    return int(np.random.SeedSequence([seed, episode, index, 0x6A]).generate_state(1)[0])


def eval_seed(seed: int, index: int = 0) -> int:
    return int(np.random.SeedSequence([seed, index, 0xE7A1]).generate_state(1)[0])


class MarlRunner:
    """Drives env, collector, learners and evaluation for one seed."""

    def __init__(self, scenario: Scenario, config: LearnerConfig, seed: int, keep_trajectory: bool = False):
        self.scenario = scenario
        self.config = config
        self.seed = seed
        self.deadline = scenario.deadline
        gp = gru_params(embed_dim(scenario), config.history_dim, RngStream(seed, "history").generator)
        self.collector = HistoryCollector(scenario, gp, config.history_dim, config.asynchronous, keep_trajectory)
        self.learners = [AgentLearner(m, scenario, config, seed) for m in range(scenario.n_devices)]

    def _features(self, d: Decision) -> tuple[np.ndarray, np.ndarray]:
        h = self.collector.history_for(d.device)
        return np.concatenate([local_features(self.scenario, self.deadline, d), h]), h

    def run_episode(self, env_seed_: int, explore: bool, epsilon: float, learn: bool,
                    accumulate: bool = False) -> EpisodeStats:
        """One episode; ``learn`` stores transitions, ``accumulate`` feeds the gamma window."""
        sc = self.scenario
        M = sc.n_devices
        env = MecEnv(sc, env_seed_, record_events=False)
        self.collector.reset()
        trackers = [CostTracker(0.0) for _ in range(M)]
        seen = [0] * M
        pending: list[Optional[dict]] = [None] * M  # open transition per device
        counts = np.zeros((M, sc.n_edges + 1), dtype=int)
        n = 0
        while True:
            d = env.advance_until_decision(sc.horizon)
            if d is None:
                break
            m = d.device
            ag = self.learners[m]
            feats, h = self._features(d)
            cost = None
            if d.kind is Indicator.NeedsUpdate:
                recs = env.log.records(m)
                while seen[m] < len(recs):
                    cost = trackers[m].push(recs[seen[m]])
                    seen[m] += 1
                    if accumulate:
                        ag.cost_state.add(cost)
            op = pending[m]
            if learn and op is not None:
                if op["kind"] == "offload" and cost is None:
                    raise RuntimeError("offload transition closed without a finished task")
                ag.buffers[op["kind"]].append(Transition(op["kind"], op["x"], op["a"],
                                                         cost if op["kind"] == "offload" else None, feats))
            action, a_idx = ag.act(d.kind, feats, explore, epsilon)
            kind = "wait" if isinstance(action, Wait) else "offload"
            if kind == "offload":
                counts[m, action.target] += 1
            pending[m] = dict(kind=kind, x=feats, a=a_idx)
            env.apply_action(m, action)
            self.collector.collect(d.state.time, m, embed_event(sc, self.deadline, d, action), h)
            n += 1
        if accumulate:
            for ag in self.learners:
                ag.cost_state.close_episode()
        return episode_stats(env, sc.horizon, self.config.delta, counts, n)

    def evaluate(self) -> EpisodeStats:
        """Greedy episodes on the fixed evaluation streams, pooled."""
        return pool_stats([self.run_episode(eval_seed(self.seed, j), False, 0.0, False)
                           for j in range(self.config.eval_episodes)])

    def train(self, on_episode: Optional[Callable[[int, dict], None]] = None) -> TrainingResult:
        cfg = self.config
        rows: list[dict] = []
        gamma_trace = []
        final = None
        for ep in range(cfg.episodes):
            eps = cfg.epsilon(ep)
            train_stats = self.run_episode(env_seed(self.seed, ep), True, eps, True)
            losses = [ag.train() for ag in self.learners]
            last = ep == cfg.episodes - 1
            if ep == 0 or (ep + 1) % cfg.gamma_period == 0 or last:
                # gamma is the greedy policy's pooled ratio on training-side streams
                for j in range(cfg.gamma_rollouts):
                    self.run_episode(gamma_seed(self.seed, ep, j), False, 0.0, False, accumulate=True)
                for ag in self.learners:
                    if ag.cost_state.window_den > 0:
                        ag.gamma = gamma_episode_update(ag.cost_state)
                        ag.gamma_ema = ag.gamma if ag.gamma_ema is None else (
                            cfg.gamma_ema * ag.gamma_ema + (1 - cfg.gamma_ema) * ag.gamma)
            gamma_trace.append(np.array([ag.gamma for ag in self.learners]))
            ev = None
            if (ep + 1) % cfg.eval_every == 0 or ep == cfg.episodes - 1:
                ev = self.evaluate()
                final = ev
            for m, ag in enumerate(self.learners):
                tot = max(1, int(train_stats.offload_counts[m].sum()))
                row = dict(episode=ep, seed=self.seed, device=m,
                           eval_avg_aoi=None if ev is None else float(ev.avg_aoi[m]),
                           eval_discounted=None if ev is None else float(ev.discounted[m]),
                           gamma=ag.gamma, loss=losses[m], drops=int(train_stats.drops[m]),
                           offload_fraction=[c / tot for c in train_stats.offload_counts[m]])
                rows.append(row)
            if on_episode is not None:
                on_episode(ep, rows[-1])
        return TrainingResult(rows, self.learners, gamma_trace, final, self.collector)


def run_training(scenario: Scenario, config: LearnerConfig, seeds: Sequence[int]) -> list[TrainingResult]:
    return [MarlRunner(scenario, config, s).train() for s in seeds]


def evaluate_policy(scenario: Scenario, policy: Callable[[Decision], object], seed: int,
                    eval_episodes: int = 10, delta: float = 0.95, first: int = 0) -> EpisodeStats:
    """Score a fixed policy on evaluation streams first .. first+eval_episodes-1
    (first = 0 gives the streams the learners are evaluated on)."""
    return pool_stats([rollout(scenario, eval_seed(seed, first + j), policy, delta)
                       for j in range(eval_episodes)])


def run_baseline(scenario: Scenario, name: str, seed: int, episodes: int = 1, delta: float = 0.95,
                 wait_points: int = WAIT_GRID_POINTS, eval_episodes: int = 10) -> list[dict]:
    """Baseline rows in the learner's metric schema (one row per device per episode).

    Episode 0 uses the learners' evaluation streams; later episodes draw
    fresh streams so the trace shows sampling spread rather than a constant.
    """
    rows = []
    pol = BaselinePolicy(name, scenario, seed, wait_points)
    for ep in range(episodes):
        st = evaluate_policy(scenario, pol, seed, eval_episodes, delta, first=ep * eval_episodes)
        for m in range(scenario.n_devices):
            tot = max(1, int(st.offload_counts[m].sum()))
            rows.append(dict(episode=ep, seed=seed, device=m, eval_avg_aoi=float(st.avg_aoi[m]),
                             eval_discounted=float(st.discounted[m]), gamma=None, loss=None,
                             drops=int(st.drops[m]), offload_fraction=[c / tot for c in st.offload_counts[m]]))
    return rows


METRIC_FIELDS = ("episode", "seed", "device", "eval_avg_aoi", "gamma", "loss", "drops", "offload_fraction_per_edge")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.10g}"
    return str(v)


def write_metrics_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = schema_writer(fh, "marl-metrics", METRIC_FIELDS)
        for r in rows:
            frac = ";".join(f"{f:.6g}" for f in r["offload_fraction"])
            w.writerow([_fmt(r["episode"]), _fmt(r["seed"]), _fmt(r["device"]), _fmt(r["eval_avg_aoi"]),
                        _fmt(r["gamma"]), _fmt(r["loss"]), _fmt(r["drops"]), frac])


def mean_eval_aoi(rows: Sequence[dict], last: int = 1) -> float:
    """Device-mean evaluated AoI averaged over the last ``last`` evaluated episodes."""
    evals = sorted({r["episode"] for r in rows if r["eval_avg_aoi"] is not None})
    keep = set(evals[-last:])
    vals = [r["eval_avg_aoi"] for r in rows if r["episode"] in keep]
    return float(np.mean(vals))
