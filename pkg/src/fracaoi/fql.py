"""Fractional MDPs and Fractional Q-Learning (Dinkelbach outer loop over a
tabular Q-learning inner loop with N/D decomposed tables)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .csvio import schema_writer
from .events import RngStream

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class FractionalMdp:
    P: np.ndarray  # (S, A, S)
    cost_n: np.ndarray  # (S, A)
    cost_d: np.ndarray  # (S, A), strictly positive
    delta: float
    mu0: np.ndarray  # (S,)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.cost_n = np.asarray(self.cost_n, dtype=float)
        self.cost_d = np.asarray(self.cost_d, dtype=float)
        self.mu0 = np.asarray(self.mu0, dtype=float)
        S, A = self.cost_n.shape
        if self.P.shape != (S, A, S) or self.cost_d.shape != (S, A) or self.mu0.shape != (S,):
            raise ValueError("inconsistent MDP shapes")
        if np.any(np.abs(self.P.sum(axis=2) - 1.0) > 1e-12) or np.any(self.P < 0):
            raise ValueError("transition rows must be distributions")
        if np.any(self.cost_d <= 0):
            raise ValueError("denominator costs must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if abs(self.mu0.sum() - 1.0) > 1e-12:
            raise ValueError("mu0 must sum to 1")

    @property
    def n_states(self) -> int:
        return self.cost_n.shape[0]

    @property
    def n_actions(self) -> int:
        return self.cost_n.shape[1]

    @property
    def ratio_bounds(self) -> tuple[float, float]:
        r = self.cost_n / self.cost_d
        return float(r.min()), float(r.max())


def random_mdp(seed: int, n_states: int = 3, n_actions: int = 2, delta: float = 0.6,
               point_start: bool = True) -> FractionalMdp:
    """Seeded random fractional MDP with Dirichlet transitions."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    cost_d = rng.uniform(0.5, 2.0, size=(n_states, n_actions))
    cost_n = cost_d * rng.uniform(0.5, 3.0, size=(n_states, n_actions))
    mu0 = np.zeros(n_states)
    if point_start:
        mu0[0] = 1.0
    else:
        mu0[:] = 1.0 / n_states
    return FractionalMdp(P, cost_n, cost_d, delta, mu0)


def single_state_mdp(pairs, delta: float = 0.5) -> FractionalMdp:
    """One state, one action per (c_N, c_D) pair."""
    A = len(pairs)
    cn = np.array([[p[0] for p in pairs]], dtype=float)
    cd = np.array([[p[1] for p in pairs]], dtype=float)
    return FractionalMdp(np.ones((1, A, 1)), cn, cd, delta, np.ones(1))


@dataclass
class DecomposedQ:
    n_table: np.ndarray
    d_table: np.ndarray
    gamma: float
    # jointly updated Q, kept only to audit the identity q == n - gamma * d
    q_joint: Optional[np.ndarray] = None
    visits: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, n_states: int, n_actions: int, gamma: float) -> "DecomposedQ":
        z = np.zeros((n_states, n_actions))
        return cls(z.copy(), z.copy(), gamma, z.copy(), np.zeros((n_states, n_actions), dtype=np.int64))

    @property
    def q(self) -> np.ndarray:
        return self.n_table - self.gamma * self.d_table

    def greedy(self) -> np.ndarray:
        """Min-cost action per state; ties go to the lowest index."""
        return np.argmin(self.q, axis=1)

    def with_gamma(self, gamma: float) -> "DecomposedQ":
        q_joint = self.n_table - gamma * self.d_table
        return DecomposedQ(self.n_table.copy(), self.d_table.copy(), gamma, q_joint,
                           None if self.visits is None else self.visits.copy())


def learning_rate(visits: np.ndarray, schedule: str, exponent: float) -> np.ndarray:
    if schedule == "harmonic":
        return 1.0 / (1.0 + visits)
    if schedule == "polynomial":
        return 1.0 / (1.0 + visits) ** exponent
    if schedule == "constant":
        return np.full(visits.shape, exponent)
    raise ValueError(f"unknown learning-rate schedule {schedule!r}")


def _sample_next(P: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    S, A, _ = P.shape
    cum = np.cumsum(P, axis=2)
    u = gen.random((S, A, 1))
    idx = (u > cum).sum(axis=2)
    return np.minimum(idx, P.shape[2] - 1)


def inner_step(mdp: FractionalMdp, q: DecomposedQ, gen: Optional[np.random.Generator],
               backup: str = "sampled", schedule: str = "polynomial",
               exponent: float = 0.8) -> float:
    """One synchronous sweep over every (s, a); returns the max |target - q|.

    ``sampled`` draws one s' per pair from a generative model; ``expected``
    uses the exact expectation over s' (the noise-free limit of the same
    update). N and D share the sampled s' and the greedy a' of Q = N - gamma D.
    """
    S = mdp.n_states
    a_next = q.greedy()
    n_next = q.n_table[np.arange(S), a_next]
    d_next = q.d_table[np.arange(S), a_next]
    qj_next = q.q_joint[np.arange(S), a_next]
    if backup == "sampled":
        s_next = _sample_next(mdp.P, gen)
        boot_n, boot_d, boot_q = n_next[s_next], d_next[s_next], qj_next[s_next]
    elif backup == "expected":
        boot_n, boot_d, boot_q = mdp.P @ n_next, mdp.P @ d_next, mdp.P @ qj_next
    else:
        raise ValueError(f"unknown backup {backup!r}")
    lam = learning_rate(q.visits, schedule, exponent) if backup == "sampled" else 1.0
    tgt_n = mdp.cost_n + mdp.delta * boot_n
    tgt_d = mdp.cost_d + mdp.delta * boot_d
    tgt_q = mdp.cost_n - q.gamma * mdp.cost_d + mdp.delta * boot_q
    resid = float(np.max(np.abs(tgt_n - q.gamma * tgt_d - q.q)))
    q.n_table += lam * (tgt_n - q.n_table)
    q.d_table += lam * (tgt_d - q.d_table)
    q.q_joint += lam * (tgt_q - q.q_joint)
    q.visits += 1
    return resid


def inner_q_learning(mdp: FractionalMdp, gamma: float, budget: int, stream: Optional[RngStream],
                     q: Optional[DecomposedQ] = None, backup: str = "sampled",
                     schedule: str = "polynomial", exponent: float = 0.8,
                     stop: Optional[Callable[[DecomposedQ, int, float], bool]] = None) -> DecomposedQ:
    """Tabular Q-learning on cost c_N - gamma c_D for up to ``budget`` sweeps.

    ``stop(q, step, residual)`` is consulted after every sweep.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if q is None:
        q = DecomposedQ.zeros(mdp.n_states, mdp.n_actions, gamma)
    elif q.gamma != gamma:
        q = q.with_gamma(gamma)
    gen = stream.generator if stream is not None else None
    for k in range(budget):
        resid = inner_step(mdp, q, gen, backup, schedule, exponent)
        if stop is not None and stop(q, k + 1, resid):
            break
    return q


def stopping_check(q: DecomposedQ, s0: int, epsilon_i: float, alpha: float) -> bool:
    """epsilon_i < -alpha * Q_i(s0, a_i) with a_i greedy at s0."""
    a = int(np.argmin(q.q[s0]))
    return bool(epsilon_i < -alpha * q.q[s0, a])


def proposition_a1_budget(state_action_count: int, episodes: int, zeta: float, alpha: float) -> int:
    """ceil(11.66 ln(2|Z| / (E zeta)) / alpha^2) inner steps, floored at 1."""
    if state_action_count <= 0 or episodes <= 0 or zeta <= 0:
        raise ValueError("arguments must be positive")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    arg = 2.0 * state_action_count / (episodes * zeta)
    if arg <= 1.0:
        log.warning("log argument %.3g <= 1: inner budget floored to 1 step", arg)
        return 1
    return max(1, math.ceil(11.66 * math.log(arg) / alpha ** 2))


def dinkelbach_update(q: DecomposedQ, mu0: np.ndarray) -> float:
    """gamma' = E_{s0 ~ mu0}[N(s0, a) / D(s0, a)] with a greedy per s0."""
    mu0 = np.asarray(mu0, dtype=float)
    a = q.greedy()
    idx = np.arange(len(a))
    num, den = q.n_table[idx, a], q.d_table[idx, a]
    support = mu0 > 0
    if np.any(den[support] <= 0):
        raise ZeroDivisionError("non-positive denominator at a greedy entry")
    return float(np.sum(mu0[support] * num[support] / den[support]))


@dataclass
class FqlConfig:
    alpha: float = 0.3
    zeta: float = 0.1
    episodes: int = 40  # outer iterations E
    tol: float = 1e-6
    budget_mode: str = "fixed"  # fixed | proposition
    inner_steps: int = 2000
    max_inner_steps: int = 20000
    backup: str = "sampled"
    schedule: str = "polynomial"
    exponent: float = 0.8
    warm_start: bool = False
    stopping: bool = True  # False runs the full budget every outer iteration
    gamma0: Optional[float] = None

    def __post_init__(self):
        if self.backup not in ("sampled", "expected"):
            raise ValueError(f"unknown backup {self.backup!r}")
        if self.budget_mode not in ("fixed", "proposition"):
            raise ValueError(f"unknown budget mode {self.budget_mode!r}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0 < self.zeta < 1:
            raise ValueError("zeta must lie in (0, 1)")


@dataclass
class FqlResult:
    gamma_trace: list[float]
    policy: np.ndarray
    q: DecomposedQ
    rows: list[dict] = field(default_factory=list)

    @property
    def gamma(self) -> float:
        return self.gamma_trace[-1]

    def contraction_ratios(self, gamma_star: float, floor: float = 1e-9) -> list[float]:
        """(gamma_{i+1} - g*) / (gamma_i - g*) until the gap hits the floor."""
        return contraction_ratios(self.gamma_trace, gamma_star, floor)


def contraction_ratios(trace, gamma_star: float, floor: float = 1e-9) -> list[float]:
    gaps = np.asarray(trace, dtype=float) - gamma_star
    out = []
    for i in range(len(gaps) - 1):
        if abs(gaps[i]) <= floor * max(1.0, abs(gamma_star)):
            break
        out.append(float(gaps[i + 1] / gaps[i]))
    return out


def sign_stable_tail(trace, gamma_star: float, floor: float = 1e-9) -> list[float]:
    """Contraction ratios from the first iterate after which the gap keeps one sign."""
    ratios = contraction_ratios(trace, gamma_star, floor)
    gaps = np.sign(np.asarray(trace[:len(ratios) + 1], dtype=float) - gamma_star)
    start = next(i for i in range(len(gaps)) if np.all(gaps[i:] == gaps[-1]))
    return ratios[start:]


def run_fql(mdp: FractionalMdp, config: FqlConfig, stream: Optional[RngStream],
            q_star: Optional[Callable[[float], np.ndarray]] = None,
            gamma_star: Optional[float] = None) -> FqlResult:
    """Alternate inner Q-learning and the Dinkelbach update.

    Each inner loop runs until the stopping condition eps_i < -alpha Q_i(s0, a_i)
    holds (checked every sweep) or the step budget is spent. ``q_star(gamma)``
    supplies the exact Q*_gamma so eps_i is the true sup-norm error; without
    it eps_i is the Bellman-residual bound residual / (1 - delta).
    """
    lo, hi = 0.0, mdp.ratio_bounds[1]
    s0 = int(np.argmax(mdp.mu0))
    if config.gamma0 is not None:
        gamma = float(config.gamma0)
    else:
        gamma = mdp.ratio_bounds[1]
    trace = [gamma]
    rows: list[dict] = []
    if config.budget_mode == "proposition":
        budget = proposition_a1_budget(mdp.n_states * mdp.n_actions, config.episodes,
                                       config.zeta, config.alpha)
    else:
        budget = config.inner_steps
    budget = min(budget, config.max_inner_steps)
    q = None
    for i in range(config.episodes):
        target = q_star(gamma) if q_star is not None else None
        info = {}

        def stop(qq: DecomposedQ, step: int, resid: float) -> bool:
            if target is not None:
                eps = float(np.max(np.abs(target - qq.q)))
            else:
                eps = resid / (1.0 - mdp.delta)
            info.update(eps=eps, proxy=resid / (1.0 - mdp.delta), steps=step)
            return config.stopping and stopping_check(qq, s0, eps, config.alpha)

        q = inner_q_learning(mdp, gamma, budget, stream,
                             q if (config.warm_start and q is not None) else None,
                             config.backup, config.schedule, config.exponent, stop)
        a0 = int(q.greedy()[s0])
        q_i = float(q.q[s0, a0])
        new_gamma = dinkelbach_update(q, mdp.mu0)
        if not lo - 1e-9 <= new_gamma <= hi + 1e-9:
            raise DivergenceError(f"gamma {new_gamma} left [{lo}, {hi}]")
        row = dict(i=i, gamma=gamma, q_s0=q_i, eps=info.get("eps"), eps_proxy=info.get("proxy"),
                   inner_steps=info.get("steps"), stop_held=bool(info) and info["eps"] < -config.alpha * q_i)
        if gamma_star is not None and abs(gamma - gamma_star) > 1e-9 * max(1.0, abs(gamma_star)):
            row["ratio"] = (new_gamma - gamma_star) / (gamma - gamma_star)
        rows.append(row)
        trace.append(new_gamma)
        done = abs(new_gamma - gamma) < config.tol
        gamma = new_gamma
        if done:
            break
    q.gamma = gamma
    return FqlResult(trace, q.greedy(), q, rows)


def write_fql_csv(path, result: FqlResult) -> None:
    with open(path, "w", newline="") as fh:
        w = schema_writer(fh, "fql-trace", ["i", "gamma", "q_s0", "eps_proxy", "ratio"])
        for r in result.rows:
            w.writerow([r["i"], f"{r['gamma']:.12g}", f"{r['q_s0']:.12g}",
                        "" if r.get("eps_proxy") is None else f"{r['eps_proxy']:.6g}",
                        "" if r.get("ratio") is None else f"{r['ratio']:.6g}"])
        w.writerow([len(result.rows), f"{result.gamma:.12g}", "", "", ""])
