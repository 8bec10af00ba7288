"""Fractional Nash Q-learning for tabular general-sum Markov games.

Each agent keeps numerator/denominator tables over (state, joint action).
Stage games are solved by Gauss-Seidel best response over pure actions, and
the outer loop applies gamma_m <- N_m / D_m, which is a Newton step with the
Jacobian replaced by -diag(D).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .csvio import schema_writer
from .events import RngStream
from .fql import _sample_next, learning_rate


class MaxIterationsError(RuntimeError):
    pass


@dataclass
class MarkovGame:
    action_counts: tuple[int, ...]
    P: np.ndarray  # (S, J, S), J = prod(action_counts)
    cost_n: np.ndarray  # (M, S, J)
    cost_d: np.ndarray  # (M, S, J), > 0
    delta: float
    mu0: np.ndarray  # (S,)

    def __post_init__(self):
        self.action_counts = tuple(int(a) for a in self.action_counts)
        self.P = np.asarray(self.P, dtype=float)
        self.cost_n = np.asarray(self.cost_n, dtype=float)
        self.cost_d = np.asarray(self.cost_d, dtype=float)
        self.mu0 = np.asarray(self.mu0, dtype=float)
        M, S, J = self.cost_n.shape
        if M != len(self.action_counts) or J != int(np.prod(self.action_counts)):
            raise ValueError("cost tables do not match the action sets")
        if self.P.shape != (S, J, S) or self.cost_d.shape != (M, S, J) or self.mu0.shape != (S,):
            raise ValueError("inconsistent game shapes")
        if np.any(np.abs(self.P.sum(axis=2) - 1.0) > 1e-12) or np.any(self.P < 0):
            raise ValueError("transition rows must be distributions")
        if np.any(self.cost_d <= 0):
            raise ValueError("denominator costs must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if abs(self.mu0.sum() - 1.0) > 1e-12:
            raise ValueError("mu0 must sum to 1")

    @property
    def n_agents(self) -> int:
        return len(self.action_counts)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_joint(self) -> int:
        return self.P.shape[1]

    def gamma_bar(self) -> np.ndarray:
        return (self.cost_n / self.cost_d).reshape(self.n_agents, -1).max(axis=1)

    def joint_index(self, actions: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(actions), self.action_counts))

    def joint_actions(self, j: int) -> tuple[int, ...]:
        return tuple(int(a) for a in np.unravel_index(j, self.action_counts))

    @classmethod
    def from_mdp(cls, mdp) -> "MarkovGame":
        return cls((mdp.n_actions,), mdp.P, mdp.cost_n[None], mdp.cost_d[None], mdp.delta, mdp.mu0)


def decoupled_game(mdps: Sequence) -> MarkovGame:
    """Product game in which agent m's state component, transitions and costs
    depend on its own action only."""
    sizes = [m.n_states for m in mdps]
    acts = [m.n_actions for m in mdps]
    S, J, M = int(np.prod(sizes)), int(np.prod(acts)), len(mdps)
    P = np.ones((S, J, S))
    cn = np.empty((M, S, J))
    cd = np.empty((M, S, J))
    for s in range(S):
        ss = np.unravel_index(s, sizes)
        for j in range(J):
            aa = np.unravel_index(j, acts)
            for s2 in range(S):
                ss2 = np.unravel_index(s2, sizes)
                P[s, j, s2] = np.prod([mdps[m].P[ss[m], aa[m], ss2[m]] for m in range(M)])
            for m in range(M):
                cn[m, s, j] = mdps[m].cost_n[ss[m], aa[m]]
                cd[m, s, j] = mdps[m].cost_d[ss[m], aa[m]]
    mu0 = np.ones(S)
    for s in range(S):
        ss = np.unravel_index(s, sizes)
        mu0[s] = np.prod([mdps[m].mu0[ss[m]] for m in range(M)])
    return MarkovGame(tuple(acts), P, cn, cd, mdps[0].delta, mu0)


def random_game(seed: int, n_states: int = 2, action_counts=(2, 2), delta: float = 0.6) -> MarkovGame:
    rng = np.random.default_rng(seed)
    M, J = len(action_counts), int(np.prod(action_counts))
    P = rng.dirichlet(np.ones(n_states), size=(n_states, J))
    cd = rng.uniform(0.5, 2.0, size=(M, n_states, J))
    cn = cd * rng.uniform(0.5, 3.0, size=(M, n_states, J))
    mu0 = np.zeros(n_states)
    mu0[0] = 1.0
    return MarkovGame(tuple(action_counts), P, cn, cd, delta, mu0)


@dataclass
class NashQTables:
    n_table: np.ndarray  # (M, S, J)
    d_table: np.ndarray
    gamma: np.ndarray  # (M,)
    q_joint: np.ndarray
    visits: np.ndarray  # (S, J)

    @classmethod
    def zeros(cls, game: MarkovGame, gamma) -> "NashQTables":
        z = np.zeros_like(game.cost_n)
        return cls(z.copy(), z.copy(), np.asarray(gamma, dtype=float).copy(), z.copy(),
                   np.zeros(game.cost_n.shape[1:], dtype=np.int64))

    @property
    def q(self) -> np.ndarray:
        return self.n_table - self.gamma[:, None, None] * self.d_table

    def set_gamma(self, gamma) -> None:
        self.gamma = np.asarray(gamma, dtype=float).copy()
        self.q_joint = self.q.copy()


def nash_operator_approx(q: np.ndarray, action_counts: Sequence[int], state: int,
                         rounds: int = 10) -> tuple[tuple[int, ...], bool]:
    """Iterative best response on the stage game q[:, state, :] (costs).

    Returns (joint action, cycled) where ``cycled`` means no sweep came back
    unchanged within ``rounds``.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    M = len(action_counts)
    stage = q[:, state, :].reshape((M,) + tuple(action_counts))
    acts = [0] * M
    for _ in range(rounds):
        changed = False
        for m in range(M):
            idx = list(acts)
            idx[m] = slice(None)
            br = int(np.argmin(stage[(m,) + tuple(idx)]))
            if br != acts[m]:
                acts[m] = br
                changed = True
        if not changed:
            return tuple(acts), False
    return tuple(acts), True


def nash_actions(tables: NashQTables, game: MarkovGame, rounds: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Per-state Nash joint-action index and cycle flags."""
    q = tables.q
    out = np.empty(game.n_states, dtype=int)
    cyc = np.zeros(game.n_states, dtype=bool)
    for s in range(game.n_states):
        a, c = nash_operator_approx(q, game.action_counts, s, rounds)
        out[s] = game.joint_index(a)
        cyc[s] = c
    return out, cyc


def nashq_update(tables: NashQTables, s: int, j: int, cost_n: np.ndarray, cost_d: np.ndarray,
                 s_next: int, j_next: int, delta: float, lam: float) -> None:
    """Single-transition update of every agent's N, D (and audit Q) entry;
    ``j_next`` is the Nash joint action at s_next, shared by all tables."""
    if not 0 <= lam <= 1:
        raise ValueError("learning rate must lie in [0, 1]")
    g = tables.gamma
    tgt_n = cost_n + delta * tables.n_table[:, s_next, j_next]
    tgt_d = cost_d + delta * tables.d_table[:, s_next, j_next]
    tgt_q = cost_n - g * cost_d + delta * tables.q_joint[:, s_next, j_next]
    tables.n_table[:, s, j] += lam * (tgt_n - tables.n_table[:, s, j])
    tables.d_table[:, s, j] += lam * (tgt_d - tables.d_table[:, s, j])
    tables.q_joint[:, s, j] += lam * (tgt_q - tables.q_joint[:, s, j])


def nash_sweep(tables: NashQTables, game: MarkovGame, gen: Optional[np.random.Generator],
               backup: str = "sampled", schedule: str = "harmonic", exponent: float = 1.0,
               rounds: int = 10) -> np.ndarray:
    """Synchronous update of every (s, joint action); the vectorised form of
    nashq_update applied to all entries with one Nash action per s'.
    Returns the Nash joint actions the sweep backed up from."""
    S = game.n_states
    a_next, _ = nash_actions(tables, game, rounds)
    idx = np.arange(S)
    n_next = tables.n_table[:, idx, a_next]  # (M, S)
    d_next = tables.d_table[:, idx, a_next]
    q_next = tables.q_joint[:, idx, a_next]
    if backup == "sampled":
        s_next = _sample_next(game.P, gen)  # (S, J)
        bn, bd, bq = n_next[:, s_next], d_next[:, s_next], q_next[:, s_next]
    elif backup == "expected":
        bn = np.einsum("sjt,mt->msj", game.P, n_next)
        bd = np.einsum("sjt,mt->msj", game.P, d_next)
        bq = np.einsum("sjt,mt->msj", game.P, q_next)
    else:
        raise ValueError(f"unknown backup {backup!r}")
    lam = learning_rate(tables.visits, schedule, exponent)[None] if backup == "sampled" else 1.0
    g = tables.gamma[:, None, None]
    tables.n_table += lam * (game.cost_n + game.delta * bn - tables.n_table)
    tables.d_table += lam * (game.cost_d + game.delta * bd - tables.d_table)
    tables.q_joint += lam * (game.cost_n - g * game.cost_d + game.delta * bq - tables.q_joint)
    tables.visits += 1
    return a_next


def nash_value_estimates(tables: NashQTables, game: MarkovGame, rounds: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """(N_m, D_m) = E_{s0 ~ mu0} of the tables at the Nash joint action."""
    a, _ = nash_actions(tables, game, rounds)
    idx = np.arange(game.n_states)
    n = tables.n_table[:, idx, a] @ game.mu0
    d = tables.d_table[:, idx, a] @ game.mu0
    return n, d


def outer_gamma_update(n_values, d_values) -> np.ndarray:
    n = np.asarray(n_values, dtype=float)
    d = np.asarray(d_values, dtype=float)
    if np.any(d <= 0):
        raise ZeroDivisionError("denominator estimates must be positive")
    return n / d


@dataclass
class FnqlConfig:
    inner_steps: int = 500  # K sweeps per outer iteration
    eps: float = 1e-3
    max_outer: int = 50
    rounds: int = 10
    backup: str = "sampled"
    schedule: str = "harmonic"
    exponent: float = 1.0
    warm_start: bool = False
    gamma0: Optional[Sequence[float]] = None


@dataclass
class NewtonDiagnostics:
    F_vectors: list[np.ndarray]
    residuals: list[np.ndarray]
    eta: list[float]
    d_min: float
    eta_max: float
    eta_below_one: bool
    constants: dict = field(default_factory=lambda: {k: "not estimable" for k in
                                                    ("mu", "C_D", "C_int", "H_int", "K", "kappa")})


@dataclass
class FnqlResult:
    gamma_traces: np.ndarray  # (iterations + 1, M)
    joint_policy: np.ndarray  # (M, S)
    history: list[dict]
    diagnostics: Optional[NewtonDiagnostics]
    converged: bool
    tables: NashQTables


def _joint_to_policy(game: MarkovGame, joint_idx: np.ndarray) -> np.ndarray:
    return np.array([game.joint_actions(j) for j in joint_idx], dtype=int).T


def run_fnql(game: MarkovGame, config: FnqlConfig, stream: Optional[RngStream],
             gamma_star: Optional[np.ndarray] = None, raise_on_limit: bool = False) -> FnqlResult:
    """Alternate K Nash-Q sweeps with gamma_m <- N_m / D_m until ||F||_inf <= eps.

    ``converged`` also requires the Nash actions to have settled over the last
    quarter of the final inner loop.
    """
    gbar = game.gamma_bar()
    gamma = gbar.copy() if config.gamma0 is None else np.asarray(config.gamma0, dtype=float)
    gen = stream.generator if stream is not None else None
    traces = [gamma.copy()]
    history = []
    tables = None
    converged = False
    for i in range(config.max_outer):
        if tables is None or not config.warm_start:
            tables = NashQTables.zeros(game, gamma)
        else:
            tables.set_gamma(gamma)
        last_change = 0
        prev = None
        for k in range(config.inner_steps):
            a_k = nash_sweep(tables, game, gen, config.backup, config.schedule, config.exponent, config.rounds)
            if prev is not None and not np.array_equal(a_k, prev):
                last_change = k
            prev = a_k
        a, cyc = nash_actions(tables, game, config.rounds)
        # sweeps that keep switching Nash actions leave N, D evaluating a policy mix
        stable = bool(np.array_equal(a, prev)) and config.inner_steps - last_change > config.inner_steps // 4
        n, d = nash_value_estimates(tables, game, config.rounds)
        F = n - gamma * d
        rec = dict(i=i, gamma=gamma.copy(), N=n, D=d, F=F, joint=a.copy(), cycled=bool(cyc.any()),
                   inner_stable=stable)
        if gamma_star is not None:
            rec["gap"] = float(np.max(np.abs(gamma - gamma_star)))
        history.append(rec)
        if np.max(np.abs(F)) <= config.eps:
            converged = stable
            break
        gamma = np.clip(outer_gamma_update(n, d), 0.0, gbar)
        traces.append(gamma.copy())
    if not converged and raise_on_limit:
        raise MaxIterationsError(f"no convergence in {config.max_outer} outer iterations")
    policy = _joint_to_policy(game, history[-1]["joint"])
    diag = newton_residual_diagnostics(history, game) if len(history) >= 2 else None
    return FnqlResult(np.array(traces), policy, history, diag, converged, tables)


def newton_residual_diagnostics(history: Sequence[dict], game: MarkovGame,
                                eta_cap: float = 1.0) -> NewtonDiagnostics:
    """Residual left by the diagonal Jacobian.

    Against -diag(D) the step s = F / D solves the linear model exactly, so the
    only residual comes from what the diagonal drops: how agent m's F moves
    when the other agents change policy. With exact values,
    r_m = F_m(pi_{i+1}) - F_m(pi_{m,i+1}, pi_{-m,i}) at gamma_{i+1}, which is
    identically zero for one agent and for decoupled games.
    """
    from .oracles import exact_discounted_values, induced_mdp

    if len(history) < 2:
        raise ValueError("need at least two outer iterations")
    Fs, rs, etas = [], [], []
    d_min = float(min(np.min(h["D"]) for h in history))
    for prev, cur in zip(history[:-1], history[1:]):
        pol_prev = _joint_to_policy(game, prev["joint"])
        pol_cur = _joint_to_policy(game, cur["joint"])
        g = cur["gamma"]
        r = np.zeros(game.n_agents)
        for m in range(game.n_agents):
            mixed = pol_prev.copy()
            mixed[m] = pol_cur[m]
            vals = []
            for jp in (pol_cur, mixed):
                mdp = induced_mdp(game, m, jp)
                n, d = exact_discounted_values(mdp, jp[m])
                vals.append(game.mu0 @ n - g[m] * (game.mu0 @ d))
            r[m] = vals[0] - vals[1]
        F = prev["F"]
        fn = float(np.max(np.abs(F)))
        rn = float(np.max(np.abs(r)))
        eta = 0.0 if rn == 0.0 else (rn / fn if fn > 0 else float("inf"))
        Fs.append(F)
        rs.append(r)
        etas.append(eta)
    eta_max = max(etas)
    return NewtonDiagnostics(Fs, rs, etas, d_min, eta_max, eta_max < eta_cap)


def write_fnql_csv(path, result: FnqlResult) -> None:
    etas = result.diagnostics.eta if result.diagnostics else []
    with open(path, "w", newline="") as fh:
        w = schema_writer(fh, "fnql-trace", ["i", "agent", "gamma", "N", "D", "F", "eta"])
        for k, h in enumerate(result.history):
            for m in range(len(h["gamma"])):
                eta = f"{etas[k]:.6g}" if k < len(etas) else ""
                w.writerow([h["i"], m, f"{h['gamma'][m]:.12g}", f"{h['N'][m]:.12g}",
                            f"{h['D'][m]:.12g}", f"{h['F'][m]:.6g}", eta])
