"""Brute-force ground truth for the learners and the AoI bookkeeping.

Nothing here calls into the learning or accounting code: values come from
direct linear solves, policies from exhaustive enumeration, and the sawtooth
integral from its own breakpoint walk.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

ENUMERATION_CAP = 10 ** 6


class EnumerationCapError(ValueError):
    pass


class OracleDisagreement(AssertionError):
    pass


def _policy_matrices(P, cost_n, cost_d, policy):
    S = cost_n.shape[0]
    idx = np.arange(S)
    policy = np.asarray(policy, dtype=int)
    return P[idx, policy], cost_n[idx, policy], cost_d[idx, policy]


def exact_discounted_values(mdp, policy) -> tuple[np.ndarray, np.ndarray]:
    """Solve (I - delta P_pi) N = c_N^pi and the same for D."""
    P_pi, cn, cd = _policy_matrices(mdp.P, mdp.cost_n, mdp.cost_d, policy)
    A = np.eye(len(cn)) - mdp.delta * P_pi
    sol = np.linalg.solve(A, np.column_stack([cn, cd]))
    return sol[:, 0], sol[:, 1]


def policy_objective(mdp, policy) -> float:
    n, d = exact_discounted_values(mdp, policy)
    return float(mdp.mu0 @ n / (mdp.mu0 @ d))


def _check_cap(count: int, cap: int) -> None:
    if count > cap:
        raise EnumerationCapError(f"{count} policies exceed the cap {cap}")


def _exact_dinkelbach(mdp, max_iter: int = 200) -> tuple[float, np.ndarray]:
    """Dinkelbach with exact policy iteration as the inner solver."""
    S, A = mdp.cost_n.shape
    policy = np.zeros(S, dtype=int)
    gamma = policy_objective(mdp, policy)
    for _ in range(max_iter):
        # policy iteration on c_N - gamma c_D
        c = mdp.cost_n - gamma * mdp.cost_d
        pol = policy.copy()
        for _ in range(1000):
            P_pi = mdp.P[np.arange(S), pol]
            v = np.linalg.solve(np.eye(S) - mdp.delta * P_pi, c[np.arange(S), pol])
            q = c + mdp.delta * mdp.P @ v
            best = q.min(axis=1)
            new = pol.copy()
            # only switch on strict improvement so the loop terminates
            improve = best < q[np.arange(S), pol] - 1e-13 * (1 + np.abs(best))
            new[improve] = np.argmin(q, axis=1)[improve]
            if np.array_equal(new, pol):
                break
            pol = new
        new_gamma = policy_objective(mdp, pol)
        if new_gamma >= gamma - 1e-15 * max(1.0, abs(gamma)):
            return min(gamma, new_gamma), (pol if new_gamma <= gamma else policy)
        gamma, policy = new_gamma, pol
    return gamma, policy


def exact_gamma_star(mdp, cap: int = ENUMERATION_CAP, tol: float = 1e-10) -> tuple[float, np.ndarray]:
    """Minimum of E_mu0[N]/E_mu0[D] over deterministic stationary policies.

    Enumeration result, confirmed against exact Dinkelbach.
    """
    S, A = mdp.cost_n.shape
    _check_cap(A ** S, cap)
    best, best_pol = math.inf, None
    for pol in itertools.product(range(A), repeat=S):
        val = policy_objective(mdp, pol)
        if val < best - 1e-15:
            best, best_pol = val, np.array(pol)
    dk, _ = _exact_dinkelbach(mdp)
    if abs(dk - best) > tol * max(1.0, abs(best)):
        raise OracleDisagreement(f"enumeration {best} vs Dinkelbach {dk}")
    return float(best), best_pol


def optimal_q(mdp, gamma: float, iters: int = 1000) -> np.ndarray:
    """Q*_gamma for cost c_N - gamma c_D via exact policy iteration."""
    S, A = mdp.cost_n.shape
    c = mdp.cost_n - gamma * mdp.cost_d
    pol = np.zeros(S, dtype=int)
    for _ in range(iters):
        v = np.linalg.solve(np.eye(S) - mdp.delta * mdp.P[np.arange(S), pol], c[np.arange(S), pol])
        q = c + mdp.delta * mdp.P @ v
        improve = q.min(axis=1) < q[np.arange(S), pol] - 1e-13 * (1 + np.abs(v))
        if not improve.any():
            return q
        pol = np.where(improve, np.argmin(q, axis=1), pol)
    return q


# --- Markov games ---------------------------------------------------------

def _joint_index(game, actions: Sequence[int]) -> int:
    return int(np.ravel_multi_index(tuple(actions), game.action_counts))


def induced_mdp_arrays(game, agent: int, joint_policy: np.ndarray):
    """Transition and cost arrays seen by ``agent`` when others play fixed
    deterministic policies; joint_policy has shape (M, S)."""
    S = game.n_states
    A = game.action_counts[agent]
    P = np.empty((S, A, S))
    cn = np.empty((S, A))
    cd = np.empty((S, A))
    for s in range(S):
        acts = [int(joint_policy[m][s]) for m in range(game.n_agents)]
        for a in range(A):
            acts[agent] = a
            j = _joint_index(game, acts)
            P[s, a] = game.P[s, j]
            cn[s, a] = game.cost_n[agent, s, j]
            cd[s, a] = game.cost_d[agent, s, j]
    return P, cn, cd


@dataclass
class _InducedMdp:
    P: np.ndarray
    cost_n: np.ndarray
    cost_d: np.ndarray
    delta: float
    mu0: np.ndarray


def induced_mdp(game, agent: int, joint_policy) -> _InducedMdp:
    P, cn, cd = induced_mdp_arrays(game, agent, np.asarray(joint_policy))
    return _InducedMdp(P, cn, cd, game.delta, np.asarray(game.mu0, dtype=float))


def agent_objective(game, agent: int, joint_policy) -> float:
    mdp = induced_mdp(game, agent, joint_policy)
    return policy_objective(mdp, np.asarray(joint_policy)[agent])


def nash_deviation_scan(game, joint_policy, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """Largest objective decrease any single agent gets by deviating to
    another deterministic stationary policy (0 means none helps)."""
    joint_policy = np.asarray(joint_policy, dtype=int)
    out = np.zeros(game.n_agents)
    for m in range(game.n_agents):
        A = game.action_counts[m]
        _check_cap(A ** game.n_states, cap)
        mdp = induced_mdp(game, m, joint_policy)
        current = policy_objective(mdp, joint_policy[m])
        best = current
        for pol in itertools.product(range(A), repeat=game.n_states):
            best = min(best, policy_objective(mdp, pol))
        out[m] = current - best
    return out


def pure_equilibria(game, eps: float = 1e-12, cap: int = ENUMERATION_CAP) -> list[np.ndarray]:
    """All deterministic stationary joint policies certified by the scan."""
    per_agent = [list(itertools.product(range(a), repeat=game.n_states)) for a in game.action_counts]
    _check_cap(int(np.prod([len(p) for p in per_agent])), cap)
    found = []
    for combo in itertools.product(*per_agent):
        jp = np.array(combo, dtype=int)
        if np.all(nash_deviation_scan(game, jp, cap) <= eps):
            found.append(jp)
    return found


# --- AoI ------------------------------------------------------------------

def sawtooth_integral(log, window: tuple[float, float], device: int = 0) -> float:
    """Integral of t - T(t) over the window, T(t) = freshest generation time
    among tasks delivered by t (the log origin before any delivery)."""
    a, b = window
    if b < a:
        raise ValueError("window end precedes start")
    resets = sorted((r.finish, r.generation) for r in log.records(device) if not r.dropped)
    # freshest generation time as a step function of t
    times = [log.origin]
    refs = [log.origin]
    for fin, gen in resets:
        new_ref = max(refs[-1], gen)
        if fin == times[-1]:
            refs[-1] = new_ref
        else:
            times.append(fin)
            refs.append(new_ref)
    total = 0.0
    for k, (t0, ref) in enumerate(zip(times, refs)):
        t1 = times[k + 1] if k + 1 < len(times) else math.inf
        lo, hi = max(t0, a), min(t1, b)
        if k == 0:
            lo = a if a < t1 else lo
        if hi <= lo:
            continue
        # mean height of a line segment times its width
        total += (hi - lo) * ((lo - ref) + (hi - ref)) / 2.0
    return total


# --- constant-wait policies -------------------------------------------------

@dataclass
class WaitScan:
    grid: np.ndarray
    avg_aoi: np.ndarray  # device-mean time-average AoI per grid point

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.avg_aoi))

    @property
    def best_wait(self) -> float:
        return float(self.grid[self.best_index])

    @property
    def best_aoi(self) -> float:
        return float(self.avg_aoi[self.best_index])


def constant_wait_aoi(scenario, wait: float, env_seeds: Sequence[int]) -> float:
    """Device-mean time-average AoI of 'wait a fixed time, then offload to
    the shortest edge queue', averaged over the given environment seeds."""
    from .mec import Indicator, MecEnv, Offload, Wait

    vals = []
    for s in env_seeds:
        env = MecEnv(scenario, s, record_events=False)
        while True:
            d = env.advance_until_decision(scenario.horizon)
            if d is None:
                break
            if d.kind is Indicator.NeedsUpdate:
                env.apply_action(d.device, Wait(float(wait)))
            else:
                env.apply_action(d.device, Offload(1 + int(np.argmin(d.state.queue_lengths))))
        h = scenario.horizon
        vals.append(np.mean([sawtooth_integral(env.log, (0.0, h), m) / h for m in range(scenario.n_devices)]))
    return float(np.mean(vals))


def constant_wait_scan(scenario, env_seeds: Sequence[int], points: int = 11) -> WaitScan:
    """Scan the waits {0, Ybar/(points-1), ..., Ybar}."""
    grid = np.linspace(0.0, scenario.deadline, points)
    return WaitScan(grid, np.array([constant_wait_aoi(scenario, z, env_seeds) for z in grid]))
