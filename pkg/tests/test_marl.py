from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chisquare, linregress

import fracaoi.marl as marl
from fracaoi.aoi import FractionalCost, discounted_fractional_objective, task_costs
from fracaoi.approximators import gru_params, gru_step
from fracaoi.csvio import read_schema_csv
from fracaoi.marl import (AgentLearner, BaselinePolicy, CollectorOrderError, CostModuleState, EpisodeStats,
                          HistoryCollector, LearnerConfig, MarlRunner, Transition, cost_from_pair, embed_dim,
                          feature_dim, fractional_cost, gamma_episode_update, pool_stats, run_baseline, wait_grid,
                          write_metrics_csv)
from fracaoi.mec import Indicator, MecEnv, Offload, Scenario, Wait

SMALL = Scenario(n_devices=3, n_edges=2, n_subchannels=3, horizon=40.0)
QUICK = LearnerConfig(episodes=3, gamma_period=2, eval_every=3, eval_episodes=2, gamma_rollouts=2,
                      train_steps=10, batch=8, hidden=8, history_dim=4)


@pytest.mark.parametrize("args,gamma,frac,expected", [
    ((1, 0, 1), 1.5, True, 0.0), ((1, 0, 1), 0.0, False, 1.5), ((2, 1, 1), 1.0, True, 4.5)])
def test_fractional_cost_examples(args, gamma, frac, expected):
    assert fractional_cost(*args, gamma, frac) == pytest.approx(expected)


def test_gamma_update_example():
    st = CostModuleState(0.5)
    for _ in range(2):
        st.add(FractionalCost(1.5, 1.0))
    st.close_episode()
    assert gamma_episode_update(st) == pytest.approx(1.5)
    with pytest.raises(ZeroDivisionError):
        gamma_episode_update(st)


def test_gamma_update_equals_episode_objective():
    env = MecEnv(SMALL, 5)
    pol = BaselinePolicy("zero-wait", SMALL, 0)
    while (d := env.advance_until_decision(SMALL.horizon)) is not None:
        env.apply_action(d.device, pol(d))
    costs = task_costs(env.log.records(0))
    st = CostModuleState(0.95)
    for c in costs:
        st.add(c)
    st.close_episode()
    assert gamma_episode_update(st) == pytest.approx(discounted_fractional_objective(costs, 0.95), rel=1e-12)


def test_cost_mode_zero_at_gamma_root():
    env = MecEnv(SMALL, 8)
    pol = BaselinePolicy("random", SMALL, 8)
    while (d := env.advance_until_decision(SMALL.horizon)) is not None:
        env.apply_action(d.device, pol(d))
    for m in range(SMALL.n_devices):
        costs = task_costs(env.log.records(m))
        g = discounted_fractional_objective(costs, 0.95)
        total = sum(0.95 ** k * cost_from_pair(c, g, True) for k, c in enumerate(costs))
        scale = sum(0.95 ** k * c.c_n for k, c in enumerate(costs))
        assert abs(total) <= 1e-9 * max(1.0, scale)


def zero_learner(**kw):
    cfg = LearnerConfig(model="linear", history_dim=4, **kw)
    return AgentLearner(0, SMALL, cfg, 0), feature_dim(SMALL, 4)


def test_untrained_greedy_takes_lowest_index():
    ag, n_in = zero_learner()
    x = np.random.default_rng(0).normal(size=n_in)
    assert ag.act(Indicator.NeedsUpdate, x, explore=False)[0] == Wait(0.0)
    assert ag.act(Indicator.NeedsOffload, x, explore=False)[0] == Offload(0)
    with pytest.raises(ValueError):
        ag.act(Indicator.Busy, x, explore=False)


def test_full_exploration_is_uniform():
    ag, n_in = zero_learner()
    x = np.zeros(n_in)
    for kind, n in ((Indicator.NeedsUpdate, 11), (Indicator.NeedsOffload, 3)):
        draws = [ag.act(kind, x, explore=True, epsilon=1.0)[1] for _ in range(10 ** 4)]
        counts = np.bincount(draws, minlength=n)
        assert len(counts) == n
        assert chisquare(counts).pvalue > 0.01


def test_wait_grid_covers_deadline():
    g = wait_grid(5.0)
    assert len(g) == 11 and g[0] == 0.0 and g[-1] == 5.0


def test_one_hot_step_hits_target_exactly():
    # loss mean (Q - y)^2 with one-hot x: weight and bias both move, so
    # lr = 1 / (2 (|x|^2 + 1)) = 1/4 lands Q on the target in one step
    ag, n_in = zero_learner(optimizer="sgd", lr=0.25, grad_clip=1e9, target_period=10 ** 6)
    x = np.eye(n_in)[1]
    t = Transition("offload", x, 2, FractionalCost(3.0, 2.0), np.zeros(n_in))
    y = ag.targets("offload", [t])[0, 0]
    assert y == pytest.approx((1 - 0.95) * 3.0 / ag.tau ** 2)
    ag.train_step("offload", [t])
    assert ag.q_values("offload", x)[2] == pytest.approx(y, abs=1e-15)


def test_fixed_batch_loss_non_increasing():
    ag, n_in = zero_learner(optimizer="sgd", lr=1e-2, target_period=10 ** 6)
    rng = np.random.default_rng(3)
    batch = [Transition("offload", rng.normal(size=n_in), int(rng.integers(0, 3)),
                        FractionalCost(*rng.uniform(0.5, 3, 2)), rng.normal(size=n_in)) for _ in range(16)]
    losses = [ag.train_step("offload", batch) for _ in range(200)]
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_nan_loss_aborts_with_diagnostics():
    ag, n_in = zero_learner(optimizer="sgd")
    t = Transition("offload", np.full(n_in, np.nan), 0, FractionalCost(1.0, 1.0), np.zeros(n_in))
    with pytest.raises(marl.TrainingDivergence, match="device"):
        ag.train_step("offload", [t])


def test_collector_order_and_alternation():
    p = gru_params(embed_dim(SMALL), 4, np.random.default_rng(0))
    col = HistoryCollector(SMALL, p, 4, keep_trajectory=True)
    rng = np.random.default_rng(1)
    hs = [col.h.copy()]
    for k, (t, dev) in enumerate([(0.0, 0), (0.5, 1), (1.0, 0), (1.5, 1)]):
        e = rng.normal(size=embed_dim(SMALL))
        assert col.collect(t, dev, e, col.h.copy()) == k
        hs.append(gru_step(e, hs[-1], p))
    assert [r["device"] for r in col.trajectory] == [0, 1, 0, 1]
    assert col.h.tobytes() == hs[-1].tobytes()
    with pytest.raises(CollectorOrderError):
        col.collect(1.0, 0, np.zeros(embed_dim(SMALL)), col.h)


def test_zero_history_params_keep_history_zero():
    col = HistoryCollector(SMALL, gru_params(embed_dim(SMALL), 4), 4)
    for t in range(20):
        col.collect(float(t), t % 3, np.random.default_rng(t).normal(size=embed_dim(SMALL)), col.h)
    assert np.all(col.h == 0)


def test_history_replay_is_bit_exact():
    runner = MarlRunner(SMALL, QUICK, 2, keep_trajectory=True)
    runner.run_episode(123, explore=True, epsilon=0.5, learn=False)
    traj = runner.collector.trajectory
    assert len(traj) > 10
    times = [r["time"] for r in traj]
    assert times == sorted(times) and [r["T"] for r in traj] == list(range(len(traj)))
    h = np.zeros(QUICK.history_dim)
    for r in traj:
        assert r["h"].tobytes() == h.tobytes()
        h = gru_step(r["embed"], h, runner.collector.params)


def test_sync_history_pads_latest_per_agent():
    p = gru_params(embed_dim(SMALL), 4, np.random.default_rng(0))
    col = HistoryCollector(SMALL, p, 4, asynchronous=False)
    e = np.ones(embed_dim(SMALL))
    col.collect(0.0, 1, e, col.history_for(1))
    expect = np.zeros(4)
    for row in (np.zeros_like(e), e, np.zeros_like(e)):
        expect = gru_step(row, expect, p)
    assert col.history_for(0).tobytes() == expect.tobytes()


def test_ablation_flags_do_not_touch_environment_streams(monkeypatch):
    seen = []

    class Spy(MecEnv):
        def __init__(self, scenario, seed=0, **kw):
            seen.append(seed)
            super().__init__(scenario, seed, **kw)

    monkeypatch.setattr(marl, "MecEnv", Spy)
    runs = []
    for frac in (True, False):
        for asyn in (True, False):
            seen.clear()
            cfg = replace(QUICK, fractional=frac, asynchronous=asyn)
            MarlRunner(SMALL, cfg, 4).train()
            runs.append(list(seen))
    assert all(r == runs[0] for r in runs)


def test_congested_edge_is_avoided():
    sc = Scenario(n_devices=3, n_edges=2, n_subchannels=3, edge_capacities=(41.8, 4.18), horizon=50.0)
    cfg = LearnerConfig(episodes=20, gamma_period=5, eval_every=20, eval_episodes=5, gamma_rollouts=5)
    for seed in range(2):
        counts = MarlRunner(sc, cfg, seed).train().final_eval.offload_counts.sum(axis=0)
        assert counts[2] <= 0.1 * counts.sum()


def test_random_baseline_trace_is_flat():
    xs, ys = [], []
    for seed in range(3):
        rows = run_baseline(SMALL, "random", seed, episodes=15, eval_episodes=2)
        for ep in range(15):
            xs.append(ep)
            ys.append(np.mean([r["eval_avg_aoi"] for r in rows if r["episode"] == ep]))
    assert linregress(xs, ys).pvalue > 0.05


def test_baseline_policies():
    with pytest.raises(ValueError):
        BaselinePolicy("bogus", SMALL, 0)
    sc = Scenario(n_devices=1, n_edges=2, horizon=40.0)
    env = MecEnv(sc, 0)
    d = env.advance_until_decision()
    assert BaselinePolicy("zero-wait", sc, 0)(d) == Wait(0.0)
    env.apply_action(d.device, Wait(0.0))
    d = env.advance_until_decision()
    assert d.kind is Indicator.NeedsOffload
    assert BaselinePolicy("local-only", sc, 0)(d) == Offload(0)
    assert BaselinePolicy("zero-wait", sc, 0)(d) == Offload(1)  # ties go to the first edge
    # empty queues: the fast edge beats local processing
    assert BaselinePolicy("greedy-queue", sc, 0)(d) == Offload(1)


def test_pool_stats_pools_ratio():
    a = EpisodeStats(np.array([1.0]), np.array([2.0]), np.array([0]), np.zeros((1, 2)), 3,
                     np.array([2.0]), np.array([1.0]))
    b = EpisodeStats(np.array([3.0]), np.array([1.0]), np.array([1]), np.ones((1, 2)), 4,
                     np.array([3.0]), np.array([3.0]))
    p = pool_stats([a, b])
    assert p.avg_aoi.tolist() == [2.0] and p.discounted.tolist() == [1.25]
    assert p.drops.tolist() == [1] and p.n_decisions == 7


def test_training_rows_and_csv_are_deterministic(tmp_path):
    out = []
    for k in range(2):
        res = MarlRunner(SMALL, QUICK, 7).train()
        write_metrics_csv(tmp_path / f"m{k}.csv", res.rows)
        out.append((tmp_path / f"m{k}.csv").read_bytes())
    assert out[0] == out[1]
    schema, header, rows = read_schema_csv(tmp_path / "m0.csv")
    assert schema == "marl-metrics" and len(rows) == QUICK.episodes * SMALL.n_devices
    assert header[-1] == "offload_fraction_per_edge"
    assert rows[-1]["eval_avg_aoi"] != ""


def test_decomposed_mode_trains():
    cfg = replace(QUICK, value_mode="decomposed")
    res = MarlRunner(SMALL, cfg, 1).train()
    assert np.all(np.isfinite(res.final_eval.avg_aoi))
    assert all(ag.gamma > 0 for ag in res.learners)


def test_config_validation():
    with pytest.raises(ValueError):
        LearnerConfig(model="cnn")
    with pytest.raises(ValueError):
        LearnerConfig(eval_episodes=0)
    with pytest.raises(ValueError):
        LearnerConfig(delta=1.0)
