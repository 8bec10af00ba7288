import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fracaoi.events import RngStream
from fracaoi.mec import (ChannelParams, IllegalActionError, Indicator, LivelockError, MecEnv, Offload, Scenario,
                         ServiceDist, TaskSpec, Wait, channel_gain, channel_rate, service_time, transmission_time)

NOISE_W = 10 ** ((-114.0 - 30) / 10)
P_W = 0.1  # 20 dBm


def test_rate_unit_snr():
    gain = NOISE_W / P_W
    assert channel_rate(20.0, gain, ChannelParams(10e6, -114.0)) == pytest.approx(10.0, rel=1e-12)


def test_rate_with_interferer_sinr_one():
    gain = 2 * NOISE_W / P_W
    r = channel_rate(20.0, gain, ChannelParams(10e6, -114.0), [(20.0, NOISE_W / P_W)])
    assert r == pytest.approx(10.0, rel=1e-12)


def test_rate_formula_direct():
    # W log2(1 + p d^-3 / eta0) with everything in watts, Mbit/s out
    expected = 1e6 * math.log2(1 + 0.1 * 100.0 ** -3 / 10 ** (-14.4)) / 1e6
    h = channel_gain(1.0, 100.0, 3.0)
    assert channel_rate(20.0, h, ChannelParams(1e6, -114.0, 3.0)) == pytest.approx(expected, rel=1e-12)


def test_zero_distance_rejected():
    with pytest.raises(ValueError):
        channel_gain(1.0, 0.0, 3.0)


def test_transmission_time():
    t = TaskSpec(30.0, 0.297)
    assert transmission_time(t, 10.0) == pytest.approx(3.0)
    assert transmission_time(t, 10.0, literal_paper_tx=True) == pytest.approx(0.891)
    with pytest.raises(ValueError):
        transmission_time(t, 0.0)


def test_service_time_means():
    task = TaskSpec()
    s = RngStream(0, "svc")
    draws = np.fromiter((service_time(task, 41.8, ServiceDist.Exponential, s) for _ in range(10 ** 6)), float)
    assert abs(draws.mean() / (30 * 0.297 / 41.8) - 1) < 0.01
    assert 30 * 0.297 / 41.8 == pytest.approx(0.21316, abs=1e-5)
    assert task.work / 2.5 == pytest.approx(3.564)
    assert service_time(task, 2.5, ServiceDist.Lognormal, s, sigma=0.0) == pytest.approx(3.564)


def det(**kw) -> Scenario:
    base = dict(n_devices=1, n_edges=1, fading=False, service_dist="lognormal", service_sigma=0.0, horizon=100.0)
    base.update(kw)
    return Scenario(**base)


def test_wait_zero_generates_now_and_wait_one_decides_at_one():
    env = MecEnv(det())
    d = env.advance_until_decision()
    assert (d.device, d.kind, d.state.time) == (0, Indicator.NeedsUpdate, 0.0)
    env.apply_action(0, Wait(1.0))
    d = env.advance_until_decision()
    assert d.kind is Indicator.NeedsOffload and d.state.time == 1.0
    env2 = MecEnv(det())
    env2.advance_until_decision()
    env2.apply_action(0, Wait(0.0))
    d = env2.advance_until_decision()
    assert d.kind is Indicator.NeedsOffload and d.state.time == 0.0


def test_illegal_actions():
    env = MecEnv(det())
    env.advance_until_decision()
    with pytest.raises(IllegalActionError):
        env.apply_action(0, Offload(0))
    with pytest.raises(IllegalActionError):
        env.apply_action(0, Wait(-1.0))
    env.apply_action(0, Wait(0.0))
    env.advance_until_decision()
    with pytest.raises(IllegalActionError):
        env.apply_action(0, Wait(0.0))
    with pytest.raises(IllegalActionError):
        env.apply_action(0, Offload(5))


def test_hand_computed_local_and_edge_timeline():
    sc = det()
    env = MecEnv(sc)
    env.advance_until_decision()
    env.apply_action(0, Wait(0.5))
    env.advance_until_decision()
    env.apply_action(0, Offload(0))
    d = env.advance_until_decision()
    assert d.state.time == pytest.approx(0.5 + 3.564)
    assert d.kind is Indicator.NeedsUpdate
    env.apply_action(0, Wait(1.0))
    env.advance_until_decision()
    env.apply_action(0, Offload(1))
    d = env.advance_until_decision()
    dist = math.hypot(*(np.subtract(sc.devices()[0].position, sc.edges()[0].position)))
    rate = 10e6 * math.log2(1 + 0.1 * dist ** -3 / NOISE_W) / 1e6
    expected = 0.5 + 3.564 + 1.0 + 30.0 / rate + 30 * 0.297 / 41.8
    assert d.state.time == pytest.approx(expected, rel=1e-12)
    recs = env.log.records(0)
    assert [r.dropped for r in recs] == [False, False]
    assert recs[1].wait == 1.0


def test_deadline_drop_keeps_aoi_growing():
    sc = det(drop_coefficient=0.5)  # deadline 1.782 s < local 3.564 s
    env = MecEnv(sc)
    env.advance_until_decision()
    env.apply_action(0, Wait(0.0))
    env.advance_until_decision()
    env.apply_action(0, Offload(0))
    d = env.advance_until_decision()
    assert d.state.time == pytest.approx(1.782)
    assert d.kind is Indicator.NeedsUpdate
    assert env.log.records(0)[0].dropped
    assert d.state.aoi_now[0] == pytest.approx(1.782)
    assert env.n_dropped == 1 and env.n_completed == 0


def test_fcfs_third_task_waits_for_two():
    sc = det(n_devices=3, n_subchannels=3)
    env = MecEnv(sc)
    for _ in range(3):
        d = env.advance_until_decision()
        env.apply_action(d.device, Wait(0.0))
    for _ in range(3):
        d = env.advance_until_decision()
        env.apply_action(d.device, Offload(1))
    finishes = []
    while len(finishes) < 3:
        d = env.advance_until_decision()
        finishes.append((d.state.time, d.device))
        env.apply_action(d.device, Wait(100.0))
    ev = env.event_log
    arrivals = [e[2] for e in ev if e[1] == "TransmissionDone"]
    starts = [e[2] for e in ev if e[1] == "EdgeServiceStart"]
    assert arrivals == starts
    svc = 30 * 0.297 / 41.8
    first_arrival = min(e[0] for e in ev if e[1] == "TransmissionDone")
    assert finishes[-1][0] >= first_arrival + 3 * svc - 1e-12


def test_livelock_guard():
    sc = det(livelock_horizon=1e6)
    env = MecEnv(sc)
    env.advance_until_decision()
    env.apply_action(0, Wait(2e6))
    with pytest.raises(LivelockError):
        env.advance_until_decision()


def test_two_devices_interleave_by_time():
    sc = det(n_devices=2, n_subchannels=2)
    env = MecEnv(sc)
    waits = {0: 2.0, 1: 1.0}
    for _ in range(2):
        d = env.advance_until_decision()
        env.apply_action(d.device, Wait(waits[d.device]))
    d = env.advance_until_decision()
    assert (d.device, d.state.time) == (1, 1.0)
    env.apply_action(1, Offload(0))
    d = env.advance_until_decision()
    assert (d.device, d.state.time) == (0, 2.0)


def random_run(seed: int, n_dev: int, n_edges: int, horizon: float, drop=1.5, sigma=None):
    kw = dict(n_devices=n_dev, n_edges=n_edges, horizon=horizon, drop_coefficient=drop)
    if sigma is not None:
        kw.update(service_dist="lognormal", service_sigma=sigma)
    sc = Scenario(**kw)
    env = MecEnv(sc, seed)
    pol = np.random.default_rng(seed)
    generated = 0
    while True:
        d = env.advance_until_decision(horizon)
        if d is None:
            break
        assert max(d.state.queue_lengths) <= n_dev
        for n in range(n_edges):
            in_q = len(env.edge_queue[n])
            assert env.enqueued[n] == env.dequeued[n] + in_q
        if d.kind is Indicator.NeedsUpdate:
            env.apply_action(d.device, Wait(float(pol.uniform(0, 2))))
        else:
            generated += 1
            env.apply_action(d.device, Offload(int(pol.integers(0, n_edges + 1))))
    return env, generated


@settings(max_examples=25)
@given(st.integers(0, 10 ** 6), st.integers(1, 6), st.integers(1, 3), st.floats(0.3, 2.0))
def test_conservation_and_single_termination(seed, n_dev, n_edges, drop):
    env, generated = random_run(seed, n_dev, n_edges, 40.0, drop)
    ids = [(m, r.task_id) for m in range(n_dev) for r in env.log.records(m)]
    assert len(ids) == len(set(ids))
    in_flight = sum(1 for t in env.tasks if t is not None and t.phase != "done")
    assert len(ids) + in_flight == generated
    assert env.n_completed + env.n_dropped == len(ids)


def test_replay_bit_identical_event_log():
    a, _ = random_run(3, 4, 2, 60.0, sigma=1.1)
    b, _ = random_run(3, 4, 2, 60.0, sigma=1.1)
    assert a.event_log == b.event_log


def test_per_device_draws_do_not_depend_on_policy():
    # k-th task of device m sees the same service draw whatever the others do
    sc = Scenario(n_devices=3, n_edges=2, horizon=30.0)

    def draws(waits):
        env = MecEnv(sc, 11)
        seen = {m: [] for m in range(3)}
        while True:
            d = env.advance_until_decision(sc.horizon)
            if d is None:
                break
            if d.kind is Indicator.NeedsUpdate:
                env.apply_action(d.device, Wait(waits[d.device]))
            else:
                seen[d.device].append(env.tasks[d.device].u_service)
                env.apply_action(d.device, Offload(0))
        return seen

    a, b = draws({0: 0.0, 1: 0.0, 2: 0.0}), draws({0: 0.0, 1: 3.0, 2: 1.0})
    n = min(len(a[0]), len(b[0]))
    assert n > 0 and a[0][:n] == b[0][:n]
