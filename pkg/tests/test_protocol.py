import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aqualoc import protocol as pr
from aqualoc.physics import ChannelProfile
from aqualoc.protocol import DeviceAgent, Environment, ReceptionLog, SlotConfig

from conftest import random_positions


def true_distances(pos):
    return np.linalg.norm(pos[:, None] - pos[None], axis=-1)


def agents_at(pos, **kw):
    return [DeviceAgent(i, p, **kw) for i, p in enumerate(pos)]


def test_slot_time_examples():
    assert pr.slot_time(1, SlotConfig()) == pytest.approx(0.600)
    assert pr.slot_time(3, SlotConfig()) == pytest.approx(1.240)
    assert pr.slot_time(4, SlotConfig(group_size=5)) == pytest.approx(1.560)
    with pytest.raises(ValueError):
        pr.slot_time(0, SlotConfig())
    with pytest.raises(ValueError):
        pr.slot_time(5, SlotConfig(group_size=5))


def test_slot_config_invariant():
    with pytest.raises(ValueError):
        SlotConfig(delta1=0.3)


def test_relay_sync_branches():
    cfg = SlotConfig(group_size=6)
    assert pr.relay_sync(5, 2, 2.0, cfg) == pytest.approx(2.960)
    assert pr.relay_sync(3, 2, 2.0, cfg) == pytest.approx(2.0 + (6 - 2 + 3) * 0.32)


def test_relay_sync_boundary_waits():
    cfg = SlotConfig(delta0=0.64, group_size=6)
    assert (3 - 1) * cfg.delta1 == cfg.delta0
    assert pr.relay_sync(3, 1, 0.0, cfg) == pytest.approx((6 - 1 + 3) * 0.32)


def test_round_time_examples():
    assert pr.round_time(5, True, SlotConfig()) == pytest.approx(1.880)
    assert pr.round_time(3, True, SlotConfig()) == pytest.approx(1.240)
    assert pr.round_time(5, False, SlotConfig()) == pytest.approx(3.160)


def test_pairwise_distance_example():
    a = ReceptionLog(0, {0: 1.000, 1: 1.330})
    b = ReceptionLog(1, {1: 1.320, 0: 1.010})
    assert pr.pairwise_distance(a, b, 1500) == pytest.approx(15.0)
    assert pr.pairwise_distance(a, ReceptionLog(1, {1: 1.0}), 1500) is None


def test_two_devices_fifteen_meters():
    res = pr.run_round(agents_at(np.array([[0, 0, 2], [15, 0, 2.0]])), Environment(), SlotConfig(group_size=2))
    assert pr.pairwise_distance(res.logs[0], res.logs[1]) == pytest.approx(15.0, abs=1e-9)
    assert res.logs[1].times[0] == 0.0


def test_colocated_zero():
    pos = np.array([[3, 3, 1], [3, 3, 1.0], [8, 3, 1]])
    res = pr.run_round(agents_at(pos), Environment(), SlotConfig(group_size=3))
    assert pr.pairwise_distance(res.logs[0], res.logs[1]) == pytest.approx(0.0, abs=1e-9)


def test_five_devices_round_time():
    pos = random_positions(np.random.default_rng(1), 5)
    res = pr.run_round(agents_at(pos), Environment(), SlotConfig(group_size=5))
    assert res.round_time_s == pytest.approx(1.880)
    assert res.completion_s <= 1.880
    assert not res.silent
    D, W = pr.distance_matrix(res.logs, 5)
    assert np.allclose(D, true_distances(pos), atol=1e-9)


def test_relay_sync_scenario():
    pos = random_positions(np.random.default_rng(2), 4)
    ranges = [{1, 2}, {0, 3}, {0}, {1}]
    agents = [DeviceAgent(i, p, range_set=r) for i, (p, r) in enumerate(zip(pos, ranges))]
    res = pr.run_round(agents, Environment(), SlotConfig(group_size=4))
    assert res.logs[3].sync_source == 1
    assert res.logs[1].sync_source == 0
    # device 3 syncs on device 1's message: (3 - 1) * 0.32 = 0.64 > 0.6, first branch
    assert res.logs[3].slot_local == pytest.approx(0.64)
    assert any(e.kind == "tx" and e.sender == 3 and "relay" in e.note for e in res.events)
    D, W = pr.distance_matrix(res.logs, 4)
    assert W[1, 3] == 1 and W[0, 3] == 0
    assert D[1, 3] == pytest.approx(true_distances(pos)[1, 3], abs=1e-9)


def test_unreachable_device_silent():
    pos = random_positions(np.random.default_rng(3), 4)
    agents = [DeviceAgent(i, p, range_set=r) for i, (p, r) in enumerate(zip(pos, [{1, 2}, {0, 2}, {0, 1}, set()]))]
    res = pr.run_round(agents, Environment(), SlotConfig(group_size=4))
    assert res.silent == [3]
    problem = pr.build_problem(res.logs, agents, SlotConfig(group_size=4))
    assert not problem.W[3].any() and not problem.W[:, 3].any()


def test_range_set_must_be_symmetric():
    pos = random_positions(np.random.default_rng(3), 3)
    agents = [DeviceAgent(i, p, range_set=r) for i, (p, r) in enumerate(zip(pos, [{1, 2}, {0}, {1}]))]
    with pytest.raises(ValueError):
        pr.run_round(agents, Environment(), SlotConfig(group_size=3))


def test_build_problem_complete():
    pos = random_positions(np.random.default_rng(4), 5)
    agents = agents_at(pos)
    cfg = SlotConfig(group_size=5)
    res = pr.run_round(agents, Environment(), cfg)
    p = pr.build_problem(res.logs, agents, cfg, flip_evidence=res.flip_evidence)
    assert np.triu(p.W, 1).sum() == 10
    assert np.array_equal(p.D, p.D.T) and not np.diag(p.D).any()
    assert np.array_equal(p.depths, pos[:, 2])
    assert set(p.flip_evidence) == {2, 3, 4}


def test_shared_listener_recovers_missing_direction():
    pos = random_positions(np.random.default_rng(5), 4)
    res = pr.run_round(agents_at(pos, clock_ppm=0.0), Environment(), SlotConfig(group_size=4))
    full = pr.pairwise_distance(res.logs[1], res.logs[2])
    del res.logs[2].times[1]
    assert pr.pairwise_distance(res.logs[1], res.logs[2]) is None
    D = true_distances(pos)
    got = pr.distance_via_listener(res.logs[1], res.logs[2], res.logs[3], D[1, 3], D[2, 3])
    assert got == pytest.approx(full, abs=1e-9)
    Dm, Wm = pr.distance_matrix(res.logs, 4)
    assert Wm[1, 2] == 1 and Dm[1, 2] == pytest.approx(D[1, 2], abs=1e-9)


@settings(max_examples=100)
@given(st.floats(-1e3, 1e3), st.floats(0, 2), st.floats(0, 2), st.floats(0, 2), st.floats(0, 2))
def test_clock_offset_cancels(offset, a, b, c, d):
    li, lj = ReceptionLog(0, {0: a, 1: b}), ReceptionLog(1, {1: c, 0: d})
    shifted = ReceptionLog(0, {k: v + offset for k, v in li.times.items()})
    assert pr.pairwise_distance(shifted, lj) == pytest.approx(pr.pairwise_distance(li, lj), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 7))
def test_quantized_error_bound_and_no_collisions(seed, n):
    pos = random_positions(np.random.default_rng(seed), n)
    env = Environment(quantize=True)
    res = pr.run_round(agents_at(pos), env, SlotConfig(group_size=n), seed=seed)
    D, W = pr.distance_matrix(res.logs, n)
    assert np.all(np.abs(D - true_distances(pos)) <= env.c / (2 * env.fs) + 1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.permutations([1, 2, 3, 4]))
def test_label_permutation_equivariant(seed, perm):
    pos = random_positions(np.random.default_rng(seed), 5)
    order = [0] + list(perm)            # new label k is old device order[k]
    cfg = SlotConfig(group_size=5)
    D, _ = pr.distance_matrix(pr.run_round(agents_at(pos), Environment(), cfg).logs, 5)
    Dp, _ = pr.distance_matrix(pr.run_round(agents_at(pos[order]), Environment(), cfg).logs, 5)
    assert np.allclose(Dp, D[np.ix_(order, order)], atol=1e-9)


def test_deterministic_with_loss_and_jitter():
    pos = random_positions(np.random.default_rng(6), 5)
    env = Environment(link_loss=0.2, jitter_s=1e-5)
    a = pr.run_round(agents_at(pos), env, SlotConfig(group_size=5), seed=11)
    b = pr.run_round(agents_at(pos), env, SlotConfig(group_size=5), seed=11)
    assert [e.to_dict() for e in a.events] == [e.to_dict() for e in b.events]
    assert any(e.kind == "drop" for e in a.events)


def test_clock_skew_small_effect():
    pos = random_positions(np.random.default_rng(7), 3)
    agents = [DeviceAgent(i, p, clock_ppm=ppm) for i, (p, ppm) in enumerate(zip(pos, [40, -80, 20]))]
    res = pr.run_round(agents, Environment(), SlotConfig(group_size=3))
    D, _ = pr.distance_matrix(res.logs, 3)
    err = np.abs(D - true_distances(pos))
    assert err.max() > 0
    # skew error is bounded by ppm * elapsed * c
    assert err.max() < 160e-6 * 1.3 * 1500
    with pytest.raises(ValueError):
        DeviceAgent(0, [0, 0, 0], clock_ppm=100)


def test_overlap_raises():
    cfg = SlotConfig(delta1=0.28, t_packet=0.278, t_guard=0.002, group_size=3)
    pos = np.array([[0, 0, 0], [60, 0, 0], [0.5, 0, 0.0]])
    with pytest.raises(pr.ProtocolViolation):
        pr.run_round(agents_at(pos), Environment(), cfg)


def test_audio_fidelity_round():
    pos = np.array([[0, 0, 2], [6, 0, 3], [4, 12, 5], [-10, 5, 1.0]])
    cfg = SlotConfig(group_size=4)
    res = pr.run_round(agents_at(pos), Environment(channel=ChannelProfile()), cfg, fidelity="audio")
    D, W = pr.distance_matrix(res.logs, 4)
    assert W.sum() == 12
    assert np.abs(D - true_distances(pos)).max() < 1500 / 44100
    # leader mics: right mic hears devices on the right first
    for i, (m, n) in res.flip_evidence.items():
        assert i >= 2 and m != n


def test_report_packet_round_trip():
    pos = random_positions(np.random.default_rng(8), 5)
    cfg = SlotConfig(group_size=5)
    res = pr.run_round(agents_at(pos), Environment(quantize=True), cfg)
    for i in range(1, 5):
        pkt = pr.report_packet(res.logs[i], cfg, depth=pos[i, 2])
        rebuilt = pr.log_from_packet(pkt, cfg)
        for j, t in res.logs[i].times.items():
            assert rebuilt.times[j] == pytest.approx(t, abs=1 / 44100 + 1e-12)


def test_event_dicts():
    pos = random_positions(np.random.default_rng(9), 3)
    res = pr.run_round(agents_at(pos), Environment(), SlotConfig(group_size=3))
    kinds = {e.kind for e in res.events}
    assert {"tx", "rx", "sync"} <= kinds
    assert all(set(e.to_dict()) <= {"time_s", "kind", "sender", "receiver", "local_time_s", "note"}
               for e in res.events)
    times = [e.time_s for e in res.events]
    assert times == sorted(times)
