import math
from dataclasses import replace

import numpy as np
import pytest

from ofdma_delay.config import ConfigError, dump_config, parse_config
from ofdma_delay.model import (Action, ChannelState, QueueState, instantaneous_rate, per_stage_reward, queue_step,
                               sample_arrivals, sample_csi, sample_packet_bits, stream)

from conftest import packaged


def test_csi_mean_and_tail(two_user):
    cfg = replace(two_user, K=1000, lam=20.0, mean_packet_bits=1.0, beta=1.0, N_F=1000)
    g = sample_csi(cfg, np.random.default_rng(0)).gain
    assert g.size == 10**6
    assert abs(g.mean() - 1.0) < 0.01
    assert abs(np.mean(g > 1.0) - math.exp(-1)) < 0.01


def test_csi_same_seed_same_draws(two_user):
    a = sample_csi(two_user, stream(3, 0)).gain
    b = sample_csi(two_user, stream(3, 0)).gain
    assert np.array_equal(a, b)


def test_arrivals_poisson(two_user):
    cfg = replace(two_user, K=1000, lam=20.0, mean_packet_bits=1.0, beta=1.0)
    rng = np.random.default_rng(1)
    a = np.concatenate([sample_arrivals(cfg, rng) for _ in range(1000)])
    assert abs(np.mean(a == 0) - math.exp(-0.1)) < 0.005
    assert abs(a.mean() - 0.1) < 0.003


def test_zero_rate_never_arrives(two_user):
    cfg = replace(two_user, lam=(0.0, 0.0))
    rng = np.random.default_rng(2)
    assert all(sample_arrivals(cfg, rng).sum() == 0 for _ in range(100))


def test_packet_sizes():
    cfg = replace(packaged("fig3.cfg"), mean_packet_bits=312 * 1024 * 8)
    rng = np.random.default_rng(4)
    x = np.array([sample_packet_bits(cfg, 0, rng) for _ in range(200_000)])
    big = rng.exponential(2 * cfg.mean_packet_bits[0], size=200_000)
    assert np.all(x > 0)
    assert abs(x.mean() / cfg.mean_packet_bits[0] - 1) < 0.01
    grid = np.quantile(x, [0.1, 0.5, 0.9])
    assert all(np.mean(big <= t) < np.mean(x <= t) for t in grid)


def test_rate_examples():
    ch = ChannelState(np.array([[1.0, 1.0]]))
    assert instantaneous_rate(ch, Action(np.zeros((1, 2)), np.ones((1, 2))), 0) == 0.0
    one = Action(np.array([[1.0, 0.0]]), np.array([[1, 0]]))
    assert instantaneous_rate(ch, one, 0) == pytest.approx(1.0)
    two = Action(np.array([[1.0, 3.0]]), np.ones((1, 2)))
    assert instantaneous_rate(ch, two, 0) == pytest.approx(3.0)


def test_rate_monotone(rng):
    g = rng.exponential(size=(1, 4))
    p = rng.random((1, 4))
    base = instantaneous_rate(ChannelState(g), Action(p, np.ones((1, 4))), 0)
    assert instantaneous_rate(ChannelState(g), Action(p + 0.1, np.ones((1, 4))), 0) >= base
    assert instantaneous_rate(ChannelState(g * 1.5), Action(p, np.ones((1, 4))), 0) >= base


def _queue(cfg, q, hol):
    return QueueState(np.array(q, dtype=np.int64), np.array(hol, dtype=float))


def test_queue_step_examples():
    cfg = replace(packaged("fig3.cfg"), K=1, lam=20.0, mean_packet_bits=1000.0, beta=1.0)
    rng = np.random.default_rng(0)
    # head packet has 100 bits left, the next is redrawn; a huge budget clears exactly two when sizes are known
    state = _queue(cfg, [5], [100.0])
    sizes = iter([200.0, 10**9])

    class Fixed:
        def exponential(self, mean):
            return next(sizes)

    new, out = queue_step(state, np.array([300.0 / cfg.tau]), np.array([1]), cfg, Fixed())
    assert (new.q[0], out.served_packets[0], out.dropped[0]) == (4, 2, 0)

    full = _queue(cfg, [10], [50.0])
    new, out = queue_step(full, np.zeros(1), np.array([2]), cfg, rng)
    assert (new.q[0], out.dropped[0]) == (10, 2)

    empty = _queue(cfg, [0], [0.0])
    new, out = queue_step(empty, np.array([1e9]), np.array([0]), cfg, rng)
    assert (new.q[0], out.served_packets[0], new.hol_residual_bits[0]) == (0, 0, 0.0)


def test_queue_conservation(two_user, rng):
    state = QueueState.empty(2)
    for _ in range(2000):
        r = rng.exponential(2e6, size=2)
        a = rng.poisson(1.5, size=2)
        before = state.q.copy()
        state, out = queue_step(state, r, a, two_user, rng)
        raw = before - out.served_packets + a
        assert np.all((state.q >= 0) & (state.q <= two_user.N_Q))
        assert np.array_equal(state.q, np.minimum(raw, two_user.N_Q))
        assert np.array_equal(out.dropped, np.maximum(raw - two_user.N_Q, 0))
        assert np.all((state.hol_residual_bits > 0) == (state.q > 0))


def test_two_departures_rare_in_light_traffic():
    # mean service per slot mu*tau = 0.2 packets, lambda*tau = 0.1
    cfg = replace(packaged("fig3.cfg"), K=1, N_Q=50, lam=20.0, mean_packet_bits=1.0, beta=1.0)
    rng = np.random.default_rng(7)
    state, multi, busy = QueueState.empty(1), 0, 0
    for _ in range(100_000):
        before = state.q[0]
        state, out = queue_step(state, np.array([0.2 / cfg.tau]), rng.poisson([0.1]), cfg, rng)
        if before > 0:
            busy += 1
            multi += out.served_packets[0] >= 2
    assert multi / busy < 0.05


def test_reward_examples():
    cfg = replace(packaged("fig3.cfg"), gamma=0.5)
    act = Action(np.array([[1.0, 0.5, 0.5, 0.0], [0.0] * 4]), np.array([[1, 1, 1, 1], [0] * 4]))
    assert per_stage_reward(np.array([4, 2]), act, cfg) == pytest.approx(1.3)
    assert per_stage_reward(np.zeros(2, int), Action(np.zeros((2, 4)), act.s), cfg) == 0.0
    doubled = replace(cfg, beta=(2.0, 2.0), gamma=1e-30)
    assert per_stage_reward(np.array([4, 2]), act, doubled) == pytest.approx(
        2 * per_stage_reward(np.array([4, 2]), act, replace(cfg, gamma=1e-30)))


def test_config_roundtrip_and_errors():
    cfg = packaged("fig4.cfg")
    assert cfg.beta == (1.0, 4.0)
    assert parse_config(dump_config(cfg)) == cfg
    assert cfg.snr_db == pytest.approx(30.0)
    assert cfg.with_snr_db(20.0).P_0 == pytest.approx(400.0)
    with pytest.raises(ConfigError, match="unknown"):
        parse_config(dump_config(cfg) + "bogus = 1\n")
    with pytest.raises(ConfigError):
        parse_config(dump_config(cfg).replace("K = 2", "K = 3"))


def test_rate_constant_units():
    cfg = packaged("fig3.cfg")
    assert cfg.rate_const[0] == pytest.approx(2.5e6 * 0.005 / (2500198.4 * math.log(2)))
    assert cfg.queue_weight == (0.05, 0.05)
