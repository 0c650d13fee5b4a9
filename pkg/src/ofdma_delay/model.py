"""State types, random processes and slot-level dynamics of the downlink."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import SystemConfig

# Independent stream ids, one generator per (process, user).
CSI, ARRIVALS, PACKETS, EVENTS = range(4)


def stream(seed: int, process: int, user: int = 0) -> np.random.Generator:
    """Deterministic generator for one (process, user) pair of a replication."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(process, user)))


@dataclass
class ChannelState:
    gain: np.ndarray  # (K, N_F) power gains |H|^2


@dataclass
class QueueState:
    q: np.ndarray  # (K,) packets in buffer
    hol_residual_bits: np.ndarray  # (K,) unserved bits of the head-of-line packet

    @classmethod
    def empty(cls, K: int) -> "QueueState":
        return cls(np.zeros(K, dtype=np.int64), np.zeros(K))

    def copy(self) -> "QueueState":
        return QueueState(self.q.copy(), self.hol_residual_bits.copy())


@dataclass
class Action:
    p: np.ndarray  # (..., K, N_F) transmit power
    s: np.ndarray  # (..., K, N_F) 0/1 subband assignment

    @property
    def total_power(self):
        return self.p.sum(axis=(-2, -1))

    def is_feasible(self, atol: float = 0.0) -> bool:
        """Exclusive assignment per subband, p >= 0, and power only where assigned."""
        exclusive = np.all(self.s.sum(axis=-2) == 1)
        nonneg = np.all(self.p >= -atol)
        complementary = np.all((self.p <= atol) | (self.s == 1))
        return bool(exclusive and nonneg and complementary)


@dataclass
class SlotOutcome:
    served_packets: np.ndarray
    arrivals: np.ndarray
    dropped: np.ndarray
    power_spent: float = 0.0
    rate: np.ndarray = field(default_factory=lambda: np.zeros(0))


def sample_csi(config: SystemConfig, rng: np.random.Generator) -> ChannelState:
    """Rayleigh block fading: |H|^2 ~ Exp(1), i.i.d. over users, subbands and slots."""
    return ChannelState(rng.exponential(1.0, size=(config.K, config.N_F)))


def sample_arrivals(config: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.poisson(np.asarray(config.lam) * config.tau)


def sample_packet_bits(config: SystemConfig, k: int, rng: np.random.Generator) -> float:
    return rng.exponential(config.mean_packet_bits[k])


def instantaneous_rate(channel: ChannelState, action: Action, k: int, bandwidth: float = 1.0) -> float:
    """Achievable rate of user k in bits/s: ``W_s * sum_n s log2(1 + p |H|^2)``."""
    snr = action.p[k] * channel.gain[k]
    return float(bandwidth * np.sum(action.s[k] * np.log2(1.0 + snr)))


def rates(channel: ChannelState, action: Action, config: SystemConfig) -> np.ndarray:
    return np.array([instantaneous_rate(channel, action, k, config.subband_bandwidth)
                     for k in range(config.K)])


def _user_rng(rng, k):
    return rng[k] if isinstance(rng, Sequence) else rng


def queue_step(queue: QueueState, rates: np.ndarray, arrivals: np.ndarray,
               config: SystemConfig, rng) -> tuple[QueueState, SlotOutcome]:
    """Advance all queues by one slot.

    Service drains ``rates[k] * tau`` bits from the head of queue k, possibly
    completing several packets; arrivals join afterwards and overflow beyond
    ``N_Q`` is dropped.  Sizes of packets reaching the head are drawn on demand
    from ``rng`` (one generator, or one per user).
    """
    K = config.K
    q = queue.q.copy()
    hol = queue.hol_residual_bits.copy()
    served = np.zeros(K, dtype=np.int64)
    dropped = np.zeros(K, dtype=np.int64)
    arrivals = np.asarray(arrivals, dtype=np.int64)
    for k in range(K):
        gen = _user_rng(rng, k)
        budget = float(rates[k]) * config.tau
        while q[k] > 0 and budget > 0.0:
            if budget >= hol[k]:
                budget -= hol[k]
                q[k] -= 1
                served[k] += 1
                hol[k] = sample_packet_bits(config, k, gen) if q[k] > 0 else 0.0
            else:
                hol[k] -= budget
                budget = 0.0
        accepted = min(int(arrivals[k]), config.N_Q - int(q[k]))
        dropped[k] = int(arrivals[k]) - accepted
        if q[k] == 0 and accepted > 0:
            hol[k] = sample_packet_bits(config, k, gen)
        q[k] += accepted
    outcome = SlotOutcome(served, arrivals.copy(), dropped, rate=np.asarray(rates, dtype=float))
    return QueueState(q, hol), outcome


def per_stage_reward(queue, action: Action, config: SystemConfig) -> float:
    """Weighted backlog plus priced power: ``sum_k beta_k Q_k / lambda_k + gamma sum p``."""
    q = queue.q if isinstance(queue, QueueState) else np.asarray(queue)
    return float(np.dot(config.queue_weight, q) + config.gamma * np.sum(action.p))
