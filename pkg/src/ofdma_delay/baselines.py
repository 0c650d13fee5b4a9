"""Reference schedulers: M-LWDF and round robin with per-subband water-filling.

Both use a single water level ``1 / gamma`` for whichever user is served,
so that calibrating ``gamma`` matches their average power to the budget.
These numpy versions mirror the compiled ones in :mod:`ofdma_delay.engine`.
"""
from __future__ import annotations

import enum

import numpy as np

from .config import SystemConfig
from .model import Action, ChannelState
from .policy import waterfill_power


class BaselineKind(enum.Enum):
    MLWDF = "mlwdf"
    ROUND_ROBIN = "round_robin"


def _one_hot(winner, K):
    return (np.arange(K)[:, None] == np.asarray(winner)[None, :]).astype(np.int8)


def mlwdf_allocate(channel: ChannelState, queue, hol_delay, config: SystemConfig,
                   gamma: float | None = None) -> Action:
    """Per subband, serve ``argmax beta_k * hol_delay_k * log2(1 + (P_0/N_F) g)`` among backlogged users."""
    q = np.asarray(getattr(queue, "q", queue))
    gain = np.asarray(channel.gain, dtype=float)
    ref = config.P_0 / config.N_F
    metric = (np.asarray(config.beta) * np.asarray(hol_delay, dtype=float))[:, None] * np.log2(1 + ref * gain)
    metric = np.where((q > 0)[:, None], metric, -np.inf)
    if not np.any(q > 0):
        return Action(np.zeros_like(gain), _one_hot(np.zeros(config.N_F, int), config.K))
    winner = np.argmax(metric, axis=0)
    s = _one_hot(winner, config.K)
    level = 1.0 / (config.gamma if gamma is None else gamma)
    p = s * (q > 0)[:, None] * waterfill_power(gain, level)
    return Action(p, s)


def round_robin_allocate(slot_t: int, channel: ChannelState, queue, config: SystemConfig,
                         gamma: float | None = None) -> Action:
    q = np.asarray(getattr(queue, "q", queue))
    gain = np.asarray(channel.gain, dtype=float)
    user = slot_t % config.K
    s = _one_hot(np.full(config.N_F, user), config.K)
    level = 1.0 / (config.gamma if gamma is None else gamma) if q[user] > 0 else 0.0
    return Action(s * waterfill_power(gain, level), s)
