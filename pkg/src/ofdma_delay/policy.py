"""Closed-form power and subcarrier allocation driven by potential tables.

Potential tables come in two shapes:

* joint: 1-D array over the ``(N_Q + 1) ** K`` joint queue states, indexed by
  :func:`state_index` (user 0 is the most significant digit);
* decomposed: 2-D array ``(K, N_Q + 1)`` of per-user potentials.

All allocators broadcast over leading batch dimensions: ``gain`` is
``(..., K, N_F)`` and per-user quantities are ``(..., K)``.

Allocators work in natural-log units.  A potential increment enters as
``delta_scaled = rate_const_k * dV`` with ``rate_const = W_s tau / (N_bar ln 2)``,
so ``delta_scaled * ln(1 + p g)`` is the expected potential drop bought by
serving on one subband for one slot, which matches ``instantaneous_rate``.
"""
from __future__ import annotations

import numpy as np

from .config import SystemConfig
from .model import Action, ChannelState, QueueState


def state_index(q, N_Q: int):
    """Joint index of queue vector(s) ``q`` (last axis is the user)."""
    q = np.asarray(q)
    K = q.shape[-1]
    radix = (N_Q + 1) ** np.arange(K - 1, -1, -1)
    return q @ radix


def all_states(K: int, N_Q: int) -> np.ndarray:
    """``(I, K)`` array of every joint queue state in index order."""
    grids = np.meshgrid(*[np.arange(N_Q + 1)] * K, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def joint_increments(table: np.ndarray, K: int, N_Q: int) -> np.ndarray:
    """``(I, K)`` array of ``V(Q) - V(Q with Q_k -> max(Q_k - 1, 0))`` for every state."""
    states = all_states(K, N_Q)
    out = np.empty(states.shape, dtype=float)
    for k in range(K):
        lower = states.copy()
        lower[:, k] = np.maximum(lower[:, k] - 1, 0)
        out[:, k] = table - table[state_index(lower, N_Q)]
    return out


def user_increments(table: np.ndarray) -> np.ndarray:
    """Per-user ``V_k(q) - V_k(max(q - 1, 0))``, same shape as the decomposed table."""
    table = np.asarray(table, dtype=float)
    out = np.zeros_like(table)
    out[..., 1:] = table[..., 1:] - table[..., :-1]
    return out


def potential_increment(table, queue, k: int) -> float:
    q = np.asarray(queue.q if isinstance(queue, QueueState) else queue)
    table = np.asarray(table, dtype=float)
    if table.ndim == 2:
        row = table[k]
        return float(row[q[k]] - row[max(q[k] - 1, 0)])
    N_Q = round(table.size ** (1.0 / q.size)) - 1
    lower = q.copy()
    lower[k] = max(lower[k] - 1, 0)
    return float(table[state_index(q, N_Q)] - table[state_index(lower, N_Q)])


def scaled_increments(table, q, config: SystemConfig) -> np.ndarray:
    """``rate_const_k * dV_k`` for every user at queue state ``q``."""
    dv = np.array([potential_increment(table, q, k) for k in range(config.K)])
    return np.asarray(config.rate_const) * dv


def waterfill_power(gain, water_level):
    """``(level - 1/gain)^+``; zero gain or non-positive level gives zero power."""
    gain = np.asarray(gain, dtype=float)
    level = np.asarray(water_level, dtype=float)
    with np.errstate(divide="ignore"):
        inv = np.where(gain > 0, 1.0 / np.where(gain > 0, gain, 1.0), np.inf)
    return np.maximum(level - inv, 0.0)


def subcarrier_metric(gain, delta_scaled, gamma: float):
    """Best achievable surplus ``delta * ln(1 + g p) - gamma * p`` on one subband."""
    delta = np.maximum(np.asarray(delta_scaled, dtype=float), 0.0)
    gain = np.asarray(gain, dtype=float)
    p = waterfill_power(gain, delta / gamma)
    return delta * np.log1p(gain * p) - gamma * p


def _assign(winner: np.ndarray, K: int) -> np.ndarray:
    """One-hot ``(..., K, N_F)`` from winner indices ``(..., N_F)``."""
    return (np.arange(K)[:, None] == winner[..., None, :]).astype(np.int8)


def optimal_action(gain, delta_scaled, gamma: float) -> Action:
    """Queue- and channel-aware rule: each subband goes to the user with the largest metric.

    ``delta_scaled`` is ``(..., K)``.  Ties, including the all-zero case, go to
    the lowest user index, which then transmits nothing.
    """
    gain = np.asarray(gain, dtype=float)
    delta = np.asarray(delta_scaled, dtype=float)[..., None]
    x = subcarrier_metric(gain, delta, gamma)
    s = _assign(np.argmax(x, axis=-2), gain.shape[-2])
    p = s * waterfill_power(gain, np.maximum(delta, 0.0) / gamma)
    return Action(p, s)


def csi_only_action(gain, delta_scaled, gamma: float) -> Action:
    """Best-channel assignment, then water-filling for the winner only."""
    gain = np.asarray(gain, dtype=float)
    delta = np.asarray(delta_scaled, dtype=float)[..., None]
    s = _assign(np.argmax(gain, axis=-2), gain.shape[-2])
    p = s * waterfill_power(gain, np.maximum(delta, 0.0) / gamma)
    return Action(p, s)


def allocation_objective(gain, action: Action, delta_scaled, gamma: float):
    """Per-slot objective minimised by the allocators (priced power minus potential drop)."""
    gain = np.asarray(gain, dtype=float)
    served = np.sum(action.s * np.log1p(action.p * gain), axis=-1)
    return gamma * action.total_power - np.sum(np.asarray(delta_scaled) * served, axis=-1)


def allocate_optimal(channel: ChannelState, queue, table, config: SystemConfig) -> Action:
    delta = scaled_increments(table, queue.q if isinstance(queue, QueueState) else queue, config)
    return optimal_action(channel.gain, delta, config.gamma)


def allocate_csi_only(channel: ChannelState, queue, table, config: SystemConfig) -> Action:
    delta = scaled_increments(table, queue.q if isinstance(queue, QueueState) else queue, config)
    return csi_only_action(channel.gain, delta, config.gamma)


def assignment_agreement(user_tables: np.ndarray, queues: np.ndarray, gains: np.ndarray,
                         config: SystemConfig) -> tuple[float, float, int]:
    """How often the queue-aware and best-channel rules pick the same user.

    ``queues`` is ``(M, K)``, ``gains`` is ``(M, K, N_F)``; potentials are
    per-user.  Subbands where every metric is zero carry no decision and are
    left out.  Returns ``(rate, standard_error, n_subbands)``.
    """
    tables = np.asarray(user_tables, dtype=float)
    inc = user_increments(tables)  # (K, N_Q + 1)
    K = tables.shape[0]
    dv = inc[np.arange(K)[None, :], queues]  # (M, K)
    delta = np.asarray(config.rate_const)[None, :] * dv
    x = subcarrier_metric(gains, delta[..., None], config.gamma)
    live = x.max(axis=-2) > 0
    same = np.argmax(x, axis=-2) == np.argmax(gains, axis=-2)
    n = int(live.sum())
    rate = float(same[live].mean()) if n else float("nan")
    se = float(np.sqrt(rate * (1 - rate) / n)) if n else float("nan")
    return rate, se, n
