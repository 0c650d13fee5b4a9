"""Compiled slot loop shared by the simulator and the online learners.

Everything here is scalar numba code; the public, vectorised versions of
the allocation rules live in :mod:`ofdma_delay.policy` and the tests check
that both produce identical actions.  Random inputs are drawn outside (per
process and user) and handed in one block of slots at a time.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

# policy kinds
ZERO, OPTIMAL, DECOMPOSED, MLWDF, ROUND_ROBIN = 0, 1, 2, 3, 4
# learner modes
NO_LEARNING, JOINT, PER_USER = 0, 1, 2
# dynamics
BITS, BIRTH_DEATH = 0, 1
# exit status of run_block
OK, CONVERGED, MAX_PERIODS, PERIOD_CAP, INVALID_REGIME, TRACE_FULL = 0, 1, 2, 3, 4, 5

# accumulator layout: scalars first, then per-user blocks of length K
A_SLOTS, A_POWER, A_REWARD, A_VIOLATIONS, A_SCALARS = 0, 1, 2, 3, 4
U_QUEUE, U_OFFERED, U_ACCEPTED, U_DROPPED, U_SERVED, U_SOJOURN, U_DEPARTED, U_POWER, N_USER_FIELDS = (
    0, 1, 2, 3, 4, 5, 6, 7, 8)

TRACE_COLS = 8  # table, period, slot, epsilon, delta, avg reward, avg power, table mean


def accumulator_size(K: int) -> int:
    return A_SCALARS + N_USER_FIELDS * K


@njit(cache=True)
def _ui(field, k, K):
    return A_SCALARS + field * K + k


@njit(cache=True)
def _joint_index(q, N_Q):
    idx = 0
    for k in range(q.shape[0]):
        idx = idx * (N_Q + 1) + q[k]
    return idx


@njit(cache=True)
def _waterfill(gain, level):
    if gain <= 0.0 or level <= 0.0:
        return 0.0
    p = level - 1.0 / gain
    return p if p > 0.0 else 0.0


@njit(cache=True)
def _metric(gain, delta, gamma):
    if delta <= 0.0:
        return 0.0
    p = _waterfill(gain, delta / gamma)
    return delta * math.log1p(gain * p) - gamma * p


@njit(cache=True)
def _increments(kind, q, joint_table, user_tables, rate_const, N_Q, delta):
    K = q.shape[0]
    if kind == OPTIMAL:
        here = joint_table[_joint_index(q, N_Q)]
        for k in range(K):
            if q[k] == 0:
                delta[k] = 0.0
            else:
                q[k] -= 1
                delta[k] = rate_const[k] * (here - joint_table[_joint_index(q, N_Q)])
                q[k] += 1
    else:
        for k in range(K):
            if q[k] == 0:
                delta[k] = 0.0
            else:
                delta[k] = rate_const[k] * (user_tables[k, q[k]] - user_tables[k, q[k] - 1])


@njit(cache=True)
def decide(kind, t, gain, q, hol_delay, joint_table, user_tables, rate_const, beta,
           gamma, level, ref_power, N_Q, power, winner, delta):
    """Fill ``power`` (K, N_F) and ``winner`` (N_F,) for one slot."""
    K, N_F = gain.shape
    power[:, :] = 0.0
    winner[:] = 0
    if kind == ZERO:
        return
    if kind == OPTIMAL or kind == DECOMPOSED:
        _increments(kind, q, joint_table, user_tables, rate_const, N_Q, delta)
        for n in range(N_F):
            best = 0
            if kind == OPTIMAL:
                best_x = _metric(gain[0, n], delta[0], gamma)
                for k in range(1, K):
                    x = _metric(gain[k, n], delta[k], gamma)
                    if x > best_x:
                        best, best_x = k, x
            else:
                for k in range(1, K):
                    if gain[k, n] > gain[best, n]:
                        best = k
            winner[n] = best
            if delta[best] > 0.0:
                power[best, n] = _waterfill(gain[best, n], delta[best] / gamma)
    elif kind == MLWDF:
        for n in range(N_F):
            best = 0
            best_x = -1.0
            for k in range(K):
                x = 0.0
                if q[k] > 0:
                    x = beta[k] * hol_delay[k] * math.log2(1.0 + ref_power * gain[k, n])
                if x > best_x:
                    best, best_x = k, x
            winner[n] = best
            if q[best] > 0:
                power[best, n] = _waterfill(gain[best, n], level)
    elif kind == ROUND_ROBIN:
        user = t % K
        for n in range(N_F):
            winner[n] = user
            if q[user] > 0:
                power[user, n] = _waterfill(gain[user, n], level)


@njit(cache=True)
def _stepsize(a, b, exponent, k):
    return a / (b + k) ** exponent


@njit(cache=True)
def _update_table(table, sg, sv, cnt, eps):
    """One stochastic-approximation step on a fully visited period; returns max |change|."""
    ref = sg[0] / cnt[0] + sv[0] / cnt[0] - table[0]
    biggest = 0.0
    n = table.shape[0]
    new = np.empty(n)
    new[0] = table[0]  # Y cancels at the reference; keep it exact rather than rounded
    for i in range(1, n):
        y = sg[i] / cnt[i] - ref + sv[i] / cnt[i] - table[i]
        new[i] = table[i] + eps * y
    for i in range(n):
        d = abs(new[i] - table[i])
        if d > biggest:
            biggest = d
        table[i] = new[i]
    return biggest


@njit(cache=True)
def run_block(
    # model
    N_Q, tau, lam_tau, rate_const, queue_weight, beta, bandwidth, gamma, dynamics,
    # policy
    kind, level, ref_power, joint_table, user_tables,
    # random inputs of this block
    gains, arrivals, uniforms, start, stop, t0, pkt_pool, pkt_cursor,
    # queue state (mutated)
    q, hol, fifo, fifo_head,
    # metrics (mutated)
    acc, qlog,
    # learner (mutated)
    learn_mode, first_visit, step_a, step_b, step_exp, delta_v, patience, max_periods,
    max_period_slots, l_sg, l_sv, l_cnt, l_missing, l_period, l_start, l_stable, trace, trace_n,
):
    """Simulate slots ``start..stop-1`` of the current random block.

    Returns ``(status, next_offset)``; the caller resumes from ``next_offset``.
    """
    K, N_F = gains.shape[1], gains.shape[2]
    power = np.zeros((K, N_F))
    winner = np.zeros(N_F, dtype=np.int64)
    delta = np.zeros(K)
    hol_delay = np.zeros(K)
    service = np.zeros(K)
    q_before = np.zeros(K, dtype=np.int64)
    g_user = np.zeros(K)
    bits_per_nat = bandwidth * tau / math.log(2.0)
    n_tables = l_missing.shape[0]

    for b in range(start, stop):
        t = t0 + b
        gain = gains[b]
        for k in range(K):
            q_before[k] = q[k]
            hol_delay[k] = float(t - fifo[k, fifo_head[k]]) if q[k] > 0 else 0.0
        if qlog.shape[0] > 0:
            qlog[b, :] = q

        decide(kind, t, gain, q, hol_delay, joint_table, user_tables, rate_const, beta,
               gamma, level, ref_power, N_Q, power, winner, delta)

        total_power = 0.0
        reward = 0.0
        for k in range(K):
            service[k] = 0.0
            g_user[k] = queue_weight[k] * q[k]
        for n in range(N_F):
            w = winner[n]
            for k in range(K):
                p = power[k, n]
                if not (p >= 0.0) or (p > 0.0 and k != w):
                    acc[A_VIOLATIONS] += 1.0
            p = power[w, n]
            total_power += p
            g_user[w] += gamma * p
            acc[_ui(U_POWER, w, K)] += p
            service[w] += math.log1p(p * gain[w, n])
        for k in range(K):
            reward += g_user[k]

        # queue dynamics
        if dynamics == BITS:
            for k in range(K):
                budget = service[k] * bits_per_nat
                while q[k] > 0 and budget > 0.0:
                    if budget >= hol[k]:
                        budget -= hol[k]
                        acc[_ui(U_SOJOURN, k, K)] += t - fifo[k, fifo_head[k]]
                        acc[_ui(U_DEPARTED, k, K)] += 1.0
                        acc[_ui(U_SERVED, k, K)] += 1.0
                        fifo_head[k] = (fifo_head[k] + 1) % N_Q
                        q[k] -= 1
                        if q[k] > 0:
                            hol[k] = pkt_pool[k, pkt_cursor[k]]
                            pkt_cursor[k] += 1
                        else:
                            hol[k] = 0.0
                    else:
                        hol[k] -= budget
                        budget = 0.0
                a = arrivals[b, k]
                acc[_ui(U_OFFERED, k, K)] += a
                room = N_Q - q[k]
                accepted = a if a < room else room
                acc[_ui(U_ACCEPTED, k, K)] += accepted
                acc[_ui(U_DROPPED, k, K)] += a - accepted
                if q[k] == 0 and accepted > 0:
                    hol[k] = pkt_pool[k, pkt_cursor[k]]
                    pkt_cursor[k] += 1
                for j in range(accepted):
                    fifo[k, (fifo_head[k] + q[k]) % N_Q] = t
                    q[k] += 1
        else:
            u = uniforms[b]
            total = 0.0
            event = -1
            for k in range(K):
                total += lam_tau[k]
                if event < 0 and u < total:
                    event = k
            for k in range(K):
                total += rate_const[k] * service[k]
                if event < 0 and u < total:
                    event = K + k
            if total > 1.0 + 1e-12:
                return INVALID_REGIME, b
            if 0 <= event < K:
                k = event
                acc[_ui(U_OFFERED, k, K)] += 1.0
                if q[k] < N_Q:
                    acc[_ui(U_ACCEPTED, k, K)] += 1.0
                    fifo[k, (fifo_head[k] + q[k]) % N_Q] = t
                    q[k] += 1
                else:
                    acc[_ui(U_DROPPED, k, K)] += 1.0
            elif event >= K:
                k = event - K
                if q[k] > 0:
                    acc[_ui(U_SOJOURN, k, K)] += t - fifo[k, fifo_head[k]]
                    acc[_ui(U_DEPARTED, k, K)] += 1.0
                    acc[_ui(U_SERVED, k, K)] += 1.0
                    fifo_head[k] = (fifo_head[k] + 1) % N_Q
                    q[k] -= 1

        acc[A_SLOTS] += 1.0
        acc[A_POWER] += total_power
        acc[A_REWARD] += reward
        for k in range(K):
            acc[_ui(U_QUEUE, k, K)] += q_before[k]

        if learn_mode == NO_LEARNING:
            continue

        # learner bookkeeping: one joint table, or one table per user
        for j in range(n_tables):
            if l_missing[j] < 0:  # idle table, never updated
                continue
            if learn_mode == JOINT:
                i = _joint_index(q_before, N_Q)
                g = reward
                v_next = joint_table[_joint_index(q, N_Q)]
            else:
                i = q_before[j]
                g = g_user[j]
                v_next = user_tables[j, q[j]]
            if l_cnt[j, i] == 0:
                l_missing[j] -= 1
            if l_cnt[j, i] == 0 or not first_visit:
                l_sg[j, i] += g
                l_sv[j, i] += v_next
                l_cnt[j, i] += 1

        stop_now = False
        for j in range(n_tables):
            if l_missing[j] < 0:
                continue
            if l_missing[j] > 0:
                if t + 1 - l_start[j] > max_period_slots:
                    return PERIOD_CAP, b + 1
                continue
            if learn_mode == JOINT:
                table = joint_table
            else:
                table = user_tables[j]
            eps = _stepsize(step_a, step_b, step_exp, l_period[j])
            change = _update_table(table, l_sg[j], l_sv[j], l_cnt[j], eps)
            l_period[j] += 1
            l_sg[j, :] = 0.0
            l_sv[j, :] = 0.0
            l_cnt[j, :] = 0
            l_missing[j] = l_cnt.shape[1]
            l_start[j] = t + 1
            if change < delta_v:
                l_stable[j] += 1
            else:
                l_stable[j] = 0
            row = trace_n[0]
            if row < trace.shape[0]:
                trace[row, 0] = j
                trace[row, 1] = l_period[j]
                trace[row, 2] = t + 1
                trace[row, 3] = eps
                trace[row, 4] = change
                trace[row, 5] = acc[A_REWARD] / acc[A_SLOTS]
                trace[row, 6] = acc[A_POWER] / acc[A_SLOTS]
                trace[row, 7] = np.mean(table)
            trace_n[0] = row + 1
            if l_period[j] >= max_periods:
                stop_now = True
        done = True
        for j in range(n_tables):
            if l_missing[j] >= 0 and l_stable[j] < patience:
                done = False
        if done:
            return CONVERGED, b + 1
        if stop_now:
            return MAX_PERIODS, b + 1
        if trace_n[0] >= trace.shape[0]:
            return TRACE_FULL, b + 1
    return OK, stop
