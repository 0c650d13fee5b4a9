"""Online potential learning over regenerative periods.

The per-slot work runs inside :func:`ofdma_delay.engine.run_block`; the
plain-Python operations here (``accumulate_visit``, ``potential_update`` ...)
are the reference definitions used by the tests and by anyone stepping a
learner by hand.
"""
from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import engine
from .config import SolverSettings, SystemConfig
from .model import Action
from .policy import csi_only_action, optimal_action, scaled_increments


@dataclass(frozen=True)
class StepsizeSchedule:
    a: float = 1.0
    b: float = 1.0
    exponent: float = 0.85

    def __post_init__(self):
        if not (self.a > 0 and self.b >= 1 and 0.5 < self.exponent <= 1.0):
            raise ValueError("need a > 0, b >= 1 and exponent in (0.5, 1]")

    @classmethod
    def from_settings(cls, s: SolverSettings) -> "StepsizeSchedule":
        return cls(s.step_a, s.step_b, s.step_exponent)

    def __call__(self, k):
        return self.a / (self.b + np.asarray(k, dtype=float)) ** self.exponent


def stepsize(schedule: StepsizeSchedule, k: int) -> float:
    if k < 0:
        raise ValueError("period index must be >= 0")
    return float(schedule(k))


@dataclass
class RegenAccumulators:
    s_g: np.ndarray
    s_v: np.ndarray
    l: np.ndarray

    @classmethod
    def zeros(cls, n_states: int) -> "RegenAccumulators":
        return cls(np.zeros(n_states), np.zeros(n_states), np.zeros(n_states, dtype=np.int64))

    def reset(self):
        self.s_g[:] = 0.0
        self.s_v[:] = 0.0
        self.l[:] = 0


def accumulate_visit(acc: RegenAccumulators, state_i: int, reward_g: float,
                     next_state_potential: float, first_visit: bool = False):
    """Add one slot spent in ``state_i``.

    With ``first_visit`` only the first slot in each state feeds the sums;
    the visit count still records that the state was seen.
    """
    if first_visit and acc.l[state_i] > 0:
        return
    acc.s_g[state_i] += reward_g
    acc.s_v[state_i] += next_state_potential
    acc.l[state_i] += 1


def is_period_boundary(acc: RegenAccumulators) -> bool:
    return bool(np.all(acc.l >= 1))


def potential_update(table: np.ndarray, acc: RegenAccumulators, eps: float, ref: int = 0) -> np.ndarray:
    """Return the table after one stochastic-approximation step (input untouched)."""
    if np.any(acc.l == 0):
        raise ZeroDivisionError("potential update needs every state visited in the period")
    mean_g = acc.s_g / acc.l
    mean_v = acc.s_v / acc.l
    y = mean_g - (mean_g[ref] + mean_v[ref] - table[ref]) + mean_v - table
    y[ref] = 0.0  # zero analytically; pin it so rounding cannot drift the reference
    return table + eps * y


def policy_improve(table: np.ndarray, config: SystemConfig):
    """Greedy allocator for the current table: ``(gain, q) -> Action``.

    A 1-D table gives the joint rule, a ``(K, N_Q + 1)`` table the
    best-channel rule with per-user water levels.
    """
    table = np.array(table, dtype=float)
    rule = optimal_action if table.ndim == 1 else csi_only_action

    def act(gain, q) -> Action:
        return rule(gain, scaled_increments(table, np.asarray(q), config), config.gamma)

    return act


# --------------------------------------------------------------------- engine-backed learners

class LearnerState:
    """Accumulators, period clocks and trace buffer shared with the compiled loop.

    ``mode`` is ``engine.JOINT`` (one table over all joint states) or
    ``engine.PER_USER`` (one table per user over its own queue length).
    """

    def __init__(self, mode: int, n_tables: int, n_states: int, trace_rows: int = 4096):
        self.mode = mode
        self.s_g = np.zeros((n_tables, n_states))
        self.s_v = np.zeros((n_tables, n_states))
        self.l = np.zeros((n_tables, n_states), dtype=np.int64)
        self.missing = np.full(n_tables, n_states, dtype=np.int64)
        self.period = np.zeros(n_tables, dtype=np.int64)
        self.start = np.zeros(n_tables, dtype=np.int64)
        self.stable = np.zeros(n_tables, dtype=np.int64)
        self.trace = np.zeros((trace_rows, engine.TRACE_COLS))
        self.trace_n = np.zeros(1, dtype=np.int64)

    @classmethod
    def idle(cls, K: int) -> "LearnerState":
        return cls(engine.NO_LEARNING, 1, 1, trace_rows=0)

    def grow_trace(self):
        bigger = np.zeros((max(2 * self.trace.shape[0], 1024), engine.TRACE_COLS))
        bigger[: self.trace.shape[0]] = self.trace
        self.trace = bigger

    def trace_rows(self) -> np.ndarray:
        return self.trace[: int(self.trace_n[0])].copy()


TRACE_HEADER = ("table", "period_index", "slots_elapsed", "epsilon", "table_delta_maxnorm",
                "running_avg_reward", "running_avg_power", "table_mean")


@dataclass
class LearningResult:
    table: np.ndarray
    trace: np.ndarray  # rows laid out as TRACE_HEADER
    converged: bool
    status: str
    periods: np.ndarray  # per table
    slots: int
    coverage: np.ndarray  # slots spent in each tracked state, for spotting starvation
    metrics: object = None

    def stable_period(self, delta_v: float, table: int | None = None) -> int | None:
        """First period index after which every later update moved less than ``delta_v``."""
        rows = self.trace if table is None else self.trace[self.trace[:, 0] == table]
        if rows.size == 0:
            return None
        big = np.flatnonzero(rows[:, 4] >= delta_v)
        if big.size == 0:
            return int(rows[0, 1])
        if big[-1] + 1 >= rows.shape[0]:
            return None
        return int(rows[big[-1] + 1, 1])

    def export_trace(self, sep: str = "\t") -> str:
        buf = io.StringIO()
        buf.write(sep.join(TRACE_HEADER) + "\n")
        for row in self.trace:
            buf.write(sep.join([str(int(row[0])), str(int(row[1])), str(int(row[2]))]
                               + [repr(float(x)) for x in row[3:]]) + "\n")
        return buf.getvalue()


_STATUS = {
    engine.OK: "slot_budget",
    engine.CONVERGED: "converged",
    engine.MAX_PERIODS: "max_periods",
    engine.PERIOD_CAP: "period_cap",
}


def initial_table(config: SystemConfig, kind: str, joint: bool) -> np.ndarray:
    """Starting potentials: ``zeros``, or ``ramp`` (one mean inter-arrival of holding cost per packet).

    A zero table spends no power, so a queue that skips a state while filling
    up may never complete a period; the ramp keeps every backlog served.
    """
    K, N_Q = config.K, config.N_Q
    if kind == "zeros":
        per_user = np.zeros((K, N_Q + 1))
    elif kind == "ramp":
        lam_tau = np.asarray(config.lam) * config.tau
        slope = np.divide(config.queue_weight, lam_tau, out=np.zeros(K), where=lam_tau > 0)
        per_user = slope[:, None] * np.arange(N_Q + 1)[None, :]
    else:
        raise ValueError(f"unknown initial table {kind!r}")
    if not joint:
        return per_user
    from .policy import all_states
    states = all_states(K, N_Q)
    return per_user[np.arange(K), states].sum(axis=1)


def _learn(config: SystemConfig, mode: int, schedule: StepsizeSchedule | None, seed, max_slots,
           settings: SolverSettings | None, initial=None, raise_on_cap: bool = True) -> LearningResult:
    from .policy import all_states, state_index
    from .sim import PolicySpec, Simulator

    s = settings or config.solver
    if schedule is not None:
        s = replace(s, step_a=schedule.a, step_b=schedule.b, step_exponent=schedule.exponent)
    cfg = replace(config, solver=s)
    K, N_Q = cfg.K, cfg.N_Q
    if mode == engine.JOINT:
        if cfg.n_states > 4096:
            raise ValueError(f"joint state space {cfg.n_states} exceeds the 4096 cap; use the per-user learner")
        table = _start(cfg, initial, joint=True)
        policy = PolicySpec("optimal", table=table)
        learner = LearnerState(mode, 1, cfg.n_states)
        if not any(cfg.lam):
            learner.missing[:] = -1
    else:
        table = _start(cfg, initial, joint=False)
        policy = PolicySpec("decomposed", table=table)
        learner = LearnerState(mode, K, N_Q + 1)
        learner.missing[np.asarray(cfg.lam) == 0] = -1  # idle users keep their initial table

    sim = Simulator(cfg, policy, seed=seed, record_queues=False)
    table = sim.joint_table if mode == engine.JOINT else sim.user_tables  # the live array
    coverage = np.zeros(learner.l.shape[1] if mode == engine.JOINT else (K, N_Q + 1))
    budget = int(max_slots) if max_slots is not None else None
    status = engine.OK
    chunk = 1 << 16
    done = 0
    while budget is None or done < budget:
        n = chunk if budget is None else min(chunk, budget - done)
        before = sim.t
        sim.record_queues = True
        sim.queue_log.clear()
        status = sim.run(n, learner)
        qs = sim.queue_trajectory()
        if mode == engine.JOINT:
            coverage += np.bincount(state_index(qs, N_Q), minlength=cfg.n_states)
        else:
            for k in range(K):
                coverage[k] += np.bincount(qs[:, k], minlength=N_Q + 1)
        done += sim.t - before
        if status != engine.OK:
            break
    sim.record_queues = False
    sim.queue_log.clear()

    if status == engine.PERIOD_CAP and raise_on_cap:
        from .sim import PeriodCapExceeded
        raise PeriodCapExceeded(
            f"a regenerative period exceeded {s.max_period_slots} slots; "
            f"never-visited states in the open period: {_missing_states(learner, mode, cfg)}")
    converged = status == engine.CONVERGED
    if not converged:
        warnings.warn(f"learner stopped without reaching delta_v stability ({_STATUS[status]})",
                      RuntimeWarning, stacklevel=3)
    return LearningResult(
        table=table.copy(), trace=learner.trace_rows(), converged=converged,
        status=_STATUS[status], periods=learner.period.copy(), slots=sim.t,
        coverage=coverage, metrics=sim.metrics(),
    )


def _start(cfg, initial, joint):
    if initial is None or isinstance(initial, str):
        return initial_table(cfg, initial or "zeros", joint)
    return np.array(initial, dtype=float)


def _missing_states(learner, mode, cfg):
    from .policy import all_states
    if mode == engine.JOINT:
        states = all_states(cfg.K, cfg.N_Q)
        return [tuple(int(x) for x in states[i]) for i in np.flatnonzero(learner.l[0] == 0)][:10]
    return {k: np.flatnonzero(learner.l[k] == 0).tolist() for k in range(cfg.K)}


def run_algorithm1(config: SystemConfig, schedule: StepsizeSchedule | None = None, *,
                   seed: int | None = None, max_slots: int | None = 50_000_000,
                   settings: SolverSettings | None = None, initial=None,
                   raise_on_cap: bool = True) -> LearningResult:
    """Joint-table learner with the queue- and channel-aware allocator in the loop."""
    return _learn(config, engine.JOINT, schedule, seed, max_slots, settings, initial, raise_on_cap)


def run_algorithm2(config: SystemConfig, schedule: StepsizeSchedule | None = None, *,
                   seed: int | None = None, max_slots: int | None = 50_000_000,
                   settings: SolverSettings | None = None, initial=None,
                   raise_on_cap: bool = True) -> LearningResult:
    """K per-user learners sharing one system under the best-channel allocator.

    Each user keeps its own accumulators and period clock; learning stops
    once every user's last ``patience`` updates moved its table by less than
    ``delta_v``.
    """
    return _learn(config, engine.PER_USER, schedule, seed, max_slots, settings, initial, raise_on_cap)
