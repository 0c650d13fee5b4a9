"""Slot-level replications, metrics and sweeps."""
from __future__ import annotations

import io
import math
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import stats

from . import engine
from .config import SystemConfig
from .model import ARRIVALS, CSI, EVENTS, PACKETS, stream
from .oracle import InvalidRegimeError, build_csi_alphabet

POLICY_KINDS = {
    "zero": engine.ZERO,
    "optimal": engine.OPTIMAL,
    "decomposed": engine.DECOMPOSED,
    "mlwdf": engine.MLWDF,
    "round_robin": engine.ROUND_ROBIN,
}
TABLE_SOURCES = ("fixed", "oracle", "learn")


class PeriodCapExceeded(RuntimeError):
    """A regenerative period ran past ``max_period_slots`` without visiting every state."""


@dataclass(frozen=True)
class PolicySpec:
    """What drives the allocator.

    ``table`` is a joint (1-D) or per-user (2-D) potential table for the
    queue-aware kinds.  ``gamma`` overrides ``config.gamma`` for this policy
    only; the baselines use ``1 / gamma`` as their water level.  ``source``
    says where a missing table comes from when the policy is resolved
    against a config (see :func:`resolve_policy`).
    """

    kind: str
    table: np.ndarray | None = None
    gamma: float | None = None
    name: str | None = None
    source: str = "fixed"

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.source not in TABLE_SOURCES:
            raise ValueError(f"unknown table source {self.source!r}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @property
    def label(self) -> str:
        return self.name or self.kind

    def with_gamma(self, gamma: float) -> "PolicySpec":
        return replace(self, gamma=float(gamma))


def draw_block(streams: dict, config: SystemConfig, n: int):
    """Random inputs for ``n`` slots: gains (n,K,N_F), arrivals (n,K), event uniforms (n,)."""
    K = config.K
    gains = np.empty((n, K, config.N_F))
    arrivals = np.empty((n, K), dtype=np.int64)
    for k in range(K):
        gains[:, k, :] = streams[CSI, k].exponential(1.0, size=(n, config.N_F))
        arrivals[:, k] = streams[ARRIVALS, k].poisson(config.lam[k] * config.tau, size=n)
    uniforms = streams[EVENTS, 0].random(n)
    return gains, arrivals, uniforms


def make_streams(seed: int, K: int) -> dict:
    out = {(p, k): stream(seed, p, k) for p in (CSI, ARRIVALS, PACKETS) for k in range(K)}
    out[EVENTS, 0] = stream(seed, EVENTS, 0)
    return out


@dataclass
class Metrics:
    slots: int
    avg_power: float
    avg_queue: np.ndarray
    avg_delay_littles: np.ndarray
    avg_delay_sojourn: np.ndarray
    drop_rate: np.ndarray
    weighted_delay: float
    avg_reward: float = 0.0
    violations: int = 0
    departed: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def from_accumulators(cls, acc: np.ndarray, config: SystemConfig) -> "Metrics":
        K, tau = config.K, config.tau
        slots = int(acc[engine.A_SLOTS])
        user = acc[engine.A_SCALARS:].reshape(engine.N_USER_FIELDS, K)
        n = max(slots, 1)
        avg_queue = user[engine.U_QUEUE] / n
        accepted = user[engine.U_ACCEPTED]
        offered = user[engine.U_OFFERED]
        departed = user[engine.U_DEPARTED]
        with np.errstate(divide="ignore", invalid="ignore"):
            lam_eff = accepted / (n * tau)
            littles = np.where(accepted > 0, avg_queue / lam_eff, 0.0)
            sojourn = np.where(departed > 0, user[engine.U_SOJOURN] * tau / departed, 0.0)
            drop = np.where(offered > 0, user[engine.U_DROPPED] / offered, 0.0)
        return cls(
            slots=slots,
            avg_power=acc[engine.A_POWER] / n,
            avg_queue=avg_queue,
            avg_delay_littles=littles,
            avg_delay_sojourn=sojourn,
            drop_rate=drop,
            weighted_delay=float(np.dot(config.beta, littles)),
            avg_reward=acc[engine.A_REWARD] / n,
            violations=int(acc[engine.A_VIOLATIONS]),
            departed=departed.copy(),
        )


class Simulator:
    """One replication of the downlink under a fixed or learning policy.

    Random inputs are drawn in blocks per (process, user) stream, so two
    simulators with the same seed see the same fading and arrivals slot by
    slot whatever the policy does; ``checksum`` fingerprints what was drawn.
    """

    def __init__(self, config: SystemConfig, policy: PolicySpec, seed: int | None = None,
                 block: int = 4096, record_queues: bool = False):
        if policy.kind in ("optimal", "decomposed") and policy.table is None:
            raise ValueError(f"policy {policy.label!r} needs a potential table (see resolve_policy)")
        self.config = config
        self.policy = policy
        self.seed = config.rng_seed if seed is None else seed
        self.block = int(block)
        self.record_queues = record_queues
        K, N_Q = config.K, config.N_Q
        self.streams = make_streams(self.seed, K)
        self.alphabet = build_csi_alphabet(config.csi_levels) if config.csi_model == "alphabet" else None

        self.q = np.zeros(K, dtype=np.int64)
        self.hol = np.zeros(K)
        self.fifo = np.zeros((K, N_Q), dtype=np.int64)
        self.fifo_head = np.zeros(K, dtype=np.int64)
        self.t = 0
        self.acc = np.zeros(engine.accumulator_size(K))
        self.checksum = 0
        self.queue_log: list[np.ndarray] = []

        self.joint_table = np.zeros(1)
        self.user_tables = np.zeros((K, N_Q + 1))
        if policy.kind == "optimal":
            self.joint_table = np.ascontiguousarray(policy.table, dtype=float)
            if self.joint_table.shape != (config.n_states,):
                raise ValueError("joint table has the wrong size")
        elif policy.kind == "decomposed":
            self.user_tables = np.ascontiguousarray(policy.table, dtype=float)
            if self.user_tables.shape != (K, N_Q + 1):
                raise ValueError("per-user table must be (K, N_Q + 1)")

        self._gains = self._arrivals = self._uniforms = None
        self._offset = self._size = 0
        self._t_block = 0
        self._pool = np.zeros((K, 0))
        self._cursor = np.zeros(K, dtype=np.int64)
        self._pool_len = np.zeros(K, dtype=np.int64)  # rows are zero-padded past this
        self._consts = (
            np.array(config.lam) * config.tau,
            np.array(config.rate_const),
            np.array(config.queue_weight),
            np.array(config.beta),
        )

    @property
    def gamma(self) -> float:
        return self.policy.gamma if self.policy.gamma is not None else self.config.gamma

    def _next_block(self):
        cfg = self.config
        gains, arrivals, uniforms = draw_block(self.streams, cfg, self.block)
        self.checksum = zlib.crc32(arrivals.tobytes(), zlib.crc32(gains.tobytes(), self.checksum))
        if self.alphabet is not None:
            gains = self.alphabet.quantize(gains)
        self._gains, self._arrivals, self._uniforms = gains, arrivals, uniforms
        self._t_block = self.t
        self._offset, self._size = 0, self.block
        if cfg.dynamics == "bits":
            # enough sizes for every packet that can reach the head in this block
            need = arrivals.sum(axis=0) + cfg.N_Q + 1
            left = [self._pool[k, self._cursor[k]:self._pool_len[k]] for k in range(cfg.K)]
            rows = []
            for k in range(cfg.K):
                extra = max(int(need[k]) - left[k].size, 0)
                fresh = self.streams[PACKETS, k].exponential(cfg.mean_packet_bits[k], size=extra)
                rows.append(np.concatenate([left[k], fresh]))
            width = max(r.size for r in rows)
            pool = np.zeros((cfg.K, width))
            for k, r in enumerate(rows):
                pool[k, : r.size] = r
            self._pool, self._cursor = pool, np.zeros(cfg.K, dtype=np.int64)
            self._pool_len = np.array([r.size for r in rows], dtype=np.int64)
            # the current head-of-line packets keep their already drawn sizes

    def reset_metrics(self):
        self.acc[:] = 0.0

    def metrics(self) -> Metrics:
        return Metrics.from_accumulators(self.acc, self.config)

    def run(self, n_slots: int, learner=None) -> int:
        """Advance ``n_slots`` slots (fewer if a learner stops early); returns the engine status."""
        cfg = self.config
        kind = POLICY_KINDS[self.policy.kind]
        lam_tau, rate_const, weight, beta = self._consts
        gamma = self.gamma
        level = 1.0 / gamma
        ref_power = cfg.P_0 / cfg.N_F
        dynamics = engine.BITS if cfg.dynamics == "bits" else engine.BIRTH_DEATH
        s = cfg.solver
        if learner is None:
            from .online import LearnerState  # local: online imports this module
            learner = LearnerState.idle(cfg.K)
        remaining = int(n_slots)
        status = engine.OK
        while remaining > 0:
            if self._offset >= self._size:
                self._next_block()
            start = self._offset
            stop = min(self._size, start + remaining)
            qlog = np.zeros((self._size if self.record_queues else 0, cfg.K), dtype=np.int64)
            status, end = engine.run_block(
                cfg.N_Q, cfg.tau, lam_tau, rate_const, weight, beta, cfg.subband_bandwidth,
                gamma, dynamics, kind, level, ref_power, self.joint_table, self.user_tables,
                self._gains, self._arrivals, self._uniforms, start, stop, self._t_block,
                self._pool, self._cursor, self.q, self.hol, self.fifo, self.fifo_head,
                self.acc, qlog,
                learner.mode, s.estimator == "first_visit", s.step_a, s.step_b, s.step_exponent,
                s.delta_v, s.patience, s.max_periods, s.max_period_slots,
                learner.s_g, learner.s_v, learner.l, learner.missing, learner.period,
                learner.start, learner.stable, learner.trace, learner.trace_n,
            )
            if status == engine.INVALID_REGIME:
                raise InvalidRegimeError(
                    f"birth and death probabilities exceed one at slot {self._t_block + end}")
            if self.record_queues:
                self.queue_log.append(qlog[start:end].copy())
            self.t += end - start
            remaining -= end - start
            self._offset = end
            if status == engine.TRACE_FULL:
                learner.grow_trace()
                status = engine.OK
                continue
            if status != engine.OK:
                break
        return status

    def queue_trajectory(self) -> np.ndarray:
        return np.concatenate(self.queue_log) if self.queue_log else np.zeros((0, self.config.K), int)


# --------------------------------------------------------------------- experiments

@dataclass(frozen=True)
class ExperimentSpec:
    config: SystemConfig
    policies: tuple[PolicySpec, ...]
    snr_list: tuple[float, ...] = ()  # dB; empty means the config's own P_0
    seeds: tuple[int, ...] = (0,)
    warmup_slots: int = 100_000
    measure_slots: int = 1_000_000
    calibrate: bool = False
    calibration_seed: int = 10_000
    calibration_slots: int = 200_000
    learn_slots: int = 2_000_000

    def __post_init__(self):
        if isinstance(self.policies, PolicySpec):
            object.__setattr__(self, "policies", (self.policies,))
        if self.measure_slots < 10 * self.warmup_slots:
            warnings.warn("measure_slots is below 10x warmup_slots", stacklevel=3)

    def points(self) -> list[tuple[float, SystemConfig]]:
        if not self.snr_list:
            return [(self.config.snr_db, self.config)]
        return [(float(s), self.config.with_snr_db(s)) for s in self.snr_list]


def run_replication(spec: ExperimentSpec, seed: int, policy: PolicySpec | None = None,
                    config: SystemConfig | None = None) -> Metrics:
    """Warm up, then measure one policy with one seed (tables must already be resolved)."""
    config = spec.config if config is None else config
    policy = spec.policies[0] if policy is None else policy
    sim = Simulator(config, policy, seed=seed)
    sim.run(spec.warmup_slots)
    sim.reset_metrics()
    sim.run(spec.measure_slots)
    m = sim.metrics()
    busy = np.flatnonzero(m.avg_queue > 0.9 * config.N_Q)
    if busy.size:
        warnings.warn(f"queues {busy.tolist()} sit near the buffer limit; results reflect overflow",
                      stacklevel=2)
    return m


def resolve_policy(policy: PolicySpec, config: SystemConfig, seed: int = 0,
                   learn_slots: int = 2_000_000) -> PolicySpec:
    """Fill in a missing potential table from the oracle or by online learning."""
    if policy.kind not in ("optimal", "decomposed") or policy.table is not None:
        return policy
    cfg = replace(config, gamma=policy.gamma) if policy.gamma is not None else config
    if policy.source == "oracle":
        from .oracle import per_user_poisson_solve, relative_value_iteration
        alphabet = build_csi_alphabet(cfg.csi_levels)
        if policy.kind == "decomposed":
            ties = "lowest" if cfg.csi_model == "alphabet" else "split"
            table = np.array([per_user_poisson_solve(k, alphabet, cfg, ties=ties).v
                              for k in range(cfg.K)])
        else:
            table = relative_value_iteration(cfg, alphabet).v_tilde
    elif policy.source == "learn":
        from .online import run_algorithm1, run_algorithm2
        runner = run_algorithm2 if policy.kind == "decomposed" else run_algorithm1
        # a zero start spends no power and can stall with full queues
        table = runner(cfg, seed=seed, max_slots=learn_slots, initial="ramp", raise_on_cap=False).table
    else:
        raise ValueError(f"policy {policy.label!r} has no table and source 'fixed'")
    return replace(policy, table=table)


def _replicate(args):
    spec, seed, policy, config = args
    return run_replication(spec, seed, policy, config)


@dataclass
class SweepRow:
    policy: str
    snr_db: float
    seed: int
    gamma: float
    metrics: Metrics | None
    error: str | None = None


def prepare_point(spec: ExperimentSpec, config: SystemConfig) -> list[PolicySpec]:
    """Resolve tables and (optionally) calibrate every policy at one SNR point."""
    from .calibrate import calibrate_policy
    out = []
    for policy in spec.policies:
        if spec.calibrate:
            policy = calibrate_policy(policy, config, seed=spec.calibration_seed,
                                      slots=spec.calibration_slots, learn_slots=spec.learn_slots)
        else:
            policy = resolve_policy(policy, config, seed=spec.calibration_seed,
                                    learn_slots=spec.learn_slots)
        out.append(policy)
    return out


def sweep(spec: ExperimentSpec, jobs: int = 1) -> list[SweepRow]:
    """Every (snr, policy, seed) cell.  A failing cell is recorded, not fatal."""
    cells = []
    for snr, config in spec.points():
        try:
            policies = prepare_point(spec, config)
        except Exception as exc:  # one bad point must not sink the sweep
            for policy in spec.policies:
                for seed in spec.seeds:
                    cells.append((policy.label, snr, seed, math.nan, None, f"{type(exc).__name__}: {exc}"))
            continue
        for policy in policies:
            gamma = policy.gamma if policy.gamma is not None else config.gamma
            for seed in spec.seeds:
                cells.append((policy.label, snr, seed, gamma, (spec, seed, policy, config), None))

    todo = [c[4] for c in cells if c[4] is not None]
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_replicate, a) for a in todo]
            results = []
            for f in futures:
                try:
                    results.append(f.result())
                except Exception as exc:
                    results.append(exc)
    else:
        results = []
        for a in todo:
            try:
                results.append(_replicate(a))
            except Exception as exc:
                results.append(exc)

    rows, it = [], iter(results)
    for label, snr, seed, gamma, args, err in cells:
        if args is None:
            rows.append(SweepRow(label, snr, seed, gamma, None, err))
            continue
        res = next(it)
        if isinstance(res, Exception):
            rows.append(SweepRow(label, snr, seed, gamma, None, f"{type(res).__name__}: {res}"))
        else:
            rows.append(SweepRow(label, snr, seed, gamma, res))
    return rows


def table_columns(K: int) -> list[str]:
    cols = ["policy", "snr_db", "seed", "slots", "avg_power"]
    for name in ("drop_rate", "avg_queue", "delay_littles", "delay_sojourn"):
        cols += [f"{name}_{k + 1}" for k in range(K)]
    return cols + ["weighted_delay"]


def format_table(rows: Sequence[SweepRow], K: int, sep: str = "\t") -> str:
    """Delimited table with the fixed column order; failed cells are written as ``nan``."""
    buf = io.StringIO()
    buf.write(sep.join(table_columns(K)) + "\n")
    for r in rows:
        m = r.metrics
        if m is None:
            values = [r.policy, f"{r.snr_db:.4f}", str(r.seed)] + ["nan"] * (2 + 4 * K + 1)
        else:
            values = [r.policy, f"{r.snr_db:.4f}", str(r.seed), str(m.slots), repr(float(m.avg_power))]
            for arr in (m.drop_rate, m.avg_queue, m.avg_delay_littles, m.avg_delay_sojourn):
                values += [repr(float(x)) for x in arr]
            values.append(repr(float(m.weighted_delay)))
        buf.write(sep.join(values) + "\n")
    return buf.getvalue()


def parse_table(text: str, sep: str = "\t") -> list[dict]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(sep)
    out = []
    for ln in lines[1:]:
        rec = dict(zip(header, ln.split(sep)))
        for key, val in rec.items():
            if key != "policy":
                rec[key] = float(val)
        rec["seed"] = int(rec["seed"])
        out.append(rec)
    return out


@dataclass
class PairedComparison:
    policy_a: str
    policy_b: str
    snr_db: float
    deltas: np.ndarray  # a - b per seed
    wins: int  # seeds with a strictly below b
    p_value: float  # one-sided sign test for "a below b"


def paired_comparison(records: Sequence[dict], policy_a: str, policy_b: str,
                      column: str = "weighted_delay") -> list[PairedComparison]:
    """Per-SNR paired deltas across seeds plus an exact one-sided sign test."""
    out = []
    snrs = sorted({r["snr_db"] for r in records})
    for snr in snrs:
        a = {r["seed"]: r[column] for r in records if r["policy"] == policy_a and r["snr_db"] == snr}
        b = {r["seed"]: r[column] for r in records if r["policy"] == policy_b and r["snr_db"] == snr}
        seeds = sorted(set(a) & set(b))
        d = np.array([a[s] - b[s] for s in seeds])
        d = d[np.isfinite(d)]
        wins, losses = int(np.sum(d < 0)), int(np.sum(d > 0))
        n = wins + losses
        p = stats.binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
        out.append(PairedComparison(policy_a, policy_b, snr, d, wins, float(p)))
    return out


def convergence_trace(config: SystemConfig, algorithm: str = "decomposed", seed: int | None = None,
                      max_slots: int = 10_000_000, initial=None):
    """Learning trace of the joint (``joint``) or per-user (``decomposed``) learner, for plotting."""
    from .online import run_algorithm1, run_algorithm2
    runner = run_algorithm2 if algorithm == "decomposed" else run_algorithm1
    return runner(config, seed=seed, max_slots=max_slots, initial=initial)
