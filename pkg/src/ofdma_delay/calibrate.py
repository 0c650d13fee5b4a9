"""Bisection on the power price so that long-run average power meets the budget."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

from .config import SystemConfig
from .oracle import InvalidRegimeError, NotConvergedError
from .sim import PolicySpec, Simulator, resolve_policy


class BracketError(RuntimeError):
    """No gamma in the search range spends as much as the budget."""


@dataclass
class Calibration:
    gamma: float
    power: float
    iterations: int
    history: list = field(default_factory=list)  # (gamma, power) per probe


def bisect_gamma(power_at: Callable[[float], float], target: float, tolerance: float = 0.02,
                 gamma0: float = 1.0, max_iter: int = 30, span: float = 1e6) -> Calibration:
    """Find gamma with ``|power_at(gamma) - target| <= tolerance * target``.

    Relies on average power being nonincreasing in gamma and searches in
    log(gamma).  The bracket is grown geometrically from ``gamma0`` within
    ``[gamma0 / span, gamma0 * span]``; probes count towards ``max_iter``.
    """
    history = []

    def probe(g):
        p = float(power_at(g))
        history.append((g, p))
        if abs(p - target) <= tolerance * target:
            raise _Found(g, p)
        return p

    try:
        lo = hi = gamma0
        p = probe(gamma0)
        if p > target:
            while p > target:
                lo = hi
                hi *= 4.0
                if hi > gamma0 * span or len(history) >= max_iter:
                    raise BracketError(f"power stays above {target} up to gamma={hi:g}")
                p = probe(hi)
        else:
            while p < target:
                hi = lo
                lo /= 4.0
                if lo < gamma0 / span or len(history) >= max_iter:
                    raise BracketError(
                        f"budget {target} unreachable: power {p:.4g} at gamma={lo * 4:g}")
                p = probe(lo)
        while len(history) < max_iter:
            mid = math.sqrt(lo * hi)
            if probe(mid) > target:
                lo = mid
            else:
                hi = mid
    except _Found as hit:
        return Calibration(hit.gamma, hit.power, len(history), history)
    g, p = min(history, key=lambda gp: abs(gp[1] - target))
    raise BracketError(f"no gamma within {tolerance:.1%} after {max_iter} probes; closest {g:g} -> {p:.4g}")


class _Found(Exception):
    def __init__(self, gamma, power):
        self.gamma, self.power = gamma, power


def measured_power(policy: PolicySpec, config: SystemConfig, seed: int, slots: int,
                   warmup: int | None = None) -> float:
    sim = Simulator(config, policy, seed=seed)
    sim.run(slots // 10 if warmup is None else warmup)
    sim.reset_metrics()
    sim.run(slots)
    return sim.metrics().avg_power


def calibrate_gamma(policy: PolicySpec, config: SystemConfig, target_P0: float | None = None,
                    tolerance: float = 0.02, seed: int = 10_000, slots: int = 200_000,
                    resolve_each: bool | None = None, learn_slots: int = 2_000_000) -> Calibration:
    """Calibrate one policy's gamma against ``target_P0`` (default ``config.P_0``).

    Oracle-sourced tables are re-solved at every trial gamma; a fixed table
    (given, or learned once) is kept and only its price changes.  Every trial
    uses the same seed, so the probes see common random numbers.
    """
    target = config.P_0 if target_P0 is None else target_P0
    if resolve_each is None:
        resolve_each = policy.source == "oracle" and policy.table is None

    def power_at(gamma):
        cfg = replace(config, gamma=gamma)
        trial = policy.with_gamma(gamma)
        try:
            if resolve_each:
                trial = resolve_policy(trial, cfg)
            return measured_power(trial, cfg, seed, slots)
        except (InvalidRegimeError, NotConvergedError):
            # power so cheap that the per-user solve leaves the birth-death regime
            if not resolve_each:
                raise
            return math.inf

    return bisect_gamma(power_at, target, tolerance,
                        gamma0=policy.gamma if policy.gamma is not None else config.gamma)


def calibrate_policy(policy: PolicySpec, config: SystemConfig, seed: int = 10_000,
                     slots: int = 200_000, learn_slots: int = 2_000_000,
                     tolerance: float = 0.02) -> PolicySpec:
    """Return ``policy`` with a table (if it needs one) and a calibrated gamma.

    Learned tables are trained at the gamma that calibrates the oracle
    version of the same policy, then frozen while the price is re-tuned.
    """
    if policy.kind in ("optimal", "decomposed") and policy.table is None:
        if policy.source == "oracle":
            cal = calibrate_gamma(policy, config, seed=seed, slots=slots, tolerance=tolerance)
            cfg = replace(config, gamma=cal.gamma)
            return resolve_policy(policy.with_gamma(cal.gamma), cfg)
        if policy.source == "learn":
            first = calibrate_gamma(replace(policy, source="oracle"), config, seed=seed,
                                    slots=slots, tolerance=tolerance)
            cfg = replace(config, gamma=first.gamma)
            policy = resolve_policy(policy.with_gamma(first.gamma), cfg, seed=seed,
                                    learn_slots=learn_slots)
    cal = calibrate_gamma(policy, config, seed=seed, slots=slots, tolerance=tolerance)
    return policy.with_gamma(cal.gamma)
