import math

import pytest

from ofdma_delay.calibrate import BracketError, bisect_gamma, calibrate_gamma, calibrate_policy, measured_power
from ofdma_delay.sim import PolicySpec

from conftest import packaged


def test_bisection_on_known_curve():
    cal = bisect_gamma(lambda g: 10.0 / g, target=4.0, tolerance=0.02, gamma0=1.0)
    assert abs(cal.power - 4.0) <= 0.08 and cal.iterations <= 30
    assert cal.history[0] == (1.0, 10.0)


def test_unreachable_budget():
    with pytest.raises(BracketError, match="unreachable"):
        bisect_gamma(lambda g: min(3.0, 1.0 / g), target=5.0)


def test_power_vanishes_with_price():
    cfg = packaged("fig3.cfg")
    assert measured_power(PolicySpec("round_robin", gamma=1e12), cfg, seed=1, slots=20_000) == 0.0


def test_power_monotone_in_gamma(two_user):
    for kind in ("mlwdf", "round_robin"):
        lo = measured_power(PolicySpec(kind, gamma=0.5), two_user, seed=3, slots=50_000)
        hi = measured_power(PolicySpec(kind, gamma=1.0), two_user, seed=3, slots=50_000)
        assert lo >= hi


def test_matched_power_on_fig3():
    cfg = packaged("fig3.cfg")
    for policy in (PolicySpec("mlwdf"), PolicySpec("round_robin"), PolicySpec("decomposed", source="oracle")):
        cal = calibrate_policy(policy, cfg, slots=100_000)
        got = measured_power(cal, cfg, seed=10_000, slots=100_000)
        assert abs(got - cfg.P_0) <= 0.02 * cfg.P_0
        assert math.isfinite(cal.gamma)


def test_fixed_table_keeps_table(two_user):
    import numpy as np
    table = np.tile(np.arange(two_user.N_Q + 1) * 20.0, (2, 1))
    cal = calibrate_gamma(PolicySpec("decomposed", table=table), two_user, slots=50_000)
    assert abs(cal.power - two_user.P_0) <= 0.02 * two_user.P_0
