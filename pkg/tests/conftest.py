import math
from importlib import resources

import numpy as np
import pytest

from ofdma_delay.config import SolverSettings, SystemConfig, load_config


def packaged(name):
    return load_config(resources.files("ofdma_delay") / "configs" / name)


@pytest.fixture
def two_user():
    """Small bits-dynamics system that runs fast."""
    return SystemConfig(K=2, N_F=2, N_Q=5, tau=0.005, lam=(20.0, 20.0), mean_packet_bits=(50_000.0, 50_000.0),
                        beta=(1.0, 1.0), P_0=20.0, gamma=0.01, subband_bandwidth=1e6)


def chain_config(K=1, N_Q=1, lam_tau=0.1, rate_const=0.1, gamma=1.0, m=2, **solver):
    """Birth-death instance with unit slot and bandwidth; ``rate_const`` fixes the packet size."""
    bits = 1.0 / (rate_const * math.log(2))
    return SystemConfig(K=K, N_F=1, N_Q=N_Q, tau=1.0, lam=lam_tau, mean_packet_bits=bits, beta=1.0,
                        P_0=1.0, gamma=gamma, csi_levels=m, dynamics="birth_death",
                        csi_model="alphabet", solver=SolverSettings(**solver))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
