"""Delay-aware power and subcarrier allocation for a K-user OFDMA downlink."""
from .config import ConfigError, SolverSettings, SystemConfig, load_config, parse_config
from .oracle import build_csi_alphabet, per_user_poisson_solve, relative_value_iteration
from .online import StepsizeSchedule, run_algorithm1, run_algorithm2
from .sim import ExperimentSpec, Metrics, PolicySpec, Simulator, run_replication, sweep

__all__ = [
    "ConfigError", "SolverSettings", "SystemConfig", "load_config", "parse_config",
    "build_csi_alphabet", "per_user_poisson_solve", "relative_value_iteration",
    "StepsizeSchedule", "run_algorithm1", "run_algorithm2",
    "ExperimentSpec", "Metrics", "PolicySpec", "Simulator", "run_replication", "sweep",
]
