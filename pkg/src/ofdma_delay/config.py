"""System configuration and the flat ``.cfg`` file format.

A config file has three sections::

    [system]   K, N_F, N_Q, tau, subband_bandwidth, P_0, rng_seed, dynamics, csi_model
    [traffic]  lambda, mean_packet_bits, beta
    [solver]   gamma, csi_levels, step_a, step_b, step_exponent, delta_v,
               max_periods, max_period_slots, patience, estimator

Per-user keys accept either one value (broadcast to all K users) or a
comma-separated list of length K.  Unknown sections or keys are an error.
"""
from __future__ import annotations

import configparser
import math
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

# Assumption-4 regime: arrivals per slot must stay small.
LIGHT_TRAFFIC_LIMIT = 0.2

DYNAMICS = ("bits", "birth_death")
CSI_MODELS = ("rayleigh", "alphabet")
ESTIMATORS = ("first_visit", "every_visit")


class ConfigError(ValueError):
    """Invalid or unparseable configuration."""


@dataclass(frozen=True)
class SolverSettings:
    """Online-learner knobs.  Stepsize is ``a / (b + k) ** exponent``."""

    step_a: float = 1.0
    step_b: float = 1.0
    step_exponent: float = 0.85
    delta_v: float = 1e-3
    max_periods: int = 100_000
    max_period_slots: int = 1_000_000
    patience: int = 1
    estimator: str = "first_visit"

    def __post_init__(self):
        if self.step_a <= 0 or self.step_b < 1:
            raise ConfigError("stepsize needs a > 0 and b >= 1")
        if not 0.5 < self.step_exponent <= 1.0:
            raise ConfigError("step_exponent must lie in (0.5, 1]")
        if self.delta_v <= 0:
            raise ConfigError("delta_v must be positive")
        if self.max_periods < 1 or self.max_period_slots < 1 or self.patience < 1:
            raise ConfigError("max_periods, max_period_slots and patience must be >= 1")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")


@dataclass(frozen=True)
class SystemConfig:
    """Parameters of the K-user OFDMA downlink.

    Rates are in bits/s, ``lam`` in packets/s, ``tau`` in seconds.  Noise
    power is normalised to 1 so ``P_0`` doubles as a total SNR budget.
    ``lam[k] == 0`` is accepted and marks an idle user whose delay term is 0.
    """

    K: int
    N_F: int
    N_Q: int
    tau: float
    lam: tuple[float, ...]
    mean_packet_bits: tuple[float, ...]
    beta: tuple[float, ...]
    P_0: float
    gamma: float
    subband_bandwidth: float = 1.0
    rng_seed: int = 0
    csi_levels: int = 4
    dynamics: str = "bits"
    csi_model: str = "rayleigh"
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        for name in ("lam", "mean_packet_bits", "beta"):
            value = getattr(self, name)
            if isinstance(value, (int, float)):
                value = (float(value),) * self.K
            value = tuple(float(v) for v in value)
            if len(value) != self.K:
                raise ConfigError(f"{name} needs {self.K} entries, got {len(value)}")
            object.__setattr__(self, name, value)
        if self.K < 1 or self.N_F < 1 or self.N_Q < 1:
            raise ConfigError("K, N_F and N_Q must be >= 1")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if any(v < 0 or not math.isfinite(v) for v in self.lam):
            raise ConfigError("lambda must be finite and >= 0")
        if any(not v > 0 for v in self.mean_packet_bits):
            raise ConfigError("mean_packet_bits must be positive")
        if any(not v > 0 for v in self.beta):
            raise ConfigError("beta must be positive")
        if not (self.P_0 > 0 and self.gamma > 0 and self.subband_bandwidth > 0):
            raise ConfigError("P_0, gamma and subband_bandwidth must be positive")
        if self.csi_levels < 1:
            raise ConfigError("csi_levels must be >= 1")
        if self.dynamics not in DYNAMICS:
            raise ConfigError(f"dynamics must be one of {DYNAMICS}")
        if self.csi_model not in CSI_MODELS:
            raise ConfigError(f"csi_model must be one of {CSI_MODELS}")
        heavy = [k for k, lam in enumerate(self.lam) if lam * self.tau > LIGHT_TRAFFIC_LIMIT]
        if heavy:
            warnings.warn(
                f"lambda*tau > {LIGHT_TRAFFIC_LIMIT} for users {heavy}; "
                "the birth-death approximation is loose in this regime",
                stacklevel=3,
            )

    @property
    def n_states(self) -> int:
        """Size of the joint queue state space, (N_Q + 1) ** K."""
        return (self.N_Q + 1) ** self.K

    @property
    def rate_const(self) -> tuple[float, ...]:
        """Per-user ``W_s * tau / (N_bar_k * ln 2)``.

        Multiplying a natural-log capacity sum by this gives the expected number
        of packets served per slot, i.e. ``mu_k * tau``.
        """
        return tuple(
            self.subband_bandwidth * self.tau / (n * math.log(2)) for n in self.mean_packet_bits
        )

    @property
    def queue_weight(self) -> tuple[float, ...]:
        """Per-packet delay cost ``beta_k / lambda_k`` (0 for idle users)."""
        return tuple(b / lam if lam > 0 else 0.0 for b, lam in zip(self.beta, self.lam))

    @property
    def snr_db(self) -> float:
        """Per-subband SNR of the budget, ``P_0 / N_F`` with unit noise."""
        return 10 * math.log10(self.P_0 / self.N_F)

    def with_snr_db(self, snr_db: float) -> "SystemConfig":
        return replace(self, P_0=self.N_F * 10 ** (snr_db / 10))


_SECTIONS = {
    "system": {
        "K": int, "N_F": int, "N_Q": int, "tau": float, "subband_bandwidth": float,
        "P_0": float, "rng_seed": int, "dynamics": str, "csi_model": str,
    },
    "traffic": {"lambda": "vector", "mean_packet_bits": "vector", "beta": "vector"},
    "solver": {
        "gamma": float, "csi_levels": int, "step_a": float, "step_b": float,
        "step_exponent": float, "delta_v": float, "max_periods": int,
        "max_period_slots": int, "patience": int, "estimator": str,
    },
}
_REQUIRED = ("K", "N_F", "N_Q", "tau", "P_0", "lambda", "mean_packet_bits", "beta", "gamma")
_SOLVER_FIELDS = {f.name for f in fields(SolverSettings)}


def _parse_number(text: str, kind, key: str):
    try:
        return int(text) if kind is int else float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc


def parse_config(text: str, source: str = "<string>") -> SystemConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (K vs k)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    values: dict = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        schema = _SECTIONS[section]
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            kind = schema[key]
            raw = raw.strip()
            if kind == "vector":
                values[key] = tuple(_parse_number(v.strip(), float, key) for v in raw.split(","))
            elif kind is str:
                values[key] = raw
            else:
                values[key] = _parse_number(raw, kind, key)
    missing = [k for k in _REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"{source}: missing keys {missing}")

    solver = SolverSettings(**{k: values.pop(k) for k in list(values) if k in _SOLVER_FIELDS})
    K = values["K"]
    for key in ("lambda", "mean_packet_bits", "beta"):
        if len(values[key]) == 1:
            values[key] = values[key] * K
    values["lam"] = values.pop("lambda")
    return SystemConfig(solver=solver, **values)


def load_config(path) -> SystemConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, source=str(path))


def dump_config(config: SystemConfig) -> str:
    """Render a config back into the ``.cfg`` format (round-trips through parse_config)."""
    vec = lambda xs: ", ".join(repr(x) for x in xs)  # noqa: E731
    s = config.solver
    return "\n".join([
        "[system]",
        f"K = {config.K}", f"N_F = {config.N_F}", f"N_Q = {config.N_Q}",
        f"tau = {config.tau!r}", f"subband_bandwidth = {config.subband_bandwidth!r}",
        f"P_0 = {config.P_0!r}", f"rng_seed = {config.rng_seed}",
        f"dynamics = {config.dynamics}", f"csi_model = {config.csi_model}",
        "", "[traffic]",
        f"lambda = {vec(config.lam)}", f"mean_packet_bits = {vec(config.mean_packet_bits)}",
        f"beta = {vec(config.beta)}",
        "", "[solver]",
        f"gamma = {config.gamma!r}", f"csi_levels = {config.csi_levels}",
        f"step_a = {s.step_a!r}", f"step_b = {s.step_b!r}", f"step_exponent = {s.step_exponent!r}",
        f"delta_v = {s.delta_v!r}", f"max_periods = {s.max_periods}",
        f"max_period_slots = {s.max_period_slots}", f"patience = {s.patience}",
        f"estimator = {s.estimator}", "",
    ])
