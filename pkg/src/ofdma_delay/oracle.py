"""Exact offline solutions of the queue-state Bellman equation.

Fading is quantised to a finite alphabet so that conditional expectations
over the CSI are finite sums.  Both allocation rules act on each subband
independently and subbands are i.i.d., so every expectation reduces to a
sum over the ``m ** K`` gain columns of a single subband times ``N_F``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .config import SystemConfig
from .model import Action
from .policy import all_states, csi_only_action, joint_increments, optimal_action, state_index

RULES = ("optimal", "csi_only")
ENUMERATION_LIMIT = 10**6


class InvalidRegimeError(ValueError):
    """Birth and death probabilities of some state sum to more than one."""


class EnumerationTooLarge(ValueError):
    """Exact enumeration over the CSI alphabet exceeds the configured limit."""


class NotConvergedError(RuntimeError):
    def __init__(self, message, residual=None, trace=None):
        super().__init__(message)
        self.residual = residual
        self.trace = trace


@dataclass(frozen=True)
class CsiAlphabet:
    levels: np.ndarray
    probs: np.ndarray
    edges: np.ndarray  # m + 1 bin boundaries, last one inf

    @property
    def size(self) -> int:
        return len(self.levels)

    def quantize(self, gain):
        """Map exponential draws onto the level of the bin they fall in."""
        idx = np.searchsorted(self.edges, gain, side="right") - 1
        return self.levels[np.clip(idx, 0, self.size - 1)]

    def columns(self, K: int) -> tuple[np.ndarray, np.ndarray]:
        """All ``m ** K`` gain columns of one subband and their probabilities."""
        idx = np.array(list(itertools.product(range(self.size), repeat=K)), dtype=int).reshape(-1, K)
        return self.levels[idx], np.prod(self.probs[idx], axis=1)

    def win_weights(self, K: int, ties: str = "lowest") -> np.ndarray:
        """``(K, m)``: P(user k is served on a subband and its gain is level j).

        ``ties="lowest"`` hands a tie to the lowest index, as the quantized
        simulator does.  ``"split"`` shares it evenly, which is what iid
        continuous gains look like once binned.
        """
        below = np.concatenate([[0.0], np.cumsum(self.probs)[:-1]])
        upto = np.cumsum(self.probs)
        if ties == "split":
            return np.tile((upto**K - below**K) / K, (K, 1))
        if ties != "lowest":
            raise ValueError(f"unknown tie rule {ties!r}")
        k = np.arange(K)[:, None]
        return self.probs * below**k * upto ** (K - 1 - k)


def build_csi_alphabet(m_levels: int) -> CsiAlphabet:
    """Equal-probability bins of Exp(1), each represented by its conditional mean."""
    if m_levels < 1:
        raise ValueError("need at least one level")
    j = np.arange(m_levels + 1)
    with np.errstate(divide="ignore"):
        edges = -np.log1p(-j / m_levels)
    a, b = edges[:-1], edges[1:]
    # integral of x e^{-x} over [a, b] is (a+1)e^{-a} - (b+1)e^{-b}; the last bin is open
    b_term = np.zeros(m_levels)
    finite = np.isfinite(b)
    b_term[finite] = (b[finite] + 1) * np.exp(-b[finite])
    levels = ((a + 1) * np.exp(-a) - b_term) / (np.exp(-a) - np.exp(-b))
    probs = np.full(m_levels, 1.0 / m_levels)
    return CsiAlphabet(levels, probs, edges)


# --------------------------------------------------------------------------
# conditional expectations


@dataclass
class ConditionalStats:
    g_bar: float
    mu_bar: np.ndarray  # packets / s
    g_se: float = 0.0
    mu_se: np.ndarray | None = None
    samples: int = 0


def conditional_stats(queue, action_rule, alphabet: CsiAlphabet, config: SystemConfig,
                      method: str = "enumerate", n_samples: int = 100_000, rng=None):
    """``E[g | Q]`` and ``E[R_k / N_bar_k | Q]`` for an arbitrary allocation rule.

    ``action_rule(gain, q)`` receives a batch of gain matrices ``(M, K, N_F)``
    and must return a batched :class:`Action`.  Exact enumeration runs over all
    ``m ** (K * N_F)`` CSI realisations; ``method="monte_carlo"`` samples
    ``n_samples`` of them instead and reports standard errors.
    """
    K, N_F = config.K, config.N_F
    q = np.asarray(queue)
    m = alphabet.size
    if method == "enumerate":
        total = m ** (K * N_F)
        if total > ENUMERATION_LIMIT:
            raise EnumerationTooLarge(
                f"{total} CSI realisations exceed {ENUMERATION_LIMIT}; use method='monte_carlo'")
        idx = np.array(list(itertools.product(range(m), repeat=K * N_F)), dtype=int)
        gains = alphabet.levels[idx].reshape(-1, K, N_F)
        weights = np.prod(alphabet.probs[idx], axis=1)
    elif method == "monte_carlo":
        rng = np.random.default_rng(rng)
        idx = rng.choice(m, size=(n_samples, K, N_F), p=alphabet.probs)
        gains = alphabet.levels[idx]
        weights = np.full(n_samples, 1.0 / n_samples)
    else:
        raise ValueError(f"unknown method {method!r}")

    action: Action = action_rule(gains, q)
    rate_bits = config.subband_bandwidth * np.sum(action.s * np.log2(1.0 + action.p * gains), axis=-1)
    mu = rate_bits / np.asarray(config.mean_packet_bits)
    g = np.dot(config.queue_weight, q) + config.gamma * action.total_power
    g_bar = float(np.dot(weights, g))
    mu_bar = weights @ mu
    if method == "enumerate":
        return ConditionalStats(g_bar, mu_bar, samples=len(weights))
    n = len(weights)
    return ConditionalStats(g_bar, mu_bar, g_se=float(np.std(g, ddof=1) / math.sqrt(n)),
                            mu_se=np.std(mu, axis=0, ddof=1) / math.sqrt(n), samples=n)


def subband_expectations(delta_scaled: np.ndarray, alphabet: CsiAlphabet, gamma: float,
                         rule: str = "optimal"):
    """Expected power and per-user ``ln(1 + p g)`` service on one subband.

    ``delta_scaled`` is ``(I, K)``.  Returns ``(power (I,), service (I, K), objective (I,))``
    where objective is the expected minimised per-subband cost.
    """
    delta_scaled = np.atleast_2d(delta_scaled)
    K = delta_scaled.shape[1]
    gains, w = alphabet.columns(K)
    gain = gains[None, :, :, None]  # (1, C, K, 1)
    delta = delta_scaled[:, None, :]  # (I, 1, K)
    act = (optimal_action if rule == "optimal" else csi_only_action)(gain, delta, gamma)
    service = (act.s * np.log1p(act.p * gain))[..., 0]  # (I, C, K)
    power = act.p[..., 0].sum(axis=-1)  # (I, C)
    objective = gamma * power - np.sum(delta * service, axis=-1)
    return power @ w, np.einsum("ick,c->ik", service, w), objective @ w


# --------------------------------------------------------------------------
# reduced kernel


@dataclass
class ReducedKernel:
    """Birth-death transition law over joint queue states."""

    K: int
    N_Q: int
    birth: np.ndarray  # (I, K); zero where the buffer is full
    death: np.ndarray  # (I, K); zero where the queue is empty
    stay: np.ndarray  # (I,)

    def __post_init__(self):
        states = all_states(self.K, self.N_Q)
        self._up = np.empty_like(self.birth, dtype=int)
        self._down = np.empty_like(self.death, dtype=int)
        for k in range(self.K):
            up, down = states.copy(), states.copy()
            up[:, k] = np.minimum(up[:, k] + 1, self.N_Q)
            down[:, k] = np.maximum(down[:, k] - 1, 0)
            self._up[:, k] = state_index(up, self.N_Q)
            self._down[:, k] = state_index(down, self.N_Q)

    def expect(self, values: np.ndarray) -> np.ndarray:
        """``P @ values`` without forming P."""
        out = self.stay * values
        out += np.sum(self.birth * values[self._up], axis=1)
        out += np.sum(self.death * values[self._down], axis=1)
        return out

    def to_dense(self) -> np.ndarray:
        n = len(self.stay)
        P = np.diag(self.stay.astype(float))
        rows = np.arange(n)
        for k in range(self.K):
            np.add.at(P, (rows, self._up[:, k]), self.birth[:, k])
            np.add.at(P, (rows, self._down[:, k]), self.death[:, k])
        return P


def build_kernel(mu_tau: np.ndarray, config: SystemConfig, slack: float = 1e-12) -> ReducedKernel:
    """Kernel from per-state death probabilities ``mu_bar_k(Q) tau`` (shape ``(I, K)``).

    Blocked arrivals at a full buffer stay put; departures from an empty queue
    carry no mass.
    """
    states = all_states(config.K, config.N_Q)
    mu_tau = np.asarray(mu_tau, dtype=float).reshape(len(states), config.K)
    lam_tau = np.asarray(config.lam) * config.tau
    # blocked births still count: their mass is folded into the self-loop
    load = np.sum(lam_tau) + np.sum(np.where(states > 0, mu_tau, 0.0), axis=1)
    bad = np.flatnonzero(load > 1.0 + slack)
    if bad.size:
        raise InvalidRegimeError(
            f"sum_k (lambda_k + mu_k) tau = {load[bad[0]]:.4f} > 1 at state "
            f"{tuple(states[bad[0]])}; shorten tau or reduce power")
    birth = np.where(states < config.N_Q, lam_tau, 0.0)
    death = np.where(states > 0, mu_tau, 0.0)
    stay = 1.0 - birth.sum(axis=1) - death.sum(axis=1)
    return ReducedKernel(config.K, config.N_Q, birth, death, np.maximum(stay, 0.0))


# --------------------------------------------------------------------------
# policies for the oracle


@dataclass
class FixedPolicy:
    """Stationary policy summarised by its conditional reward and death probabilities."""

    g_bar: np.ndarray  # (I,)
    mu_tau: np.ndarray  # (I, K)


def greedy_stats(table: np.ndarray, alphabet: CsiAlphabet, config: SystemConfig,
                 rule: str = "optimal"):
    """``(g_bar, mu_tau, objective)`` of the greedy policy for a joint potential table."""
    states = all_states(config.K, config.N_Q)
    rc = np.asarray(config.rate_const)
    delta = rc * joint_increments(table, config.K, config.N_Q)
    power, service, objective = subband_expectations(delta, alphabet, config.gamma, rule)
    g_bar = states @ np.asarray(config.queue_weight) + config.gamma * config.N_F * power
    mu_tau = config.N_F * rc * service
    return g_bar, mu_tau, config.N_F * objective


def policy_kernel(policy, alphabet: CsiAlphabet | None, config: SystemConfig,
                  rule: str = "optimal") -> ReducedKernel:
    """Kernel of a FixedPolicy, or of the greedy policy for a joint potential table."""
    if isinstance(policy, FixedPolicy):
        return build_kernel(policy.mu_tau, config)
    _, mu_tau, _ = greedy_stats(np.asarray(policy, dtype=float), alphabet, config, rule)
    return build_kernel(mu_tau, config)


# --------------------------------------------------------------------------
# relative value iteration


@dataclass
class SolveResult:
    theta: float
    v_tilde: np.ndarray
    iterations: int
    residual: float
    spans: list = field(default_factory=list, repr=False)


def _bellman(v, config, alphabet, policy, rule, kernel):
    if policy is not None:
        return policy.g_bar + kernel.expect(v)
    g_bar, mu_tau, _ = greedy_stats(v, alphabet, config, rule)
    return g_bar + build_kernel(mu_tau, config).expect(v)


def relative_value_iteration(config: SystemConfig, alphabet: CsiAlphabet | None = None, *,
                             policy: FixedPolicy | None = None, rule: str = "optimal",
                             max_iters: int = 100_000, epsilon: float = 1e-8,
                             max_states: int = 4096, v0=None) -> SolveResult:
    """Solve ``theta + V = T(V)`` on the joint queue space, pinning ``V(empty) = 0``.

    With ``policy`` the operator is the fixed policy's; otherwise the minimisation
    inside ``T`` is the closed-form allocation of ``rule`` per CSI column.
    Stops when the span of ``T(V) - V`` drops below ``epsilon``.
    """
    n = config.n_states
    if n > max_states:
        raise ValueError(f"{n} joint states exceed the cap of {max_states}")
    if policy is None and alphabet is None:
        raise ValueError("an alphabet is required unless a fixed policy is given")
    if rule not in RULES:
        raise ValueError(f"rule must be one of {RULES}")
    kernel = build_kernel(policy.mu_tau, config) if policy is not None else None
    v = np.zeros(n) if v0 is None else np.asarray(v0, dtype=float) - v0[0]
    spans = []
    for it in range(1, max_iters + 1):
        tv = _bellman(v, config, alphabet, policy, rule, kernel)
        diff = tv - v
        span = float(diff.max() - diff.min())
        spans.append(span)
        theta = float(tv[0] - v[0])
        v = tv - tv[0]
        if span < epsilon:
            return SolveResult(theta, v, it, span, spans)
    raise NotConvergedError(f"relative value iteration did not converge in {max_iters} "
                            f"iterations (span {span:.3e})", residual=span, trace=spans)


# --------------------------------------------------------------------------
# per-user decomposition


def solve_birth_death_poisson(lam_tau: float, mu_tau: np.ndarray, g: np.ndarray):
    """Solve ``theta + V(q) = g(q) + sum_j P(q, j) V(j)`` with ``V(0) = 0``.

    The chain moves up with probability ``lam_tau`` (blocked at the top) and
    down with ``mu_tau[q]``.  Direct LU solve of the (N + 2)-unknown system;
    a forward recurrence on the increments is exact in theory but divides by
    ``lam_tau`` once per state, which wrecks precision for light traffic.
    """
    mu_tau = np.asarray(mu_tau, dtype=float)
    g = np.asarray(g, dtype=float)
    N = len(g) - 1
    if lam_tau <= 0:
        raise ValueError("lam_tau must be positive")
    # unknowns: V(1..N), theta
    A = np.zeros((N + 1, N + 1))
    for q in range(N + 1):
        up = lam_tau if q < N else 0.0
        down = mu_tau[q] if q > 0 else 0.0
        row = np.zeros(N + 2)  # coefficients on V(0..N) then theta
        row[q] += up + down
        if q < N:
            row[q + 1] -= up
        if q > 0:
            row[q - 1] -= down
        row[N + 1] = 1.0
        A[q] = row[1:]
    v_rest_theta = linalg.solve(A, g)
    v = np.concatenate([[0.0], v_rest_theta[:N]])
    return float(v_rest_theta[N]), v


def birth_death_stationary(lam_tau: float, mu_tau: np.ndarray) -> np.ndarray:
    """Stationary law of the per-user chain (detailed balance)."""
    mu_tau = np.asarray(mu_tau, dtype=float)
    pi = np.ones(len(mu_tau))
    for q in range(1, len(mu_tau)):
        pi[q] = pi[q - 1] * lam_tau / mu_tau[q] if mu_tau[q] > 0 else 0.0
    return pi / pi.sum()


@dataclass
class UserSolution:
    theta: float
    v: np.ndarray
    mu_tau: np.ndarray
    g_bar: np.ndarray
    iterations: int


def user_stats(v: np.ndarray, k: int, alphabet: CsiAlphabet, config: SystemConfig,
               ties: str = "lowest"):
    """Conditional reward and death probability of user k under best-channel assignment."""
    win = alphabet.win_weights(config.K, ties)[k]
    rc = config.rate_const[k]
    dv = np.concatenate([[0.0], np.diff(v)])
    level = np.maximum(rc * dv, 0.0)[:, None] / config.gamma
    p = np.maximum(level - 1.0 / alphabet.levels[None, :], 0.0)
    power = config.N_F * (p @ win)
    mu_tau = config.N_F * rc * (np.log1p(p * alphabet.levels) @ win)
    q = np.arange(config.N_Q + 1)
    return config.queue_weight[k] * q + config.gamma * power, mu_tau


def per_user_poisson_solve(k: int, alphabet: CsiAlphabet, config: SystemConfig,
                           max_iters: int = 200, tol: float = 1e-11,
                           ties: str = "lowest") -> UserSolution:
    """Policy iteration on user k's birth-death MDP under best-channel assignment.

    Alternates the water-filling power update with an exact Poisson solve until
    the potentials stop moving.
    """
    lam_tau = config.lam[k] * config.tau
    n = config.N_Q + 1
    if lam_tau == 0:
        return UserSolution(0.0, np.zeros(n), np.zeros(n), np.zeros(n), 0)
    v = np.zeros(n)
    history = []
    for it in range(1, max_iters + 1):
        g_bar, mu_tau = user_stats(v, k, alphabet, config, ties)
        load = lam_tau + mu_tau
        if np.any(load[1:] > 1.0 + 1e-12):
            raise InvalidRegimeError(f"user {k}: (lambda + mu) tau = {load.max():.4f} > 1")
        theta, v_new = solve_birth_death_poisson(lam_tau, mu_tau, g_bar)
        change = float(np.max(np.abs(v_new - v)))
        history.append(change)
        v = v_new
        if change <= tol * max(1.0, float(np.max(np.abs(v)))):
            g_bar, mu_tau = user_stats(v, k, alphabet, config, ties)
            return UserSolution(theta, v, mu_tau, g_bar, it)
    raise NotConvergedError(f"policy iteration for user {k} did not settle in {max_iters} rounds",
                            residual=history[-1], trace=history)


@dataclass
class AdditivityReport:
    max_potential_gap: float
    theta_gap: float
    joint: SolveResult
    users: list


def verify_additivity(config: SystemConfig, alphabet: CsiAlphabet, rule: str = "csi_only",
                      epsilon: float = 1e-10) -> AdditivityReport:
    """Compare the joint solution with the sum of per-user solutions."""
    joint = relative_value_iteration(config, alphabet, rule=rule, epsilon=epsilon)
    users = [per_user_poisson_solve(k, alphabet, config) for k in range(config.K)]
    states = all_states(config.K, config.N_Q)
    summed = sum(users[k].v[states[:, k]] for k in range(config.K))
    gap = float(np.max(np.abs(joint.v_tilde - summed)))
    theta_gap = abs(joint.theta - sum(u.theta for u in users))
    return AdditivityReport(gap, theta_gap, joint, users)
