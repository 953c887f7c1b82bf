"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

Each training round is one adaptive query answered with Gaussian noise of
multiplier ``z`` on a cohort sampled with probability ``q``; rounds compose
additively in the RDP domain.  Integer orders use the exact binomial
expansion of the subsampled moment, evaluated in log space; fractional
orders fall back to numerical quadrature of the defining expectation.
The final guarantee is the classic conversion
``epsilon = min_alpha (T * rdp(alpha) + log(1/delta) / (alpha - 1))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import integrate
from scipy.special import gammaln, logsumexp

# Dense low orders where the subsampled moment is tightest for small q,
# plus sparse high orders that dominate in the low-noise regime.
DEFAULT_ORDERS: tuple[float, ...] = tuple(
    [1 + x / 10 for x in range(1, 10)] + list(range(2, 65)) + [128, 256, 512]
)


class AccountingError(ValueError):
    """No noise level in the search range meets the requested budget."""


class PrivacySpent(NamedTuple):
    epsilon: float
    order: float


def _log_moment_integer(q: float, z: float, alpha: int) -> float:
    """log A_alpha via the binomial expansion, stable in log space."""
    k = np.arange(alpha + 1)
    log_terms = (
        gammaln(alpha + 1)
        - gammaln(k + 1)
        - gammaln(alpha - k + 1)
        + k * math.log(q)
        + (alpha - k) * math.log1p(-q)
        + (k * k - k) / (2.0 * z * z)
    )
    return float(logsumexp(log_terms))


def _log_moment_fractional(q: float, z: float, alpha: float) -> float:
    """log A_alpha by quadrature over a standard normal integration variable.

    The integrand ``exp(-t^2/2) * ((1-q) + q * exp((2 z t - 1)/(2 z^2)))^alpha``
    can peak either near 0 or near ``t = alpha / z``; both regions are
    scanned for the maximum, which is factored out before integrating.
    """
    log_q = math.log(q)
    log_1mq = math.log1p(-q)

    def log_integrand(t):
        shift = (2.0 * z * t - 1.0) / (2.0 * z * z)
        return -0.5 * t * t - 0.5 * math.log(2.0 * math.pi) + alpha * np.logaddexp(
            log_1mq, log_q + shift
        )

    far_peak = alpha / z
    probe = np.concatenate(
        [np.linspace(-15.0, 15.0, 601), np.linspace(far_peak - 15.0, far_peak + 15.0, 601)]
    )
    log_max = float(np.max(log_integrand(probe)))
    lo, hi = -40.0, far_peak + 40.0
    interior = sorted({0.0, min(far_peak, hi)})
    value, _ = integrate.quad(
        lambda t: math.exp(log_integrand(t) - log_max), lo, hi, points=interior, limit=200
    )
    return log_max + math.log(value)


def rdp_per_step(q: float, z: float, alpha: float) -> float:
    """RDP of order ``alpha`` for one subsampled-Gaussian step."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    if z <= 0.0:
        raise ValueError(f"z must be positive, got {z}")
    if alpha <= 1.0:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return alpha / (2.0 * z * z)
    if float(alpha).is_integer():
        log_moment = _log_moment_integer(q, z, int(alpha))
    else:
        log_moment = _log_moment_fractional(q, z, alpha)
    rdp = log_moment / (alpha - 1.0)
    if not math.isfinite(rdp):
        raise AccountingError(f"RDP overflow at q={q}, z={z}, alpha={alpha}")
    return rdp


@dataclass(frozen=True)
class AccountantState:
    """Per-step RDP at a fixed order ladder plus a composed step count."""

    q: float
    z: float
    orders: tuple[float, ...]
    per_step: tuple[float, ...]
    steps: int = 0

    @classmethod
    def create(cls, q: float, z: float, orders: tuple[float, ...] = DEFAULT_ORDERS) -> AccountantState:
        if len(orders) == 0:
            raise AccountingError("order ladder must be non-empty")
        per_step = tuple(rdp_per_step(q, z, a) for a in orders)
        return cls(q=q, z=z, orders=tuple(orders), per_step=per_step)

    def compose(self, steps: int) -> AccountantState:
        """Account for ``steps`` further rounds; RDP adds order by order."""
        if steps < 0:
            raise ValueError(f"steps must be nonnegative, got {steps}")
        return AccountantState(
            q=self.q, z=self.z, orders=self.orders, per_step=self.per_step, steps=self.steps + steps
        )

    def total_rdp(self) -> tuple[float, ...]:
        return tuple(self.steps * r for r in self.per_step)


def compose_and_convert(state: AccountantState, steps: int, delta: float) -> PrivacySpent:
    """(epsilon, best order) after ``steps`` more rounds at privacy ``delta``.

    With zero total steps this reduces to ``log(1/delta) / (alpha - 1)``,
    minimized by the largest order in the ladder.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if len(state.orders) == 0:
        raise AccountingError("order ladder must be non-empty")
    total_steps = state.steps + steps
    log_inv_delta = math.log(1.0 / delta)
    best = PrivacySpent(math.inf, math.nan)
    for alpha, rdp in zip(state.orders, state.per_step):
        epsilon = total_steps * rdp + log_inv_delta / (alpha - 1.0)
        if epsilon < best.epsilon:
            best = PrivacySpent(epsilon, alpha)
    return best


def solve_noise_for_epsilon(
    q: float,
    steps: int,
    delta: float,
    target_epsilon: float,
    orders: tuple[float, ...] = DEFAULT_ORDERS,
    z_min: float = 0.01,
    z_max: float = 100.0,
    rel_tol: float = 1e-4,
) -> float:
    """Smallest noise multiplier in ``[z_min, z_max]`` meeting the target.

    Epsilon is monotone decreasing in ``z``, so bisection on the feasibility
    boundary applies.  Raises :class:`AccountingError` when even ``z_max``
    cannot reach ``target_epsilon``.
    """
    if target_epsilon <= 0.0:
        raise ValueError(f"target_epsilon must be positive, got {target_epsilon}")

    def epsilon_at(z: float) -> float:
        return compose_and_convert(AccountantState.create(q, z, orders), steps, delta).epsilon

    if epsilon_at(z_max) > target_epsilon:
        raise AccountingError(
            f"target epsilon {target_epsilon} unreachable with z <= {z_max} "
            f"(q={q}, steps={steps}, delta={delta})"
        )
    if epsilon_at(z_min) <= target_epsilon:
        return z_min
    lo, hi = z_min, z_max
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if epsilon_at(mid) <= target_epsilon:
            hi = mid
        else:
            lo = mid
    return hi
