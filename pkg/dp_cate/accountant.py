"""Gaussian-DP accounting for the additive booster.

An ``(epsilon, delta)`` budget is converted to the Gaussian-DP parameter
``mu`` through the dual relation

    delta(eps; mu) = Phi(-eps/mu + mu/2) - e^eps Phi(-eps/mu - mu/2)

and then spread evenly over the ``K`` noisy releases a fit makes: each
release runs at ``mu / sqrt(K)`` so that the K-fold composition is exactly
``mu``-GDP.
"""

from __future__ import annotations

import logging
import math

from dataclasses import dataclass

import numpy as np

from scipy import optimize, special

from dp_cate.exceptions import InvalidBudgetError, UnsatisfiableBudgetError
from dp_cate.tradeoff import (
    DEFAULT_GAUSSIAN_GRID,
    EpsDelta,
    TradeoffCurve,
    make_eps_delta,
    make_gaussian,
)

logger = logging.getLogger(__name__)

MU_BRACKET_LOW = 1e-6
MU_BRACKET_HIGH = 100.0
MAX_BISECTION_STEPS = 200
# Relative accuracy required of delta(eps; mu) after calibration.
DELTA_ACCURACY = 1e-6
EPSILON_BRACKET_HIGH = 500.0

# Share of mu**2 spent on one noisy bin-count release per feature; the rest
# goes to the residual-sum releases.
COUNT_SHARE = 0.1
SUM_SHARE = 1.0 - COUNT_SHARE


def delta_of(epsilon: float, mu: float) -> float:
    """``delta`` achieved at ``epsilon`` by a ``mu``-GDP mechanism."""
    if mu <= 0:
        return 0.0
    shift = -epsilon / mu
    head = float(special.ndtr(shift + mu / 2))
    # e^eps * Phi(.) evaluated in log space to avoid overflow for large eps.
    tail = math.exp(epsilon + float(special.log_ndtr(shift - mu / 2)))
    return max(head - tail, 0.0)


def mu_from_eps_delta(budget: EpsDelta, *, upper: float = MU_BRACKET_HIGH) -> float:
    """Gaussian-DP ``mu`` whose dual curve passes through ``budget``.

    The returned ``mu`` satisfies
    ``delta * (1 - 1e-6) <= delta_of(epsilon, mu) <= delta``.

    Raises:
        InvalidBudgetError: If delta is not strictly between 0 and 1.
        UnsatisfiableBudgetError: If the bracket ``[1e-6, upper]`` holds no
            solution, e.g. because delta is tiny for the given epsilon.
    """
    epsilon, delta = budget.epsilon, budget.delta
    if not 0.0 < delta < 1.0:
        raise InvalidBudgetError(f"delta must lie strictly in (0, 1), got {delta}")

    def excess(mu: float) -> float:
        return delta_of(epsilon, mu) - delta

    if excess(MU_BRACKET_LOW) > 0 or excess(upper) < 0:
        raise UnsatisfiableBudgetError(
            f"no mu in [{MU_BRACKET_LOW}, {upper}] matches "
            f"(epsilon={epsilon}, delta={delta})"
        )
    mu = float(
        optimize.bisect(
            excess,
            MU_BRACKET_LOW,
            upper,
            xtol=1e-15,
            rtol=4 * np.finfo(np.float64).eps,
            maxiter=MAX_BISECTION_STEPS,
        )
    )
    # bisect returns a midpoint; step down until the guarantee holds.
    for _ in range(MAX_BISECTION_STEPS):
        if excess(mu) <= 0:
            break
        mu = float(np.nextafter(mu, 0.0))
    achieved = delta_of(epsilon, mu)
    if not delta * (1.0 - DELTA_ACCURACY) <= achieved <= delta:
        raise UnsatisfiableBudgetError(
            f"could not calibrate mu for (epsilon={epsilon}, delta={delta}): "
            f"delta(mu={mu}) = {achieved}"
        )
    return mu


def eps_from_mu(mu: float, delta: float) -> float:
    """Smallest epsilon with ``delta_of(epsilon, mu) <= delta``."""
    if not math.isfinite(mu) or mu <= 0:
        raise InvalidBudgetError(f"mu must be positive and finite, got {mu}")
    if not 0.0 < delta < 1.0:
        raise InvalidBudgetError(f"delta must lie strictly in (0, 1), got {delta}")

    def excess(epsilon: float) -> float:
        return delta_of(epsilon, mu) - delta

    if excess(0.0) <= 0:
        return 0.0
    if excess(EPSILON_BRACKET_HIGH) > 0:
        raise UnsatisfiableBudgetError(
            f"mu={mu} needs epsilon above {EPSILON_BRACKET_HIGH} at delta={delta}"
        )
    return float(
        optimize.root_scalar(
            excess, bracket=[0.0, EPSILON_BRACKET_HIGH], method="brentq"
        ).root
    )


@dataclass(frozen=True)
class PrivacyBudget:
    """An ``(epsilon, delta)`` budget with its equivalent Gaussian-DP ``mu``."""

    eps_delta: EpsDelta
    mu: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.mu) or self.mu <= 0:
            raise InvalidBudgetError(f"degenerate budget: mu={self.mu}")

    @classmethod
    def from_eps_delta(
        cls, epsilon: float, delta: float, *, mu_upper: float = MU_BRACKET_HIGH
    ) -> PrivacyBudget:
        eps_delta = EpsDelta(epsilon, delta)
        mu = mu_from_eps_delta(eps_delta, upper=mu_upper)
        logger.debug(f"Calibrated (epsilon={epsilon}, delta={delta}) to mu={mu:.6g}")
        return cls(eps_delta=eps_delta, mu=mu)

    @classmethod
    def from_mu(cls, mu: float, delta: float) -> PrivacyBudget:
        return cls(eps_delta=EpsDelta(eps_from_mu(mu, delta), delta), mu=mu)

    @property
    def epsilon(self) -> float:
        return self.eps_delta.epsilon

    @property
    def delta(self) -> float:
        return self.eps_delta.delta

    def curve(self) -> TradeoffCurve:
        """The ``(epsilon, delta)`` trade-off curve this budget certifies."""
        return make_eps_delta(self.eps_delta)

    def gaussian_curve(self, grid_size: int = DEFAULT_GAUSSIAN_GRID) -> TradeoffCurve:
        return make_gaussian(self.mu, grid_size)


@dataclass(frozen=True)
class ReleasePlan:
    """Noise calibration for ``num_releases`` Gaussian releases.

    ``mu`` is the Gaussian-DP level the whole plan spends; every release
    runs at ``mu / sqrt(num_releases)``.
    """

    num_releases: int
    l2_sensitivity: float
    sigma: float
    mu: float

    @property
    def per_release_mu(self) -> float:
        return self.mu / math.sqrt(self.num_releases)


def plan_releases(
    budget: PrivacyBudget | float,
    num_releases: int,
    clip: float,
    *,
    fraction: float = 1.0,
) -> ReleasePlan:
    """Calibrate the noise for ``num_releases`` equally weighted releases.

    Args:
        budget: The budget, or a raw Gaussian-DP ``mu``.
        num_releases: Number of releases ``K`` sharing the budget.
        clip: Per-row clip ``C``; the L2 sensitivity of a release is
            ``sqrt(2) * C`` under substitution of one row.
        fraction: Share of ``mu**2`` this plan may spend.

    Returns:
        The release plan with ``sigma = sqrt(2) * C * sqrt(K) / (mu * sqrt(fraction))``.

    Raises:
        InvalidBudgetError: For ``K < 1``, a non-positive clip or fraction, or
            a budget that cannot produce a finite positive sigma.
    """
    mu = budget.mu if isinstance(budget, PrivacyBudget) else float(budget)
    if num_releases < 1:
        raise InvalidBudgetError(f"need at least one release, got {num_releases}")
    if not math.isfinite(clip) or clip <= 0:
        raise InvalidBudgetError(f"clip must be positive and finite, got {clip}")
    if not 0.0 < fraction <= 1.0:
        raise InvalidBudgetError(f"fraction must lie in (0, 1], got {fraction}")
    share = mu * math.sqrt(fraction)
    if not math.isfinite(share) or share <= 0:
        raise InvalidBudgetError(f"degenerate budget: mu={mu}")
    l2_sensitivity = math.sqrt(2.0) * clip
    sigma = l2_sensitivity * math.sqrt(num_releases) / share
    if not math.isfinite(sigma) or sigma <= 0:
        raise InvalidBudgetError(f"calibration produced sigma={sigma}")
    logger.debug(
        f"Planned {num_releases} releases at sigma={sigma:.6g} "
        f"(mu={share:.6g}, clip={clip})"
    )
    return ReleasePlan(
        num_releases=num_releases,
        l2_sensitivity=l2_sensitivity,
        sigma=sigma,
        mu=share,
    )
