"""Privacy-calibration math.

Conversion between (epsilon, delta) budgets and the single Gaussian-DP
parameter mu, composition of GDP guarantees, and noise-scale computation
for the Gaussian mechanism and the three functional-mechanism accountants
(classical, RDP-based, GDP-based).

All functions are pure and operate in double precision; delta values may
span many orders of magnitude, so the e^eps * Phi(...) product is evaluated
in log space to avoid overflow before cancellation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.optimize import brentq
from scipy.special import log_ndtr, ndtr

from .errors import NumericalError

# Search bracket for the numerical GDP inversion. The delta curve is strictly
# increasing in mu, so bracketed root finding is safe inside this range.
_MU_MIN = 1e-9
_MU_MAX = 100.0


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) differential-privacy budget."""

    epsilon: float
    delta: float

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class SensitivityPair:
    """Squared RKHS sensitivities of the density and signal channels.

    For a kernel bounded by ``kernel_bound`` and outputs clipped at
    ``clip_threshold``, the squared sensitivities are 2*C_k (density) and
    4*C^2*C_k (signal).
    """

    clip_threshold: float
    kernel_bound: float = 1.0

    def __post_init__(self):
        if self.clip_threshold <= 0:
            raise ValueError("clip threshold must be positive")
        if self.kernel_bound <= 0:
            raise ValueError("kernel bound must be positive")

    @property
    def delta_d_sq(self) -> float:
        return 2.0 * self.kernel_bound

    @property
    def delta_s_sq(self) -> float:
        return 4.0 * self.clip_threshold**2 * self.kernel_bound


@dataclass(frozen=True)
class NoiseScales:
    """Per-channel noise standard deviations and the split variable t."""

    sigma_d: float
    sigma_s: float
    t: float

    def mu(self, clip_threshold: float, kernel_bound: float = 1.0) -> float:
        """Total GDP parameter implied by these scales (composition identity)."""
        pair = SensitivityPair(clip_threshold, kernel_bound)
        return math.sqrt(
            pair.delta_s_sq / self.sigma_s**2 + pair.delta_d_sq / self.sigma_d**2
        )


def delta_from_mu(mu: float, epsilon: float) -> float:
    """Delta achieved at a given epsilon by a mu-GDP mechanism.

    Returns Phi(-eps/mu + mu/2) - e^eps * Phi(-eps/mu - mu/2), which is
    strictly increasing in mu and strictly decreasing in epsilon.
    """
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    a = -epsilon / mu + mu / 2.0
    b = -epsilon / mu - mu / 2.0
    # e^eps * Phi(b) evaluated as exp(eps + log Phi(b)) to avoid overflow.
    delta = ndtr(a) - math.exp(epsilon + log_ndtr(b))
    return min(max(float(delta), 0.0), 1.0 - 1e-16)


def mu_from_budget(budget: PrivacyBudget) -> float:
    """Invert the GDP conversion: the unique mu achieving (epsilon, delta).

    Bracketed root finding on mu in [1e-9, 100]; the curve is strictly
    monotone in mu so the bracket is safe whenever it contains the target.
    """
    eps, delta = budget.epsilon, budget.delta

    def f(mu):
        return delta_from_mu(mu, eps) - delta

    lo, hi = f(_MU_MIN), f(_MU_MAX)
    if lo > 0 or hi < 0:
        raise NumericalError(
            f"target delta={delta} at eps={eps} outside the invertible "
            f"range mu in [{_MU_MIN}, {_MU_MAX}]"
        )
    mu = brentq(f, _MU_MIN, _MU_MAX, xtol=1e-15, rtol=8.9e-16, maxiter=200)
    return float(mu)


def compose_gdp(mus) -> float:
    """Adaptive composition of GDP mechanisms: sqrt of the sum of squares.

    An empty sequence composes to 0 by convention.
    """
    mus = list(mus)
    if any(m <= 0 for m in mus):
        raise ValueError("all mu values must be positive")
    return math.sqrt(sum(m * m for m in mus))


def gaussian_mechanism_sigma(sensitivity: float, mu: float) -> float:
    """Noise scale of the mu-GDP Gaussian mechanism: sigma = Delta / mu."""
    if sensitivity < 0:
        raise ValueError("sensitivity must be nonnegative")
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    return sensitivity / mu


def classical_functional_sigma(sensitivity: float, budget: PrivacyBudget) -> float:
    """Classical functional-mechanism multiplier (Delta/eps)*sqrt(2 ln(2/delta)).

    Only valid for eps <= 1; larger eps is rejected since the bound is
    unproven there.
    """
    if sensitivity < 0:
        raise ValueError("sensitivity must be nonnegative")
    eps, delta = budget.epsilon, budget.delta
    if eps <= 0:
        raise ValueError("epsilon must be positive for the classical bound")
    if eps > 1:
        raise ValueError(f"classical bound only proven for eps <= 1, got {eps}")
    return (sensitivity / eps) * math.sqrt(2.0 * math.log(2.0 / delta))


def rdp_functional_sigma(sensitivity: float, budget: PrivacyBudget) -> float:
    """Smallest sigma satisfying the RDP-derived (eps, delta) bound.

    Positive root of -eps*sigma^2 + 2*sqrt(-Delta^2 ln(delta) / 2)*sigma
    + Delta^2/2 = 0, corresponding to the optimal Renyi order
    alpha* = sqrt(-2 sigma^2 ln(delta) / Delta^2) + 1.
    """
    if sensitivity < 0:
        raise ValueError("sensitivity must be nonnegative")
    eps, delta = budget.epsilon, budget.delta
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    if sensitivity == 0:
        return 0.0
    d2 = sensitivity**2
    b = 2.0 * math.sqrt(-d2 * math.log(delta) / 2.0)
    return (b + math.sqrt(b * b + 2.0 * eps * d2)) / (2.0 * eps)


def rdp_epsilon(alpha: float, sigma: float, sensitivity: float, delta: float) -> float:
    """(eps, delta) bound implied by the RDP guarantee at Renyi order alpha."""
    if alpha <= 1:
        raise ValueError("alpha must exceed 1")
    return alpha * sensitivity**2 / (2.0 * sigma**2) - math.log(delta) / (alpha - 1.0)


def gdp_functional_sigma(sensitivity: float, budget: PrivacyBudget) -> float:
    """GDP functional-mechanism multiplier: Delta / mu(budget)."""
    if sensitivity < 0:
        raise ValueError("sensitivity must be nonnegative")
    if sensitivity == 0:
        return 0.0
    return sensitivity / mu_from_budget(budget)


def noise_scales_from_mu(mu: float, clip_threshold: float, t: float) -> NoiseScales:
    """Split a total mu across the signal and density channels.

    With C_k = 1, sigma_s^2 = 4C^2/(t mu^2) and sigma_d^2 = 2/((1-t) mu^2),
    so the composed guarantee recovers mu exactly.
    """
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    if not 0 < t < 1:
        raise ValueError(f"t must be in (0, 1), got {t}")
    if clip_threshold <= 0:
        raise ValueError(f"clip threshold must be positive, got {clip_threshold}")
    sigma_s = math.sqrt(4.0 * clip_threshold**2 / (t * mu * mu))
    sigma_d = math.sqrt(2.0 / ((1.0 - t) * mu * mu))
    return NoiseScales(sigma_d=sigma_d, sigma_s=sigma_s, t=t)


def setconv_noise_scales(
    budget: PrivacyBudget, clip_threshold: float, t: float
) -> NoiseScales:
    """Noise scales for the DP encoder at a given (epsilon, delta) budget."""
    return noise_scales_from_mu(mu_from_budget(budget), clip_threshold, t)


def naive_pointwise_mu(n_points: int, clip_threshold: float, sigma: float) -> float:
    """GDP cost of releasing n grid evaluations with the plain Gaussian mechanism.

    Baseline comparison only: with pointwise sensitivities Delta_s^2 = 4C^2
    and Delta_d^2 = 1 (C_k = 1), mu grows with sqrt(n).
    """
    if n_points < 1:
        raise ValueError("n_points must be at least 1")
    if clip_threshold <= 0:
        raise ValueError("clip threshold must be positive")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    delta_sq = 4.0 * clip_threshold**2 + 1.0
    return math.sqrt(n_points * delta_sq / sigma**2)
