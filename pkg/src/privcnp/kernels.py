"""Covariance functions, dense GP sampling, and exact GP posterior prediction.

The posterior here is the non-DP oracle against which everything else is
scored. Predictive variances include the observation noise because all NLLs
are evaluated against noisy targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky as scipy_cholesky, solve_triangular

from .errors import FactorisationError

EQ = "eq"
MATERN32 = "matern32"
SAWTOOTH_META = "sawtooth"  # metadata-only family; no covariance defined

_SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class KernelSpec:
    """Stationary covariance description used by generators, oracles and DP noise."""

    family: str = EQ
    lengthscale: float = 1.0
    signal_scale: float = 1.0
    noise_scale: float = 0.0

    def __post_init__(self):
        if self.family not in (EQ, MATERN32, SAWTOOTH_META):
            raise ValueError(f"unknown kernel family: {self.family!r}")
        if self.lengthscale <= 0:
            raise ValueError("lengthscale must be positive")
        if self.signal_scale <= 0:
            raise ValueError("signal scale must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise scale must be nonnegative")


@dataclass(frozen=True)
class GaussianPrediction:
    """Factorised Gaussian predictive over target points."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "variances", np.asarray(self.variances, dtype=float))
        if self.means.shape != self.variances.shape:
            raise ValueError("means and variances must have matching shapes")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be strictly positive")


def kernel_matrix(
    spec: KernelSpec, xs: np.ndarray, zs: np.ndarray | None = None,
    include_noise: bool = False,
) -> np.ndarray:
    """Covariance matrix k(xs, zs); noise is added on exact-zero distances only."""
    xs = np.asarray(xs, dtype=float)
    zs = xs if zs is None else np.asarray(zs, dtype=float)
    r = np.abs(xs[:, None] - zs[None, :])
    sv2 = spec.signal_scale**2
    if spec.family == EQ:
        k = sv2 * np.exp(-(r**2) / (2.0 * spec.lengthscale**2))
    elif spec.family == MATERN32:
        u = _SQRT3 * r / spec.lengthscale
        k = sv2 * (1.0 + u) * np.exp(-u)
    else:
        raise ValueError(f"family {spec.family!r} has no covariance function")
    if include_noise and spec.noise_scale > 0:
        k = k + np.where(r == 0.0, spec.noise_scale**2, 0.0)
    return k


def kernel_eval(spec: KernelSpec, x: float, z: float, include_noise: bool = False) -> float:
    """Evaluate the covariance function at a single pair of inputs."""
    return float(kernel_matrix(spec, [x], [z], include_noise=include_noise)[0, 0])


def cholesky(matrix: np.ndarray, jitter_scale: float = 1.0) -> np.ndarray:
    """Lower-triangular Cholesky factor with escalating diagonal jitter.

    The unjittered matrix is tried first; on failure jitter starts at
    1e-8 * jitter_scale and escalates x10 up to 1e-4 * jitter_scale before
    giving up. EQ matrices are notoriously ill-conditioned at spacings small
    relative to the lengthscale.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError("matrix must be square")
    if matrix.size == 0:
        return matrix.copy()
    eye = np.eye(matrix.shape[0])
    last_err = None
    for jitter in (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4):
        try:
            return scipy_cholesky(matrix + (jitter * jitter_scale) * eye, lower=True)
        except Exception as err:
            last_err = err
    raise FactorisationError(
        f"matrix not positive definite after jitter escalation: {last_err}"
    )


def gp_sample(spec: KernelSpec, xs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw a joint sample of noisy function values at xs."""
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        return np.zeros(0)
    k = kernel_matrix(spec, xs, include_noise=True)
    ell = cholesky(k, jitter_scale=spec.signal_scale**2)
    return ell @ rng.standard_normal(xs.size)


def gp_posterior(
    spec: KernelSpec,
    context_xs: np.ndarray,
    context_ys: np.ndarray,
    target_xs: np.ndarray,
) -> GaussianPrediction:
    """Exact GP regression conditional, predictive of noisy observations.

    With an empty context this is the prior marginal: mean 0 and variance
    signal^2 + noise^2 at every target.
    """
    cx = np.asarray(context_xs, dtype=float)
    cy = np.asarray(context_ys, dtype=float)
    tx = np.asarray(target_xs, dtype=float)
    if cx.shape != cy.shape:
        raise ValueError("context xs and ys must have equal length")
    prior_var = spec.signal_scale**2 + spec.noise_scale**2
    if cx.size == 0:
        return GaussianPrediction(np.zeros(tx.size), np.full(tx.size, prior_var))
    k_cc = kernel_matrix(spec, cx, include_noise=True)
    k_tc = kernel_matrix(spec, tx, cx)
    ell = cholesky(k_cc, jitter_scale=spec.signal_scale**2)
    alpha = cho_solve((ell, True), cy)
    means = k_tc @ alpha
    v = solve_triangular(ell, k_tc.T, lower=True)
    variances = prior_var - np.einsum("ij,ij->j", v, v)
    # Guard against tiny negative values from cancellation.
    variances = np.maximum(variances, 1e-12 * prior_var)
    return GaussianPrediction(means, variances)


def gaussian_nll(y, mean, variance):
    """Per-point negative log-likelihood of y under N(mean, variance)."""
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(variance <= 0):
        raise ValueError("variance must be strictly positive")
    return 0.5 * np.log(2.0 * np.pi * variance) + (y - mean) ** 2 / (2.0 * variance)
