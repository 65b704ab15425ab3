"""Ground-truth reference predictors.

Three references with different scopes: the exact GP posterior (the Bayes
predictor for GP tasks), the observation-noise floor for sawtooth tasks
(where the exact posterior is intractable), and the closed-form Bayes
predictor for the signal-noise-only ablation of the private encoder.

The ablation predictor works because without clipping or density noise the
released signal channel is a linear function of the context outputs plus
Gaussian noise: s = Psi y + sigma_s g with Psi_{jn} = psi((g_j - x_n)/lambda)
and g a grid GP with the unit-amplitude lambda-RBF kernel. The context
outputs y and the (noisy) targets y* are jointly Gaussian under the task GP,
so y* | s is Gaussian with

    mean  = cov(y*, s) cov(s)^-1 s
    var   = var(y*) - diag(cov(y*, s) cov(s)^-1 cov(s, y*))

where cov(s) = Psi K_ctx Psi^T + sigma_s^2 K_grid and
cov(s, y*) = Psi K(ctx, targets). K_ctx includes the observation noise
(the channel is built from noisy outputs); the cross-covariance does not
(target noise is independent of context noise).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .gridsample import GridSpec, kronecker_sample, per_dim_factors, rbf_1d
from .kernels import (
    GaussianPrediction,
    KernelSpec,
    cholesky,
    gaussian_nll,
    gp_posterior,
    kernel_matrix,
)
from .taskgen import Task


def gp_oracle_nll(spec: KernelSpec, task: Task) -> float:
    """Mean target NLL of the exact GP posterior for a task from this spec."""
    pred = gp_posterior(spec, task.context.xs, task.context.ys, task.target_xs)
    return float(np.mean(gaussian_nll(task.target_ys, pred.means,
                                      pred.variances)))


def sawtooth_floor_nll(sigma_n: float) -> float:
    """Expected per-point NLL of the observation noise given the true signal.

    This is E[-log N(y; f, sigma_n^2)] with y = f + sigma_n * z, which no
    predictor can beat in expectation when the signal posterior collapses.
    """
    if sigma_n <= 0:
        raise ValueError(f"noise scale must be positive, got {sigma_n}")
    return 0.5 * math.log(2.0 * math.pi * sigma_n**2) + 0.5


def smoothing_matrix(grid: GridSpec, xs: np.ndarray, lengthscale: float) -> np.ndarray:
    """Psi_{jn} = exp(-((g_j - x_n) / lambda)^2 / 2), shape (grid, points)."""
    if lengthscale <= 0:
        raise ValueError("lengthscale must be positive")
    if grid.ndim != 1:
        raise ValueError("1-D grids only")
    gx = grid.axis_coords(0)
    xs = np.asarray(xs, dtype=float)
    return np.exp(-(((gx[:, None] - xs[None, :]) / lengthscale) ** 2) / 2.0)


def lower_bound_predict(
    spec: KernelSpec,
    context_xs: np.ndarray,
    signal: np.ndarray,
    lengthscale: float,
    sigma_s: float,
    grid: GridSpec,
    target_xs: np.ndarray,
) -> GaussianPrediction:
    """Bayes predictive for targets given the noisy released signal channel.

    Applies in the ablation where clipping and density noise are off and the
    context inputs are public. `signal` is the released channel on the grid.
    """
    cx = np.asarray(context_xs, dtype=float)
    s = np.asarray(signal, dtype=float)
    tx = np.asarray(target_xs, dtype=float)
    if s.shape != (grid.total_points,):
        raise ValueError("signal must be a flat vector over the grid")
    if sigma_s < 0:
        raise ValueError("sigma_s must be nonnegative")
    prior_var = spec.signal_scale**2 + spec.noise_scale**2
    if cx.size == 0:
        return GaussianPrediction(np.zeros(tx.size), np.full(tx.size, prior_var))
    psi = smoothing_matrix(grid, cx, lengthscale)
    k_ctx = kernel_matrix(spec, cx, include_noise=True)
    gx = grid.axis_coords(0)
    k_grid = rbf_1d(lengthscale)(gx[:, None], gx[None, :])
    cov_s = psi @ k_ctx @ psi.T + sigma_s**2 * k_grid
    cov_sy = psi @ kernel_matrix(spec, cx, tx)  # (grid, targets)
    ell = cholesky(cov_s, jitter_scale=max(float(np.trace(cov_s)) / len(gx), 1.0))
    alpha = cho_solve((ell, True), s)
    means = cov_sy.T @ alpha
    v = solve_triangular(ell, cov_sy, lower=True)
    variances = prior_var - np.einsum("ij,ij->j", v, v)
    variances = np.maximum(variances, 1e-12 * prior_var)
    return GaussianPrediction(means, variances)


def release_signal(
    task: Task,
    lengthscale: float,
    sigma_s: float,
    grid: GridSpec,
    rng: np.random.Generator,
) -> np.ndarray:
    """Signal channel of the ablated mechanism: smoothing plus scaled GP noise."""
    psi = smoothing_matrix(grid, task.context.xs, lengthscale)
    s = psi @ task.context.ys if len(task.context) else np.zeros(grid.total_points)
    if sigma_s > 0:
        factors = per_dim_factors(grid, [rbf_1d(lengthscale)])
        s = s + sigma_s * kronecker_sample(factors, rng)
    return s


def lower_bound_nll(
    spec: KernelSpec,
    tasks: list[Task],
    lengthscale: float,
    sigma_s: float,
    grid: GridSpec,
    rng: np.random.Generator,
    noise_draws: int = 1,
) -> float:
    """Average Bayes-optimal NLL achievable from the released signal channel.

    This is the floor for any model consuming the same ablated representation:
    per task and noise draw, the mean target NLL of `lower_bound_predict`.
    """
    if noise_draws < 1:
        raise ValueError("need at least one noise draw")
    total = 0.0
    for task in tasks:
        for _ in range(noise_draws):
            s = release_signal(task, lengthscale, sigma_s, grid, rng)
            pred = lower_bound_predict(
                spec, task.context.xs, s, lengthscale, sigma_s, grid,
                task.target_xs,
            )
            total += float(np.mean(gaussian_nll(task.target_ys, pred.means,
                                                pred.variances)))
    return total / (len(tasks) * noise_draws)
