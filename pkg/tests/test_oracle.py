import math

import numpy as np
import pytest

from privcnp import oracle as orc
from privcnp import taskgen as tg
from privcnp.accounting import PrivacyBudget
from privcnp.dpsetconv import ContextSet
from privcnp.gridsample import GridSpec
from privcnp.kernels import EQ, KernelSpec, gaussian_nll, gp_posterior, kernel_matrix
from privcnp.taskgen import Task


SPEC = KernelSpec(family=EQ, lengthscale=1.0, signal_scale=1.0, noise_scale=0.2)
BUDGET = PrivacyBudget(1.0, 1e-3)


def dense_grid(lo=-2.5, hi=2.5, n=101):
    return GridSpec(origins=(lo,), spacings=((hi - lo) / (n - 1),), counts=(n,))


def make_task(rng, n_ctx=5, n_tgt=8):
    cfg = tg.GeneratorConfig(
        lengthscale_range=(SPEC.lengthscale, SPEC.lengthscale),
        noise_scale_range=(SPEC.noise_scale, SPEC.noise_scale),
        context_size_range=(n_ctx, n_ctx),
        target_x_range=(-2.0, 2.0),
        target_count=n_tgt,
    )
    return tg.gen_gp_task(cfg, rng)


class TestGpOracleNll:
    def test_empty_context_prior_marginal(self):
        task = Task(
            context=ContextSet(np.zeros(0), np.zeros(0)),
            target_xs=np.array([0.0, 1.0]),
            target_ys=np.array([0.5, -0.5]),
            budget=BUDGET,
        )
        got = orc.gp_oracle_nll(SPEC, task)
        var = SPEC.signal_scale**2 + SPEC.noise_scale**2
        expected = np.mean(gaussian_nll(task.target_ys, 0.0, var))
        assert got == pytest.approx(float(expected), rel=1e-12)

    def test_matches_direct_composition(self):
        rng = np.random.default_rng(0)
        task = make_task(rng)
        pred = gp_posterior(SPEC, task.context.xs, task.context.ys,
                            task.target_xs)
        expected = float(np.mean(gaussian_nll(task.target_ys, pred.means,
                                              pred.variances)))
        assert orc.gp_oracle_nll(SPEC, task) == expected

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        task = make_task(rng, n_ctx=7)
        perm = rng.permutation(7)
        shuffled = Task(
            context=ContextSet(task.context.xs[perm], task.context.ys[perm]),
            target_xs=task.target_xs,
            target_ys=task.target_ys,
            budget=task.budget,
        )
        assert orc.gp_oracle_nll(SPEC, shuffled) == pytest.approx(
            orc.gp_oracle_nll(SPEC, task), rel=1e-9)

    def test_beats_prior_marginal_on_average(self):
        rng = np.random.default_rng(2)
        prior_var = SPEC.signal_scale**2 + SPEC.noise_scale**2
        oracle_mean, prior_mean = 0.0, 0.0
        n = 100
        for _ in range(n):
            task = make_task(rng, n_ctx=10, n_tgt=16)
            oracle_mean += orc.gp_oracle_nll(SPEC, task) / n
            prior_mean += float(np.mean(
                gaussian_nll(task.target_ys, 0.0, prior_var))) / n
        assert oracle_mean < prior_mean


class TestSawtoothFloor:
    def test_special_sigma(self):
        assert orc.sawtooth_floor_nll(1.0 / math.sqrt(2 * math.pi)) == \
            pytest.approx(0.5, abs=1e-12)

    def test_domain(self):
        with pytest.raises(ValueError):
            orc.sawtooth_floor_nll(0.0)

    def test_matches_monte_carlo(self):
        # Reference: the true-signal predictor's NLL on noisy sawtooth draws.
        sigma = 0.05
        rng = np.random.default_rng(3)
        n = 200_000
        z = sigma * rng.standard_normal(n)
        nlls = gaussian_nll(z, 0.0, sigma**2)
        se = float(nlls.std()) / math.sqrt(n)
        assert abs(float(nlls.mean()) - orc.sawtooth_floor_nll(sigma)) < 3 * se

    def test_monotone_structure(self):
        # ln(sigma) + constants: strictly increasing, no interior minimum.
        values = [orc.sawtooth_floor_nll(s) for s in (0.01, 0.1, 0.5, 1.0, 5.0)]
        assert all(a < b for a, b in zip(values, values[1:]))


class TestLowerBoundPredict:
    def _fixture(self, rng, sigma_s, n_ctx=5, n_tgt=3):
        cx = rng.uniform(-1.5, 1.5, n_ctx)
        tx = rng.uniform(-1.5, 1.5, n_tgt)
        grid = dense_grid()
        lam = 0.25
        return cx, tx, grid, lam

    def test_sigma_zero_limit_matches_gp_posterior(self):
        # With no channel noise and a dense grid the released channel
        # determines the context outputs, so the Bayes predictor collapses
        # to the plain GP posterior.
        rng = np.random.default_rng(4)
        cx, tx, grid, lam = self._fixture(rng, 0.0)
        cy = rng.standard_normal(5)
        s = orc.smoothing_matrix(grid, cx, lam) @ cy
        pred = orc.lower_bound_predict(SPEC, cx, s, lam, 0.0, grid, tx)
        ref = gp_posterior(SPEC, cx, cy, tx)
        assert np.allclose(pred.means, ref.means, atol=1e-4)
        assert np.allclose(pred.variances, ref.variances, atol=1e-4)

    def test_sigma_infinite_limit_is_prior(self):
        rng = np.random.default_rng(5)
        cx, tx, grid, lam = self._fixture(rng, None)
        s = rng.standard_normal(grid.total_points)
        pred = orc.lower_bound_predict(SPEC, cx, s, lam, 1e8, grid, tx)
        prior_var = SPEC.signal_scale**2 + SPEC.noise_scale**2
        assert np.allclose(pred.means, 0.0, atol=1e-4)
        assert np.allclose(pred.variances, prior_var, atol=1e-4)

    def test_empty_context_is_prior(self):
        grid = dense_grid()
        pred = orc.lower_bound_predict(SPEC, np.zeros(0),
                                       np.zeros(grid.total_points), 0.25, 1.0,
                                       grid, np.array([0.0]))
        assert pred.means[0] == 0.0
        assert pred.variances[0] == SPEC.signal_scale**2 + SPEC.noise_scale**2

    def test_bad_signal_shape(self):
        grid = dense_grid()
        with pytest.raises(ValueError):
            orc.lower_bound_predict(SPEC, np.zeros(2), np.zeros(3), 0.25, 1.0,
                                    grid, np.zeros(1))

    def test_monte_carlo_conditional_mean_and_calibration(self):
        # Simulate the generative model end to end and verify that the
        # closed-form conditional is the Bayes posterior: (a) residuals are
        # uncorrelated with every channel coordinate (conditional mean), and
        # (b) standardised residuals have unit variance (calibration).
        rng = np.random.default_rng(6)
        n_ctx, n_tgt = 4, 3
        cx = np.array([-1.0, -0.3, 0.4, 1.2])
        tx = np.array([-0.6, 0.1, 0.9])
        grid = GridSpec(origins=(-2.0,), spacings=(0.1,), counts=(41,))
        lam, sigma_s = 0.25, 0.5
        n_sims = 100_000

        joint_xs = np.concatenate([cx, tx])
        k_joint = kernel_matrix(SPEC, joint_xs, include_noise=True)
        ell = np.linalg.cholesky(k_joint + 1e-12 * np.eye(7))
        draws = (ell @ rng.standard_normal((7, n_sims))).T  # (sims, 7)
        y_ctx, y_tgt = draws[:, :n_ctx], draws[:, n_ctx:]

        psi = orc.smoothing_matrix(grid, cx, lam)
        gx = grid.axis_coords(0)
        k_grid = np.exp(-((gx[:, None] - gx[None, :]) ** 2) / (2 * lam**2))
        ell_g = np.linalg.cholesky(k_grid + 1e-10 * np.eye(len(gx)))
        g = (ell_g @ rng.standard_normal((len(gx), n_sims))).T
        s = y_ctx @ psi.T + sigma_s * g  # (sims, grid)

        # Closed-form conditional applied per simulation (vectorised).
        ref = orc.lower_bound_predict(SPEC, cx, s[0], lam, sigma_s, grid, tx)
        k_ctx = kernel_matrix(SPEC, cx, include_noise=True)
        cov_s = psi @ k_ctx @ psi.T + sigma_s**2 * k_grid
        cov_sy = psi @ kernel_matrix(SPEC, cx, tx)
        solve = np.linalg.solve(cov_s + 1e-10 * np.eye(len(gx)), cov_sy)
        means = s @ solve  # (sims, n_tgt)
        assert np.allclose(means[0], ref.means, atol=1e-5)

        resid = y_tgt - means
        # (a) conditional mean: residuals orthogonal to the observed channel.
        cross = resid.T @ s / n_sims  # (n_tgt, grid)
        s_sd = s.std(axis=0)
        r_sd = resid.std(axis=0)
        se = np.outer(r_sd, s_sd) / math.sqrt(n_sims)
        assert np.all(np.abs(cross) < 3.0 * se + 1e-12)
        # (b) calibration: standardised residuals have variance 1.
        standardised = resid / np.sqrt(ref.variances)
        v = standardised.var(axis=0)
        se_v = math.sqrt(2.0 / n_sims)
        assert np.all(np.abs(v - 1.0) < 3.0 * (se_v + 1e-3))
        assert np.all(np.abs(standardised.mean(axis=0))
                      < 3.0 / math.sqrt(n_sims) + 1e-3)


class TestLowerBoundNll:
    def test_sigma_zero_dense_grid_approaches_oracle(self):
        rng = np.random.default_rng(7)
        tasks = [make_task(rng) for _ in range(20)]
        grid = dense_grid()
        lb = orc.lower_bound_nll(SPEC, tasks, 0.25, 0.0, grid,
                                 np.random.default_rng(0))
        oracle = float(np.mean([orc.gp_oracle_nll(SPEC, t) for t in tasks]))
        assert abs(lb - oracle) < 0.02

    def test_monotone_in_sigma(self):
        rng = np.random.default_rng(8)
        tasks = [make_task(rng, n_ctx=8, n_tgt=16) for _ in range(30)]
        grid = dense_grid()
        values = [
            orc.lower_bound_nll(SPEC, tasks, 0.25, s, grid,
                                np.random.default_rng(1), noise_draws=4)
            for s in (0.1, 1.0, 10.0)
        ]
        assert values[0] < values[1] < values[2]

    def test_floor_never_above_prior_by_much(self):
        # Even infinite noise only degrades to the prior marginal.
        rng = np.random.default_rng(9)
        tasks = [make_task(rng) for _ in range(20)]
        grid = dense_grid()
        lb = orc.lower_bound_nll(SPEC, tasks, 0.25, 1e6, grid,
                                 np.random.default_rng(2))
        prior_var = SPEC.signal_scale**2 + SPEC.noise_scale**2
        prior = float(np.mean([
            np.mean(gaussian_nll(t.target_ys, 0.0, prior_var)) for t in tasks
        ]))
        assert lb == pytest.approx(prior, abs=1e-3)

    def test_noise_draw_validation(self):
        with pytest.raises(ValueError):
            orc.lower_bound_nll(SPEC, [], 0.25, 1.0, dense_grid(),
                                np.random.default_rng(0), noise_draws=0)
