import math

import numpy as np
import pytest

from privcnp import autodiff as ad
from privcnp import model as mdl
from privcnp import taskgen as tg
from privcnp.accounting import PrivacyBudget, mu_from_budget
from privcnp.dpsetconv import ABLATION, ContextSet
from privcnp.errors import NumericalError
from privcnp.kernels import GaussianPrediction
from privcnp.taskgen import Task


BUDGET = PrivacyBudget(1.0, 1e-3)


def small_config():
    """Narrow-window tiny variant so unit tests stay fast (97 grid points)."""
    return mdl.tiny_config(window=(-3.0, 3.0))


def small_taskgen():
    return tg.GeneratorConfig(
        lengthscale_range=(1.0, 1.0),
        context_size_range=(1, 24),
        target_x_range=(-2.0, 2.0),
        target_count=32,
    )


def make_state(config=None, seed=0):
    return mdl.init_state(config or small_config(), np.random.default_rng(seed))


def make_task(rng=None, **overrides):
    rng = rng or np.random.default_rng(0)
    return tg.gen_task(tg.GeneratorConfig(**{**dict(
        lengthscale_range=(1.0, 1.0),
        context_size_range=(1, 24),
        target_x_range=(-2.0, 2.0),
        target_count=32,
    ), **overrides}), rng)


class TestConfig:
    def test_grid_counts(self):
        assert mdl.tiny_config().grid().total_points == 225
        assert mdl.paper_config().grid().total_points == 449

    def test_tiny_preset_fields(self):
        cfg = mdl.tiny_config()
        assert (cfg.depth, cfg.width, cfg.points_per_unit) == (4, 32, 16)

    def test_paper_preset_fields(self):
        cfg = mdl.paper_config()
        assert (cfg.depth, cfg.width, cfg.initial_channels,
                cfg.kernel_size) == (7, 256, 32, 5)
        assert cfg.lambda_init == 0.20

    def test_validation(self):
        with pytest.raises(ValueError):
            mdl.tiny_config(window=(1.0, -1.0))
        with pytest.raises(ValueError):
            mdl.tiny_config(kernel_size=4)
        with pytest.raises(ValueError):
            mdl.tiny_config(depth=0)


class TestTcMaps:
    def test_zero_init_values(self):
        state = make_state()
        t, c = mdl.tc_maps(state, [1.0, 2.0], [10, 500])
        assert np.allclose(t.value, 0.5)
        assert np.allclose(c.value, 2.0)

    def test_domain(self):
        state = make_state()
        with pytest.raises(ValueError):
            mdl.tc_maps(state, [0.0], [1])
        with pytest.raises(ValueError):
            mdl.tc_maps(state, [1.0], [-1])

    def test_smooth_in_mu(self):
        # Randomise the nets, then probe finite-difference continuity.
        state = make_state()
        rng = np.random.default_rng(5)
        for name, p in state.store.items():
            if name.startswith(("t_net", "c_net")):
                p.value = 0.3 * rng.standard_normal(p.value.shape)
        for mu in (0.3, 1.0, 4.0):
            t0, c0 = mdl.tc_maps(state, [mu], [100])
            t1, c1 = mdl.tc_maps(state, [mu + 1e-6], [100])
            assert abs(t1.value[0, 0] - t0.value[0, 0]) < 1e-4
            assert abs(c1.value[0, 0] - c0.value[0, 0]) < 1e-4

    def test_ranges(self):
        state = make_state()
        rng = np.random.default_rng(6)
        for name, p in state.store.items():
            if name.startswith(("t_net", "c_net")):
                p.value = 0.5 * rng.standard_normal(p.value.shape)
        t, c = mdl.tc_maps(state, rng.uniform(0.1, 5, 20),
                           rng.integers(0, 512, 20))
        assert np.all((t.value > 0) & (t.value < 1))
        assert np.all(c.value > 0)

    def test_grad_check(self):
        state = make_state()
        rng = np.random.default_rng(7)
        params = {}
        for name, p in state.store.items():
            if name.startswith(("t_net", "c_net")):
                p.value = 0.5 * rng.standard_normal(p.value.shape)
                params[name] = p

        def closure():
            t, c = mdl.tc_maps(state, [0.8, 2.0], [16, 300])
            return ad.tsum(t * t) + ad.tsum(ad.log(c))

        assert ad.grad_check(closure, params) < 1e-6


class TestForward:
    def test_shapes_and_positive_variance(self):
        state = make_state()
        task = make_task()
        pred = mdl.forward(state, task.context, task.target_xs, task.budget,
                           np.random.default_rng(0))
        assert pred.means.shape == task.target_xs.shape
        assert np.all(pred.variances > 0)

    def test_deterministic_under_seed(self):
        state = make_state()
        task = make_task()
        a = mdl.forward(state, task.context, task.target_xs, task.budget,
                        np.random.default_rng(9))
        b = mdl.forward(state, task.context, task.target_xs, task.budget,
                        np.random.default_rng(9))
        assert np.array_equal(a.means, b.means)
        assert np.array_equal(a.variances, b.variances)

    def test_fresh_noise_differs(self):
        state = make_state()
        # The zero-started output head ignores its input; perturb it so the
        # noise actually reaches the predictions.
        rng = np.random.default_rng(8)
        w = state.store["final.w"]
        w.value = 0.05 * rng.standard_normal(w.value.shape)
        task = make_task()
        a = mdl.meta_test(state, task.context, task.budget, task.target_xs,
                          np.random.default_rng(1))
        b = mdl.meta_test(state, task.context, task.budget, task.target_xs,
                          np.random.default_rng(2))
        assert not np.array_equal(a.means, b.means)

    def test_targets_outside_window_rejected(self):
        state = make_state()
        task = make_task()
        with pytest.raises(ValueError):
            mdl.forward(state, task.context, [10.0], task.budget,
                        np.random.default_rng(0))

    def test_deploy_refuses_ablation(self):
        state = make_state()
        task = make_task()
        with pytest.raises(ValueError):
            mdl.forward(state, task.context, task.target_xs, task.budget,
                        np.random.default_rng(0), enable_clip=False)

    def test_noise_scales_satisfy_budget_identity(self):
        # One meta-test call must consume exactly one budget's worth of
        # noise: sqrt(4C^2/sigma_s^2 + 2/sigma_d^2) = mu(budget).
        state = make_state()
        rng = np.random.default_rng(3)
        for name, p in state.store.items():
            if name.startswith(("t_net", "c_net")):
                p.value = 0.3 * rng.standard_normal(p.value.shape)
        task = make_task()
        result = mdl.forward_batch(state, [task], np.random.default_rng(0))
        c = float(result.c.value[0, 0])
        sd = float(result.sigma_d[0].value)
        ss = float(result.sigma_s[0].value)
        mu = math.sqrt(4.0 * c * c / ss**2 + 2.0 / sd**2)
        assert mu == pytest.approx(mu_from_budget(task.budget), abs=1e-9)

    def test_empty_context_supported(self):
        state = make_state()
        ctx = ContextSet(np.zeros(0), np.zeros(0))
        pred = mdl.forward(state, ctx, [0.0, 1.0], BUDGET,
                           np.random.default_rng(0))
        assert pred.means.shape == (2,)

    def test_translation_equivariance_exact(self):
        # Shift context, targets and window by one grid cell with the same
        # noise draws: the relative geometry is unchanged, so predictions
        # must match exactly.
        config = small_config()
        state = make_state(config)
        task = make_task()
        spacing = 1.0 / config.points_per_unit
        grid0 = config.grid()
        grid1 = config.grid(window=(config.window[0] + spacing,
                                    config.window[1] + spacing))
        z = [np.random.default_rng(11).standard_normal((grid0.total_points, 2))]
        base = mdl.forward_batch(state, [task], noise=z, grid=grid0)
        shifted_task = Task(
            context=ContextSet(task.context.xs + spacing, task.context.ys),
            target_xs=task.target_xs + spacing,
            target_ys=task.target_ys,
            budget=task.budget,
        )
        shifted = mdl.forward_batch(state, [shifted_task], noise=z, grid=grid1)
        assert np.array_equal(base.means[0].value, shifted.means[0].value)
        assert np.array_equal(base.log_sds[0].value, shifted.log_sds[0].value)

    def test_ablated_forward_needs_no_rng(self):
        state = make_state()
        task = make_task()
        a = mdl.forward(state, task.context, task.target_xs, task.budget,
                        None, mode=ABLATION, enable_clip=False,
                        enable_density_noise=False, enable_signal_noise=False)
        b = mdl.forward(state, task.context, task.target_xs, task.budget,
                        None, mode=ABLATION, enable_clip=False,
                        enable_density_noise=False, enable_signal_noise=False)
        assert np.array_equal(a.means, b.means)


class TestNllLoss:
    def test_perfect_prediction_special_variance(self):
        # var = 1/(2pi) makes the log term vanish; zero residual gives 0.
        ys = np.array([0.3, -0.7])
        pred = GaussianPrediction(ys.copy(), np.full(2, 1.0 / (2 * math.pi)))
        assert mdl.nll_loss(pred, ys) == pytest.approx(0.0, abs=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        ys = rng.standard_normal(5)
        means = rng.standard_normal(5)
        v = rng.uniform(0.5, 2.0, 5)
        a = mdl.nll_loss(GaussianPrediction(means, v), ys)
        b = mdl.nll_loss(GaussianPrediction(means + 3.3, v), ys + 3.3)
        assert a == pytest.approx(b, rel=1e-12)

    def test_length_mismatch(self):
        pred = GaussianPrediction(np.zeros(3), np.ones(3))
        with pytest.raises(ValueError):
            mdl.nll_loss(pred, np.zeros(4))


class TestEndToEndGradient:
    def test_grad_check_fixed_noise(self):
        config = small_config()
        state = make_state(config)
        rng = np.random.default_rng(21)
        # Randomise the heads so gradients are informative everywhere.
        for name, p in state.store.items():
            if name.startswith(("t_net", "c_net")):
                p.value = 0.3 * rng.standard_normal(p.value.shape)
        state.store["final.w"].value = 0.05 * rng.standard_normal(
            state.store["final.w"].value.shape)
        task = make_task(context_size_range=(6, 6), target_count=8)
        z = [rng.standard_normal((config.grid().total_points, 2))]

        def closure():
            return mdl.batch_loss(state, [task], noise=z, mode="train")

        err = ad.grad_check(closure, state.store.as_dict(), h=1e-5,
                            subsample=60, rng=rng)
        assert err < 1e-4


class TestMetaTrain:
    def test_zero_steps_noop(self):
        state = make_state()
        before = {n: p.value.copy() for n, p in state.store.items()}
        result = mdl.meta_train(state, lambda r: make_task(r), 0,
                                np.random.default_rng(0))
        assert result.log_rows == []
        for n, p in state.store.items():
            assert np.array_equal(before[n], p.value)

    def test_log_row_count_matches_cadence(self):
        state = make_state()
        cfg = small_taskgen()
        result = mdl.meta_train(
            state, lambda r: tg.gen_task(cfg, r), steps=6,
            rng=np.random.default_rng(0), batch_size=2, cadence=2)
        assert [row["step"] for row in result.log_rows] == [2, 4, 6]

    def test_loss_decreases_majority_of_seeds(self):
        # Statistical smoke test: smoothed loss over the first 50 steps
        # drops for at least 2 of 3 seeds.
        cfg = small_taskgen()
        wins = 0
        for seed in (0, 1, 2):
            state = make_state(seed=seed)
            rng = np.random.default_rng(seed)
            sampler = tg.pooled_sampler(cfg, rng, 64)
            result = mdl.meta_train(state, sampler, steps=50, rng=rng,
                                    batch_size=4, cadence=10)
            first = result.log_rows[0]["train_nll"]
            last = result.log_rows[-1]["train_nll"]
            wins += int(last < first)
        assert wins >= 2

    def test_validation_tracks_best(self, tmp_path):
        cfg = small_taskgen()
        state = make_state()
        rng = np.random.default_rng(0)
        val = [tg.gen_task(cfg, rng) for _ in range(4)]
        log_path = tmp_path / "log.csv"
        result = mdl.meta_train(
            state, lambda r: tg.gen_task(cfg, r), steps=4, rng=rng,
            batch_size=2, cadence=2, val_tasks=val, log_path=log_path)
        assert math.isfinite(result.best_val_nll)
        assert result.best_step in (2, 4)
        text = log_path.read_text().splitlines()
        assert text[0] == "step,train_nll,val_nll,lambda,wall_ms"
        assert len(text) == 1 + len(result.log_rows)

    def test_nonfinite_loss_aborts(self):
        state = make_state()
        state.store["final.w"].value[:] = 1e200
        state.store["final.b"].value[:] = -1e200
        with pytest.raises(NumericalError):
            mdl.meta_train(state, lambda r: make_task(r), steps=1,
                           rng=np.random.default_rng(0), batch_size=1)


class TestCheckpoint:
    def test_round_trip_reproduces_forward(self, tmp_path):
        state = make_state()
        rng = np.random.default_rng(0)
        for _, p in state.store.items():
            p.value = p.value + 0.01 * rng.standard_normal(p.value.shape)
        mdl.save_checkpoint(tmp_path / "ckpt", state)
        loaded = mdl.load_checkpoint(tmp_path / "ckpt")
        assert loaded.config == state.config
        task = make_task()
        a = mdl.forward(state, task.context, task.target_xs, task.budget,
                        np.random.default_rng(4))
        b = mdl.forward(loaded, task.context, task.target_xs, task.budget,
                        np.random.default_rng(4))
        assert np.array_equal(a.means, b.means)
        assert np.array_equal(a.variances, b.variances)
