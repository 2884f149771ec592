"""Mini-batch estimator, Adam, and the training loop."""

import itertools
import math

import numpy as np
import pytest

from muss.core import (
    ModelParams,
    MultiUnitDataset,
    PriorConfig,
    objective_reparameterized,
    softplus,
)
from muss.net import NetworkSpec, init_params
from muss.train import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    draw_minibatch,
    exact_gradient,
    fit,
    stochastic_gradient,
    validation_mse,
)

from conftest import make_unit, random_problem, random_problem_clear_of_kinks


class TestDrawMinibatch:
    def test_single_unit_full_budget(self, rng):
        data = MultiUnitDataset([make_unit("a", np.zeros((5, 1)), np.zeros(5))])
        cfg = TrainConfig(batch_budget=5, epochs=1)
        batch = draw_minibatch(data, cfg, rng)
        assert len(batch) == 1 and len(batch[0]) == 5
        assert np.all((batch[0] >= 0) & (batch[0] < 5))

    def test_proportional_allocation(self, rng):
        data = MultiUnitDataset(
            [
                make_unit("a", np.zeros((100, 1)), np.zeros(100)),
                make_unit("b", np.zeros((300, 1)), np.zeros(300)),
            ]
        )
        cfg = TrainConfig(batch_budget=8, epochs=1)
        batch = draw_minibatch(data, cfg, rng)
        assert len(batch[0]) == 2
        assert len(batch[1]) == 6

    def test_floor_of_one(self, rng):
        data = MultiUnitDataset(
            [
                make_unit("a", np.zeros((1, 1)), np.zeros(1)),
                make_unit("b", np.zeros((1000, 1)), np.zeros(1000)),
            ]
        )
        batch = draw_minibatch(data, TrainConfig(batch_budget=4, epochs=1), rng)
        assert len(batch[0]) >= 1

    def test_empty_unit_skipped(self, rng):
        from muss.core import UnitDataset

        data = MultiUnitDataset(
            [UnitDataset.empty("a", 1), make_unit("b", np.zeros((10, 1)), np.zeros(10))]
        )
        batch = draw_minibatch(data, TrainConfig(batch_budget=4, epochs=1), rng)
        assert len(batch[0]) == 0 and len(batch[1]) > 0

    def test_deterministic_per_seed(self):
        data = MultiUnitDataset([make_unit("a", np.zeros((50, 1)), np.zeros(50))])
        cfg = TrainConfig(batch_budget=8, epochs=1)
        b1 = draw_minibatch(data, cfg, np.random.default_rng(9))
        b2 = draw_minibatch(data, cfg, np.random.default_rng(9))
        assert all(np.array_equal(x, y) for x, y in zip(b1, b2))


class TestStochasticGradient:
    def test_full_batch_matches_finite_differences(self, rng):
        # exact gradient of the reparameterized objective on small models
        priors = PriorConfig()
        worst = 0.0
        for _ in range(5):
            spec, data, params = random_problem_clear_of_kinks(rng)
            grad, value = exact_gradient(params, data, spec, priors)
            assert value == pytest.approx(
                objective_reparameterized(params, data, spec, priors), rel=1e-12
            )
            step = 1e-5

            def obj():
                return objective_reparameterized(params, data, spec, priors)

            def check(analytic, fd):
                return abs(analytic - fd) / max(abs(fd), 1e-8)

            for p in range(spec.n_params):
                params.theta[p] += step
                up = obj()
                params.theta[p] -= 2 * step
                down = obj()
                params.theta[p] += step
                worst = max(worst, check(grad.d_theta[p], (up - down) / (2 * step)))
            for i in range(params.n_units):
                for p in range(spec.context_dim):
                    params.contexts[i, p] += step
                    up = obj()
                    params.contexts[i, p] -= 2 * step
                    down = obj()
                    params.contexts[i, p] += step
                    worst = max(
                        worst, check(grad.d_contexts[i, p], (up - down) / (2 * step))
                    )
                params.raw_precisions[i] += step
                up = obj()
                params.raw_precisions[i] -= 2 * step
                down = obj()
                params.raw_precisions[i] += step
                worst = max(
                    worst, check(grad.d_raw_precisions[i], (up - down) / (2 * step))
                )
        assert worst <= 1e-4

    def test_enumerated_batches_average_to_full_gradient(self, rng):
        # one unit, two points, batch size 1: the two possible batches
        # average exactly to the full-data gradient
        spec, data, params = random_problem_clear_of_kinks(
            rng, m=1, d=2, k=2, width=4, depth=1, n_lo=2, n_hi=2
        )
        priors = PriorConfig()
        full, _ = exact_gradient(params, data, spec, priors)
        g0, _ = stochastic_gradient(params, data, [np.array([0])], spec, priors)
        g1, _ = stochastic_gradient(params, data, [np.array([1])], spec, priors)
        assert np.allclose(
            0.5 * (g0.d_theta + g1.d_theta), full.d_theta, rtol=1e-12, atol=1e-14
        )
        assert np.allclose(
            0.5 * (g0.d_contexts + g1.d_contexts), full.d_contexts, rtol=1e-12, atol=1e-14
        )
        assert np.allclose(
            0.5 * (g0.d_raw_precisions + g1.d_raw_precisions),
            full.d_raw_precisions,
            rtol=1e-12,
            atol=1e-14,
        )

    def test_two_unit_enumeration_unbiasedness(self, rng):
        # M=2, 3 points each, one draw per unit: averaging the gradient over
        # all 9 equally likely batch pairs reproduces the full gradient
        spec, data, params = random_problem_clear_of_kinks(
            rng, m=2, d=2, k=2, width=5, depth=2, n_lo=3, n_hi=3
        )
        priors = PriorConfig()
        full, _ = exact_gradient(params, data, spec, priors)
        acc_theta = np.zeros_like(full.d_theta)
        acc_ctx = np.zeros_like(full.d_contexts)
        acc_raw = np.zeros_like(full.d_raw_precisions)
        for j0, j1 in itertools.product(range(3), range(3)):
            g, _ = stochastic_gradient(
                params, data, [np.array([j0]), np.array([j1])], spec, priors
            )
            acc_theta += g.d_theta
            acc_ctx += g.d_contexts
            acc_raw += g.d_raw_precisions

        def rel(a, b):
            scale = np.maximum(np.abs(b), 1e-12)
            return np.max(np.abs(a - b) / scale)

        assert rel(acc_theta / 9, full.d_theta) <= 1e-10
        assert rel(acc_ctx / 9, full.d_contexts) <= 1e-10
        assert rel(acc_raw / 9, full.d_raw_precisions) <= 1e-10

    def test_empty_batch_leaves_prior_terms(self, rng):
        spec, data, params = random_problem(rng, m=2, d=2, k=2, width=4, depth=1)
        priors = PriorConfig()
        g, value = stochastic_gradient(
            params, data, [np.empty(0, dtype=int), np.empty(0, dtype=int)], spec, priors
        )
        # likelihood absent: gradient reduces to the prior gradients
        assert np.allclose(g.d_contexts, -params.contexts)
        assert np.allclose(g.d_theta, -params.theta / priors.theta_sigma**2)
        from muss.core import log_prior

        assert value == pytest.approx(log_prior(params, priors), rel=1e-12)


class TestAdam:
    def test_first_step_size(self):
        state = AdamState([(1,)])
        p = [np.zeros(1)]
        adam_step(state, p, [np.ones(1)], learning_rate=1e-4)
        assert p[0][0] == pytest.approx(1e-4 / (1.0 + 1e-8), rel=1e-12)

    def test_zero_gradient_never_moves(self):
        state = AdamState([(3,)])
        p = [np.array([1.0, -2.0, 0.5])]
        for _ in range(50):
            adam_step(state, p, [np.zeros(3)], learning_rate=0.1)
        assert np.array_equal(p[0], np.array([1.0, -2.0, 0.5]))

    def test_first_step_scale_invariance(self):
        updates = []
        for scale in (1.0, 1e4):
            state = AdamState([(1,)])
            p = [np.zeros(1)]
            adam_step(state, p, [scale * np.ones(1)], learning_rate=1e-4)
            updates.append(p[0][0])
        assert updates[0] == pytest.approx(updates[1], rel=1e-4)

    def test_ascent_direction(self):
        state = AdamState([(2,)])
        p = [np.zeros(2)]
        adam_step(state, p, [np.array([3.0, -3.0])], learning_rate=0.01)
        assert p[0][0] > 0 and p[0][1] < 0


def _toy_linear_problem(n=50, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, 1))
    y = 0.8 * x[:, 0] + 0.3  # noise-free, representable target
    train = MultiUnitDataset([make_unit("a", x, y)])
    val = MultiUnitDataset([make_unit("a", x[:10], y[:10])])
    return train, val


class TestFit:
    def test_converges_on_separable_toy(self):
        train, val = _toy_linear_problem()
        spec = NetworkSpec(input_dim=1, context_dim=1, hidden_width=16, hidden_depth=1)
        cfg = TrainConfig(learning_rate=3e-3, epochs=2000, batch_budget=50, seed=1)
        result = fit(train, val, spec, PriorConfig(), cfg)
        train_mse = validation_mse(result.params, train, spec)
        assert train_mse <= 1e-3

    def test_full_batch_objective_non_decreasing_at_tiny_rate(self):
        # deterministic full-batch ascent (every point used once per step)
        train, _val = _toy_linear_problem(n=12)
        spec = NetworkSpec(input_dim=1, context_dim=1, hidden_width=4, hidden_depth=1)
        priors = PriorConfig()
        params = ModelParams(
            theta=init_params(spec, 3),
            contexts=np.zeros((1, 1)),
            raw_precisions=np.array([1.0]),
        )
        state = AdamState(
            [params.theta.shape, params.contexts.shape, params.raw_precisions.shape]
        )
        values = []
        for _ in range(300):
            grad, value = exact_gradient(params, train, spec, priors)
            values.append(value)
            adam_step(
                state,
                [params.theta, params.contexts, params.raw_precisions],
                [grad.d_theta, grad.d_contexts, grad.d_raw_precisions],
                learning_rate=1e-5,
            )
        assert np.min(np.diff(values)) >= -1e-6

    def test_selection_is_argmin_validation_earliest_tie(self):
        train, val = _toy_linear_problem(n=20)
        spec = NetworkSpec(input_dim=1, context_dim=1, hidden_width=8, hidden_depth=1)
        cfg = TrainConfig(learning_rate=1e-3, epochs=50, batch_budget=20, seed=2)
        result = fit(train, val, spec, PriorConfig(), cfg)
        mses = [rec.validation_mse for rec in result.history]
        best = int(np.argmin(mses)) + 1  # epochs are 1-based; argmin takes first
        assert result.selected_epoch == best

    def test_bit_identical_history_per_seed(self):
        train, val = _toy_linear_problem(n=30)
        spec = NetworkSpec(input_dim=1, context_dim=2, hidden_width=6, hidden_depth=2)
        cfg = TrainConfig(learning_rate=1e-3, epochs=20, batch_budget=8, seed=11)
        r1 = fit(train, val, spec, PriorConfig(), cfg)
        r2 = fit(train, val, spec, PriorConfig(), cfg)
        h1 = [(rec.objective_estimate, rec.validation_mse) for rec in r1.history]
        h2 = [(rec.objective_estimate, rec.validation_mse) for rec in r2.history]
        assert h1 == h2
        assert np.array_equal(r1.params.theta, r2.params.theta)
        assert np.array_equal(r1.params.contexts, r2.params.contexts)
        assert np.array_equal(r1.params.raw_precisions, r2.params.raw_precisions)

    def test_precisions_stay_positive(self):
        train, val = _toy_linear_problem(n=30)
        spec = NetworkSpec(input_dim=1, context_dim=1, hidden_width=6, hidden_depth=1)
        cfg = TrainConfig(learning_rate=1e-2, epochs=100, batch_budget=30, seed=5)
        result = fit(train, val, spec, PriorConfig(), cfg)
        assert np.all(softplus(result.params.raw_precisions) > 0)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nan_aborts_with_epoch_diagnostic(self):
        # targets large enough that the squared residual overflows
        train, val = _toy_linear_problem(n=10)
        bad = MultiUnitDataset(
            [make_unit("a", train.units[0].x, train.units[0].y + 1e160)]
        )
        spec = NetworkSpec(input_dim=1, context_dim=1, hidden_width=4, hidden_depth=1)
        cfg = TrainConfig(learning_rate=1e-3, epochs=50, batch_budget=10, seed=0)
        with pytest.raises(TrainingDiverged, match="epoch 1.*log_likelihood"):
            fit(bad, val, spec, PriorConfig(), cfg)
