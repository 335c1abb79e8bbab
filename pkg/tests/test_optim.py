"""Adam, CMA-ES and GP-UCB"""
import numpy as np
import pytest

from app.core.errors import OptimizerError
from app.core.numcore import Parameter
from app.core.optim import (
    AdamState,
    CmaesOptimizer,
    CmaState,
    GpState,
    adam_step,
    bo_observe,
    bo_suggest,
    cmaes_ask,
    cmaes_tell,
    gp_posterior,
)


def sphere(x):
    return float(np.sum(x * x))


def rosenbrock(x):
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = Parameter([0.0], name="p")
        state = AdamState.create({"all": ([p], 0.1)})
        adam_step(state, {p: np.array([1.0])})
        assert p.data[0] == pytest.approx(-0.1, abs=1e-6)

    def test_zero_gradient_is_identity(self):
        p = Parameter([1.5, -2.0], name="p")
        state = AdamState.create({"all": ([p], 0.1)})
        adam_step(state, {p: np.zeros(2)})
        assert p.data.tolist() == [1.5, -2.0]

    def test_zero_lr_is_identity(self):
        p = Parameter([0.5], name="p")
        state = AdamState.create({"all": ([p], 0.0)})
        for _ in range(3):
            adam_step(state, {p: np.array([2.0])})
        assert p.data[0] == 0.5

    def test_groups_use_their_own_rates(self):
        fast, slow = Parameter([0.0], name="fast"), Parameter([0.0], name="slow")
        state = AdamState.create({"routers": ([fast], 5e-4), "prompts": ([slow], 1e-4)})
        adam_step(state, {fast: np.array([1.0]), slow: np.array([1.0])})
        assert fast.data[0] == pytest.approx(-5e-4, rel=1e-3)
        assert slow.data[0] == pytest.approx(-1e-4, rel=1e-3)

    def test_missing_gradient_leaves_parameter(self):
        a, b = Parameter([1.0], name="a"), Parameter([1.0], name="b")
        state = AdamState.create({"all": ([a, b], 0.1)})
        adam_step(state, {a: np.array([1.0])})
        assert b.data[0] == 1.0


class TestCmaes:
    def test_default_population(self):
        assert CmaState.create(np.zeros(10), 0.5).lam == 10

    def test_tiny_sigma_keeps_candidates_at_mean(self):
        state = CmaState.create(np.ones(4), 1e-12)
        xs = cmaes_ask(state, np.random.default_rng(0))
        assert np.allclose(xs, 1.0, atol=1e-9)

    def test_seeded_candidates_repeat(self):
        a = cmaes_ask(CmaState.create(np.zeros(5), 0.3), np.random.default_rng(7))
        b = cmaes_ask(CmaState.create(np.zeros(5), 0.3), np.random.default_rng(7))
        assert np.array_equal(a, b)

    def test_rejects_bad_tell(self):
        state = CmaState.create(np.zeros(3), 0.5)
        xs = cmaes_ask(state, np.random.default_rng(0))
        with pytest.raises(OptimizerError):
            cmaes_tell(state, xs, [0.0] * (len(xs) - 1))
        with pytest.raises(OptimizerError):
            cmaes_tell(state, xs, [float("nan")] * len(xs))

    def test_rejects_bad_init(self):
        with pytest.raises(OptimizerError):
            CmaState.create(np.zeros(3), 0.0)
        with pytest.raises(OptimizerError):
            CmaState.create([], 0.5)

    def test_equal_fitness_keeps_mean_close(self):
        state = CmaState.create(np.zeros(6), 0.1)
        rng = np.random.default_rng(0)
        xs = cmaes_ask(state, rng)
        cmaes_tell(state, xs, np.zeros(len(xs)))
        assert np.linalg.norm(state.mean) < 3 * 0.1 * np.sqrt(6)

    def test_sigma_and_covariance_stay_valid(self):
        state = CmaState.create(np.ones(5), 0.5)
        rng = np.random.default_rng(1)
        for _ in range(50):
            xs = cmaes_ask(state, rng)
            cmaes_tell(state, xs, [sphere(x) for x in xs])
            assert state.sigma > 0
            assert np.linalg.eigvalsh(state.C).min() > 0

    def test_sphere_converges(self):
        results = []
        for seed in range(5):
            opt = CmaesOptimizer(np.ones(16), 0.5, seed=seed)
            _, best = opt.minimize(sphere, max_evals=5000)
            results.append(best)
        assert np.median(results) < 1e-6

    def test_median_best_value_falls_monotonically_over_twenty_seeds(self):
        curves = []
        for seed in range(20):
            opt = CmaesOptimizer(np.ones(16), 0.5, seed=seed)
            curve, evals = [], 0
            while evals < 5000:
                xs = opt.ask()
                opt.tell(xs, [sphere(x) for x in xs])
                evals += len(xs)
                curve.append(opt.best_f)
            curves.append(curve)
        median = np.median(np.array(curves), axis=0)
        assert np.all(np.diff(median) <= 0)
        assert median[-1] < 1e-6
        assert median[-1] < 1e-3 * median[0]

    @pytest.mark.slow
    def test_rosenbrock_converges(self):
        results = []
        for seed in range(5):
            opt = CmaesOptimizer(np.zeros(8), 0.5, seed=seed)
            _, best = opt.minimize(rosenbrock, max_evals=30000)
            results.append(best)
        assert np.median(results) < 1e-3

    def test_best_so_far_never_increases(self):
        opt = CmaesOptimizer(np.ones(4), 0.5, seed=3)
        history = []
        for _ in range(20):
            xs = opt.ask()
            opt.tell(xs, [sphere(x) for x in xs])
            history.append(opt.best_f)
        assert all(a >= b for a, b in zip(history, history[1:]))


class TestGpUcb:
    def test_first_suggestion_inside_box(self):
        state = GpState.create([-3.0, -3.0], [3.0, 3.0])
        x = bo_suggest(state, np.random.default_rng(0))
        assert np.all(x >= -3.0) and np.all(x <= 3.0)

    def test_two_equal_observations_suggest_midpoint(self):
        state = GpState.create([0.0], [1.0])
        bo_observe(state, [0.0], 1.0)
        bo_observe(state, [1.0], 1.0)
        x = bo_suggest(state, np.random.default_rng(0))
        grid = np.linspace(0.0, 1.0, 2001)[:, None]
        _, sd = gp_posterior(state, grid)
        assert x[0] == pytest.approx(grid[int(np.argmax(sd)), 0], abs=0.02)
        assert x[0] == pytest.approx(0.5, abs=0.02)

    def test_duplicate_observation_keeps_mean(self):
        state = GpState.create([0.0], [1.0])
        bo_observe(state, [0.2], 1.0)
        bo_observe(state, [0.8], -1.0)
        grid = np.linspace(0, 1, 11)[:, None]
        before, _ = gp_posterior(state, grid)
        bo_observe(state, [0.2], 1.0)
        bo_observe(state, [0.8], -1.0)
        after, _ = gp_posterior(state, grid)
        np.testing.assert_allclose(before, after, atol=1e-2)

    def test_suggestions_stay_in_bounds(self):
        rng = np.random.default_rng(2)
        state = GpState.create(np.full(4, -3.0), np.full(4, 3.0))
        for _ in range(10):
            x = bo_suggest(state, rng)
            assert np.all(x >= -3.0) and np.all(x <= 3.0)
            bo_observe(state, x, -sphere(x))

    def test_rejects_malformed_bounds_and_observations(self):
        with pytest.raises(OptimizerError):
            GpState.create([1.0], [0.0])
        state = GpState.create([0.0], [1.0])
        with pytest.raises(OptimizerError):
            bo_observe(state, [2.0], 0.0)
        with pytest.raises(OptimizerError):
            bo_observe(state, [0.5], float("inf"))
