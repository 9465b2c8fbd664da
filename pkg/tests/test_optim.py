import math

import numpy as np
import pytest

from piml_knw.autodiff import ContractError, NumericalError
from piml_knw.optim import (AdamState, LbfgsState, OptimTrace, adam_ascent_step, adam_minimize, adam_step, ascend,
                            lbfgs_minimize, strong_wolfe)


def quadratic(A, b):
    def fun(x):
        return 0.5 * x @ A @ x - b @ x, A @ x - b

    return fun


def rosenbrock(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return f, g


def spd(n, seed):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return Q @ np.diag(rng.uniform(1, 10, n)) @ Q.T


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        st = AdamState.zeros(3)
        _, x = adam_step(st, np.array([1.0, 2.0, 3.0]), np.zeros(3))
        np.testing.assert_array_equal(x, [1.0, 2.0, 3.0])

    def test_first_step_is_lr_times_sign(self):
        g = np.array([1e-3, -5.0, 250.0, -1e4])
        st = AdamState.zeros(4, lr=0.01, eps=0.0)
        _, x = adam_step(st, np.zeros(4), g)
        np.testing.assert_allclose(x, -0.01 * np.sign(g), rtol=1e-15)

    def test_first_step_with_default_eps(self):
        g = np.array([0.5, -2.0])
        _, x = adam_step(AdamState.zeros(2), np.zeros(2), g)
        np.testing.assert_allclose(np.abs(x), 1e-3, rtol=1e-7)

    def test_converges_on_square(self):
        x, _ = adam_minimize(lambda x: (float(x @ x), 2 * x), np.array([1.0]), 500, lr=0.1)
        assert abs(x[0]) < 1e-3

    def test_second_moment_nonnegative(self):
        st = AdamState.zeros(2)
        rng = np.random.default_rng(0)
        x = np.zeros(2)
        for _ in range(20):
            st, x = adam_step(st, x, rng.standard_normal(2))
            assert np.all(st.v >= 0) and st.m.shape == x.shape

    def test_non_finite_gradient(self):
        with pytest.raises(NumericalError):
            adam_step(AdamState.zeros(2), np.zeros(2), np.array([np.inf, 0.0]))

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            adam_step(AdamState.zeros(2), np.zeros(3), np.zeros(3))

    def test_ascent_is_descent_on_negation(self):
        g = np.array([0.3, -0.7])
        s1, x1 = adam_ascent_step(AdamState.zeros(2), np.ones(2), g)
        s2, x2 = adam_step(AdamState.zeros(2), np.ones(2), -g)
        np.testing.assert_array_equal(x1, x2)

    def test_deterministic(self):
        fun = quadratic(spd(4, 1), np.ones(4))
        a, _ = adam_minimize(fun, np.zeros(4), 50)
        b, _ = adam_minimize(fun, np.zeros(4), 50)
        assert a.tobytes() == b.tobytes()


class TestLbfgs:
    def test_quadratic_five_variables(self):
        # eigenvalues 1..5 in a fixed rotated basis, default line-search settings
        Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((5, 5)))
        A = Q @ np.diag(np.arange(1.0, 6.0)) @ Q.T
        b = np.arange(1.0, 6.0)
        x, trace = lbfgs_minimize(quadratic(A, b), np.zeros(5), max_iters=10, tol_grad=1e-10)
        assert np.max(np.abs(A @ x - b)) < 1e-10
        np.testing.assert_allclose(x, np.linalg.solve(A, b), rtol=1e-9)

    def test_quadratic_converges_with_defaults(self):
        A = spd(5, 0)
        b = np.arange(1.0, 6.0)
        x, trace = lbfgs_minimize(quadratic(A, b), np.zeros(5), max_iters=50, tol_grad=1e-10)
        assert np.max(np.abs(A @ x - b)) < 1e-10
        assert trace.message == "gradient below tolerance"

    @pytest.mark.parametrize("n", range(1, 9))
    def test_exact_line_search_finite_termination(self, n):
        # a vanishing curvature constant forces the line search to the exact minimizer
        A = spd(n, n)
        b = np.ones(n)
        x, trace = lbfgs_minimize(quadratic(A, b), np.zeros(n), max_iters=n, tol_grad=1e-10, c2=1e-10)
        assert len(trace.iteration) - 1 <= n
        assert np.max(np.abs(A @ x - b)) < 1e-10

    def test_rosenbrock(self):
        x, trace = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), max_iters=200, tol_grad=1e-12)
        assert np.linalg.norm(x - 1.0) < 1e-6

    def test_constant_objective(self):
        x0 = np.array([0.3, -0.4])
        x, trace = lbfgs_minimize(lambda x: (1.0, np.zeros(2)), x0)
        np.testing.assert_array_equal(x, x0)
        assert trace.n_evals == 1

    def test_objective_monotone(self):
        _, trace = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), max_iters=100)
        assert all(b <= a for a, b in zip(trace.objective, trace.objective[1:]))

    def test_curvature_pairs_skipped(self):
        st = LbfgsState.fresh(5)
        assert not st.push(np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
        assert st.push(np.array([1.0, 0.0]), np.array([2.0, 0.0]))
        assert len(st.history) == 1

    def test_history_capacity(self):
        st = LbfgsState.fresh(3)
        for k in range(6):
            st.push(np.array([1.0, k]), np.array([1.0, k]))
        assert len(st.history) == 3

    def test_no_descent_sets_warning(self):
        # the reported gradient points the wrong way, so no step can decrease f
        def bad(x):
            return float(x @ x), -2 * x

        x, trace = lbfgs_minimize(bad, np.array([1.0, 1.0]), max_iters=50)
        assert trace.warning
        np.testing.assert_array_equal(x, [1.0, 1.0])

    def test_non_finite_start(self):
        with pytest.raises(NumericalError):
            lbfgs_minimize(lambda x: (math.nan, np.zeros(1)), np.zeros(1))

    def test_strong_wolfe_conditions_hold(self):
        x = np.array([-1.2, 1.0])
        f, g = rosenbrock(x)
        d = -g
        gtd = float(g @ d)
        f_new, g_new, t, _, _ = strong_wolfe(rosenbrock, x, 1e-3, d, f, g, gtd)
        assert f_new <= f + 1e-4 * t * gtd
        assert abs(float(g_new @ d)) <= 0.9 * abs(gtd)

    def test_trace_csv(self, tmp_path):
        _, trace = lbfgs_minimize(rosenbrock, np.array([0.0, 0.0]), max_iters=5)
        lines = trace.to_csv(tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "iteration,objective,grad_norm"
        assert len(lines) == len(trace.iteration) + 1


class TestAscend:
    def test_negative_square(self):
        x, _ = ascend(lambda x: (-float(x @ x), -2 * x), np.array([1.0]), epochs=3000, lr=1e-2)
        assert abs(x[0]) < 1e-2

    def test_sine_with_adam(self):
        x, _ = ascend(lambda x: (math.sin(x[0]), np.cos(x)), np.array([1.0]), epochs=5000, lr=1e-3)
        assert abs(x[0] - math.pi / 2) < 1e-3

    def test_sine_with_lbfgs(self):
        x, _ = ascend(lambda x: (math.sin(x[0]), np.cos(x)), np.array([1.0]), method="lbfgs", max_iters=50)
        assert abs(x[0] - math.pi / 2) < 1e-6

    def test_matches_descent_on_negation(self):
        f = lambda x: (math.sin(x[0]) * x[1], np.array([math.cos(x[0]) * x[1], math.sin(x[0])]))
        neg = lambda x: tuple(-np.asarray(v) for v in f(x))
        a, _ = ascend(f, np.array([0.2, 0.5]), epochs=100)
        b, _ = adam_minimize(neg, np.array([0.2, 0.5]), 100)
        assert a.tobytes() == b.tobytes()

    def test_unknown_method(self):
        with pytest.raises(ContractError):
            ascend(lambda x: (0.0, x), np.zeros(1), method="sgd")
