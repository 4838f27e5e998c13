"""Tests for the damped least-squares solvers."""

import numpy as np
import pytest

from vioinit.config import LmConfig
from vioinit.optim import (
    huber_cost,
    huber_weights,
    levenberg_marquardt,
    separable_lm,
)


def _linear_problem(rng, m=40, n=6):
    a = rng.standard_normal((m, n))
    b = rng.standard_normal(m)
    return a, b


class TestLevenbergMarquardt:
    def test_linear_least_squares_matches_lstsq(self):
        rng = np.random.default_rng(3)
        a, b = _linear_problem(rng)
        x_ref = np.linalg.lstsq(a, b, rcond=None)[0]

        res = levenberg_marquardt(
            np.zeros(a.shape[1]),
            cost_fn=lambda x: float(np.sum((a @ x - b) ** 2)),
            linearize_fn=lambda x: (a @ x - b, a),
            retract_fn=lambda x, dx: x + dx,
        )
        assert res.converged
        np.testing.assert_allclose(res.x, x_ref, atol=1e-6)

    def test_nonlinear_curve_fit(self):
        # Fit y = exp(theta * t) from noiseless samples; unique optimum at 0 cost.
        t = np.linspace(0.0, 2.0, 30)
        y = np.exp(0.7 * t)

        def residual(x):
            return np.exp(x[0] * t) - y

        def linearize(x):
            r = residual(x)
            jac = (t * np.exp(x[0] * t)).reshape(-1, 1)
            return r, jac

        res = levenberg_marquardt(
            np.array([0.0]),
            cost_fn=lambda x: float(np.sum(residual(x) ** 2)),
            linearize_fn=linearize,
            retract_fn=lambda x, dx: x + dx,
        )
        assert res.converged
        assert abs(res.x[0] - 0.7) < 1e-6
        assert res.cost < 1e-12

    def test_cost_trace_strictly_decreasing(self):
        rng = np.random.default_rng(7)
        a, b = _linear_problem(rng, m=25, n=4)
        res = levenberg_marquardt(
            rng.standard_normal(4),
            cost_fn=lambda x: float(np.sum((a @ x - b) ** 2)),
            linearize_fn=lambda x: (a @ x - b, a),
            retract_fn=lambda x, dx: x + dx,
        )
        trace = np.array(res.cost_trace)
        assert np.all(np.diff(trace) < 0)
        assert res.accepted_steps == len(trace) - 1

    def test_plateau_at_optimum_converges(self):
        rng = np.random.default_rng(11)
        a, b = _linear_problem(rng)
        x_star = np.linalg.lstsq(a, b, rcond=None)[0]
        res = levenberg_marquardt(
            x_star,
            cost_fn=lambda x: float(np.sum((a @ x - b) ** 2)),
            linearize_fn=lambda x: (a @ x - b, a),
            retract_fn=lambda x, dx: x + dx,
        )
        assert res.converged
        assert res.cost <= res.initial_cost

    def test_useless_steps_reported_unconverged(self):
        # A sign-flipped Jacobian proposes only uphill steps; nothing accepted.
        rng = np.random.default_rng(13)
        a, b = _linear_problem(rng)
        res = levenberg_marquardt(
            np.zeros(a.shape[1]) + 5.0,
            cost_fn=lambda x: float(np.sum((a @ x - b) ** 2)),
            linearize_fn=lambda x: (a @ x - b, -a),
            retract_fn=lambda x, dx: x + dx,
            config=LmConfig(max_iterations=5),
        )
        assert not res.converged
        assert res.accepted_steps == 0
        assert res.cost == res.initial_cost


class TestSeparableLm:
    def test_matches_dense_solution(self):
        # Rows touch 2 shared params and at most one of 5 landmark scalars.
        rng = np.random.default_rng(5)
        n_dense, n_lm, m = 2, 5, 60
        a = rng.standard_normal((m, n_dense))
        lm_idx = rng.integers(-1, n_lm, size=m)
        lm_val = rng.standard_normal(m) * (lm_idx >= 0)
        y = rng.standard_normal(m)

        def full_residual(z):
            d, l = z[:n_dense], z[n_dense:]
            contrib = np.where(lm_idx >= 0, lm_val * l[np.clip(lm_idx, 0, None)], 0.0)
            return a @ d + contrib - y

        # Dense reference via lstsq on the stacked Jacobian.
        j_full = np.zeros((m, n_dense + n_lm))
        j_full[:, :n_dense] = a
        for k in range(m):
            if lm_idx[k] >= 0:
                j_full[k, n_dense + lm_idx[k]] = lm_val[k]
        z_ref = np.linalg.lstsq(j_full, y, rcond=None)[0]

        def linearize(z):
            return full_residual(z), a, lm_val, lm_idx

        def retract(z, d_dense, d_lm):
            out = z.copy()
            out[:n_dense] += d_dense
            out[n_dense:] += d_lm
            return out

        res = separable_lm(
            np.zeros(n_dense + n_lm),
            cost_fn=lambda z: float(np.sum(full_residual(z) ** 2)),
            linearize_fn=linearize,
            retract_fn=retract,
            n_dense=n_dense,
            n_landmarks=n_lm,
        )
        assert res.converged
        np.testing.assert_allclose(res.x, z_ref, atol=1e-6)

    def test_strict_decrease_and_rows_without_landmarks(self):
        rng = np.random.default_rng(9)
        n_dense, n_lm, m = 3, 4, 50
        a = rng.standard_normal((m, n_dense))
        lm_idx = np.full(m, -1)
        lm_idx[: m // 2] = rng.integers(0, n_lm, size=m // 2)
        lm_val = np.where(lm_idx >= 0, rng.standard_normal(m), 0.0)
        y = rng.standard_normal(m)

        def residual(z):
            d, l = z[:n_dense], z[n_dense:]
            contrib = np.where(lm_idx >= 0, lm_val * l[np.clip(lm_idx, 0, None)], 0.0)
            return a @ d + contrib - y

        res = separable_lm(
            rng.standard_normal(n_dense + n_lm),
            cost_fn=lambda z: float(np.sum(residual(z) ** 2)),
            linearize_fn=lambda z: (residual(z), a, lm_val, lm_idx),
            retract_fn=lambda z, dd, dl: z + np.concatenate([dd, dl]),
            n_dense=n_dense,
            n_landmarks=n_lm,
        )
        assert res.converged
        assert np.all(np.diff(res.cost_trace) < 0)


class TestHuber:
    def test_weights_inside_and_outside(self):
        w = huber_weights(np.array([0.5, 1.5, 3.0]), delta=1.5)
        np.testing.assert_allclose(w, [1.0, 1.0, np.sqrt(0.5)])

    def test_cost_values(self):
        # Inside: r^2. Outside: delta * (2|r| - delta).
        assert huber_cost(np.array([1.0]), 1.5) == pytest.approx(1.0)
        assert huber_cost(np.array([3.0]), 1.5) == pytest.approx(1.5 * (6.0 - 1.5))
        assert huber_cost(np.array([-3.0]), 1.5) == pytest.approx(1.5 * (6.0 - 1.5))

    def test_cost_continuous_at_delta(self):
        below = huber_cost(np.array([1.5 - 1e-9]), 1.5)
        above = huber_cost(np.array([1.5 + 1e-9]), 1.5)
        assert abs(below - above) < 1e-6
