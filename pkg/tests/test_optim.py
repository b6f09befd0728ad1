"""Closed-form Adam behavior and the inverse-sqrt schedule."""

import numpy as np
import pytest

import simcr.tensor as T
from simcr.optim import OptimState, adam_step, lr_inverse_sqrt
from simcr.tensor import ShapeError


def single_param(value):
    p = T.parameter([value])
    params = {"w": p}
    return p, params, OptimState.for_params(params)


class TestAdam:
    def test_first_step_closed_form(self):
        # constant grad 1: bias correction gives mhat = vhat = 1, so the
        # first update is almost exactly lr
        p, params, state = single_param(1.0)
        p.grad = np.array([1.0])
        adam_step(params, state, lr=0.1)
        assert state.step_count == 1
        np.testing.assert_allclose(p.data, [0.9], atol=1e-8)

    def test_zero_grad_keeps_parameters(self):
        p, params, state = single_param(3.0)
        p.grad = np.zeros(1)
        adam_step(params, state, lr=0.1)
        assert p.data[0] == 3.0
        assert state.step_count == 1

    def test_missing_grad_counts_as_zero(self):
        p, params, state = single_param(3.0)
        adam_step(params, state, lr=0.1)
        assert p.data[0] == 3.0
        assert state.step_count == 1

    def test_lr_zero_is_noop_on_parameters(self):
        p, params, state = single_param(2.0)
        p.grad = np.array([0.7])
        adam_step(params, state, lr=0.0)
        assert p.data[0] == 2.0
        assert state.step_count == 1

    def test_quadratic_converges(self):
        # minimize 0.5 * w^2 (grad = w); oracle is this scalar simulation itself
        p, params, state = single_param(1.0)
        for _ in range(500):
            p.grad = p.data.copy()
            adam_step(params, state, lr=0.1)
            p.grad = None
        assert abs(p.data[0]) < 1e-3
        assert state.step_count == 500

    def test_shape_mismatch_rejected(self):
        p, params, state = single_param(1.0)
        p.grad = np.zeros(2)
        with pytest.raises(ShapeError):
            adam_step(params, state, lr=0.1)

    def test_step_count_strictly_increments(self):
        p, params, state = single_param(1.0)
        for expected in range(1, 6):
            p.grad = np.array([0.1])
            adam_step(params, state, lr=0.01)
            assert state.step_count == expected

    def test_moments_zero_initialized(self):
        _, params, state = single_param(1.0)
        assert np.all(state.first_moment["w"] == 0.0)
        assert np.all(state.second_moment["w"] == 0.0)


class TestInverseSqrtSchedule:
    def test_peak_at_warmup_boundary(self):
        assert lr_inverse_sqrt(8000, 8000, 1e-3) == pytest.approx(1e-3)

    def test_decay_value(self):
        # sqrt(8000 / 32000) = 1/2
        assert lr_inverse_sqrt(32000, 8000, 1e-3) == pytest.approx(5e-4)

    def test_linear_ramp(self):
        assert lr_inverse_sqrt(4000, 8000, 1e-3) == pytest.approx(5e-4)

    def test_continuous_at_boundary(self):
        before = lr_inverse_sqrt(7999, 8000, 1e-3)
        at = lr_inverse_sqrt(8000, 8000, 1e-3)
        after = lr_inverse_sqrt(8001, 8000, 1e-3)
        assert before < at
        assert after < at
        assert at - after < 1e-6

    def test_invalid_step(self):
        with pytest.raises(ValueError):
            lr_inverse_sqrt(0, 8000, 1e-3)
