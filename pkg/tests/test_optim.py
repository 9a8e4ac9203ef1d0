"""Adam optimizer: no-op on zero gradients, sign-following updates, descent."""

import numpy as np
import pytest

from sinostd.grid import AdamState, GridError, Tensor, adam_step


def reference_adam_scalar(w0, grad_fn, lr, steps, beta1=0.9, beta2=0.999, eps=1e-8):
    """Independent scalar Adam, written from the update equations."""
    w, m, v = w0, 0.0, 0.0
    history = [w0]
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        w -= lr * m_hat / (np.sqrt(v_hat) + eps)
        history.append(w)
    return history


class TestAdamStep:
    def test_zero_gradient_is_noop(self):
        for lr in (1e-6, 1e-3, 0.1):
            p = {"w": Tensor(np.array([1.5, -2.0], dtype=np.float32), requires_grad=True)}
            before = p["w"].data.copy()
            state = AdamState(learning_rate=lr)
            for _ in range(5):
                adam_step(p, {"w": np.zeros(2, dtype=np.float32)}, state)
            assert np.array_equal(p["w"].data, before)

    def test_constant_gradient_magnitude_approaches_lr(self):
        """With constant gradient g, bias-corrected updates tend to lr*sign(g)."""
        g = np.array([3.0, -0.25], dtype=np.float32)
        p = {"w": Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)}
        state = AdamState(learning_rate=0.01)
        prev = p["w"].data.copy()
        for _ in range(200):
            prev = p["w"].data.copy()
            adam_step(p, {"w": g}, state)
        step = p["w"].data - prev
        assert np.allclose(step, -0.01 * np.sign(g), rtol=1e-3)

    def test_quadratic_descent_matches_reference_oracle(self):
        """Trajectory on f(w)=w^2 from w=1, lr=0.1 equals the scalar oracle.

        The oracle shows |w| decreases strictly until the iterate crosses
        zero (step 11 of 20), then Adam's momentum overshoots; the end point
        still has a far smaller |w| and loss than the start.
        """
        p = {"w": Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)}
        state = AdamState(learning_rate=0.1)
        trajectory = [1.0]
        for _ in range(20):
            adam_step(p, {"w": 2.0 * p["w"].data}, state)
            trajectory.append(float(p["w"].data[0]))
        oracle = reference_adam_scalar(1.0, lambda w: 2.0 * w, lr=0.1, steps=20)
        assert np.allclose(trajectory, oracle, atol=1e-5)
        crossing = next(i for i, w in enumerate(oracle) if w <= 0)
        pre = [abs(w) for w in oracle[:crossing]]
        assert all(b < a for a, b in zip(pre, pre[1:]))
        assert abs(oracle[-1]) < abs(oracle[0])
        assert oracle[-1] ** 2 < 0.1 * oracle[0] ** 2

    def test_bias_correction_first_step(self):
        # first update with any constant gradient is exactly lr*sign(g)
        p = {"w": Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)}
        state = AdamState(learning_rate=0.05)
        adam_step(p, {"w": np.array([7.0], dtype=np.float32)}, state)
        assert np.allclose(p["w"].data, -0.05, rtol=1e-5)

    def test_step_counter_increases(self):
        state = AdamState(learning_rate=0.1)
        p = {"w": Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)}
        for expected in (1, 2, 3):
            adam_step(p, {"w": np.ones(1, dtype=np.float32)}, state)
            assert state.step == expected

    def test_shape_mismatch_raises(self):
        p = {"w": Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)}
        with pytest.raises(GridError, match="gradient shape"):
            adam_step(p, {"w": np.zeros(2, dtype=np.float32)}, AdamState(learning_rate=0.1))

    def test_invalid_learning_rate(self):
        with pytest.raises(GridError, match="learning rate"):
            AdamState(learning_rate=0.0)

    def test_moment_buffers_match_parameter_shapes(self):
        p = {"w": Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True)}
        state = AdamState(learning_rate=0.1)
        adam_step(p, {"w": np.ones((2, 2), dtype=np.float32)}, state)
        assert state.m["w"].shape == (2, 2)
        assert state.v["w"].shape == (2, 2)
