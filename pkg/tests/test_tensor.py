"""Tensor engine: arithmetic, broadcasting, reductions, tape correctness."""

import numpy as np
import pytest

from sinostd.grid import GridError, Tensor, cat, finite_diff_check, set_finite_checks


@pytest.fixture
def rng():
    return np.random.default_rng(42)


class TestConstruction:
    def test_default_dtype_is_float32(self):
        t = Tensor([1.0, 2.0])
        assert t.dtype == np.float32

    def test_float64_preserved(self):
        t = Tensor(np.zeros(3, dtype=np.float64))
        assert t.dtype == np.float64

    def test_rank_limit(self):
        with pytest.raises(GridError, match="rank"):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_non_finite_rejected(self):
        with pytest.raises(GridError, match="non-finite"):
            Tensor([1.0, np.inf])

    def test_finite_checks_can_be_disabled(self):
        prev = set_finite_checks(False)
        try:
            Tensor([np.nan])
        finally:
            set_finite_checks(prev)


class TestArithmetic:
    def test_add_mul_values(self, rng):
        a = rng.normal(size=(3, 4)).astype(np.float32)
        b = rng.normal(size=(3, 4)).astype(np.float32)
        assert np.allclose((Tensor(a) + Tensor(b)).data, a + b)
        assert np.allclose((Tensor(a) * Tensor(b)).data, a * b)
        assert np.allclose((Tensor(a) - 2.0).data, a - 2.0)
        assert np.allclose((1.0 / Tensor(np.abs(a) + 1)).data, 1.0 / (np.abs(a) + 1))

    def test_broadcast_gradients(self, rng):
        a = rng.normal(size=(2, 3, 1, 5))
        b = rng.normal(size=(3, 4, 1))
        rep = finite_diff_check(lambda x, y: x * y + y, [a, b])
        assert rep.passed

    def test_pow_gradient(self, rng):
        rep = finite_diff_check(lambda x: x ** 3, [np.abs(rng.normal(size=(4,))) + 0.5])
        assert rep.passed

    @pytest.mark.filterwarnings("ignore:divide by zero")
    def test_division_by_zero_raises(self):
        with pytest.raises(GridError, match="non-finite"):
            Tensor([1.0]) / Tensor([0.0])

    def test_elementwise_functions(self, rng):
        x = np.abs(rng.normal(size=(5,))) + 0.5
        for op in [lambda t: t.exp(), lambda t: t.log(), lambda t: t.sqrt(), lambda t: t.abs()]:
            rep = finite_diff_check(op, [x])
            assert rep.passed, op

    def test_clip_gradient_masks_outside(self):
        t = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
        t.clip(-1.0, 1.0).sum().backward()
        assert np.array_equal(t.grad, [0.0, 1.0, 0.0])


class TestReductions:
    def test_sum_matches_numpy(self, rng):
        x = rng.normal(size=(3, 4, 5)).astype(np.float32)
        assert np.allclose(Tensor(x).sum(axis=1).data, x.sum(axis=1), atol=1e-6)
        assert np.isclose(Tensor(x).sum().item(), x.astype(np.float64).sum(), atol=1e-6)

    def test_mean_keepdims_gradient(self, rng):
        rep = finite_diff_check(lambda x: (x - x.mean(axis=-1, keepdims=True)) ** 2,
                                [rng.normal(size=(3, 5))])
        assert rep.passed

    def test_sum_64bit_accumulation(self):
        # float32 naive accumulation of 1e7 + tiny values loses the tail
        x = np.full(100000, 1e-3, dtype=np.float32)
        x[0] = 1e7
        got = Tensor(x).sum().item()
        assert np.isclose(got, 1e7 + 99999e-3, rtol=1e-7)


class TestShapeOps:
    def test_reshape_roundtrip_grad(self, rng):
        rep = finite_diff_check(lambda x: x.reshape(6, 2).reshape(3, 4), [rng.normal(size=(3, 4))])
        assert rep.passed

    def test_narrow_values_and_grad(self, rng):
        x = rng.normal(size=(2, 6, 3))
        t = Tensor(x, requires_grad=True)
        sl = t.narrow(1, 2, 3)
        assert np.array_equal(sl.data, x[:, 2:5])
        sl.sum().backward()
        expected = np.zeros_like(x)
        expected[:, 2:5] = 1.0
        assert np.array_equal(t.grad, expected)

    def test_narrow_out_of_range(self):
        with pytest.raises(GridError, match="narrow"):
            Tensor(np.zeros((2, 3))).narrow(1, 2, 2)

    def test_cat_grad_splits(self, rng):
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 2))
        rep = finite_diff_check(lambda x, y: cat([x, y], axis=1) ** 2, [a, b])
        assert rep.passed


class TestBackward:
    def test_diamond_graph(self):
        t = Tensor(np.array([2.0]), requires_grad=True)
        s = t * t
        y = s + s * 3.0
        y.backward()
        assert np.allclose(t.grad, 16.0)

    def test_shared_subexpression_deep(self, rng):
        x = rng.normal(size=(3,))
        t = Tensor(x, requires_grad=True)
        a = t * 2.0
        b = a + t
        c = b * a
        c.sum().backward()
        # d/dx of (2x + x) * 2x = d/dx 6x^2 = 12x
        assert np.allclose(t.grad, 12.0 * x, rtol=1e-5)

    def test_grad_accumulates_across_backwards(self):
        t = Tensor(np.ones(2), requires_grad=True)
        (t * 3.0).sum().backward()
        (t * 3.0).sum().backward()
        assert np.allclose(t.grad, 6.0)

    def test_seed_gradient_shape_checked(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GridError, match="seed gradient"):
            (t * 2).backward(np.ones(2))

    def test_adjoint_linearity(self, rng):
        """Backward of a sum of ops equals the sum of backwards."""
        x = rng.normal(size=(4, 4))

        def run(fn):
            t = Tensor(x, requires_grad=True)
            fn(t).sum().backward()
            return t.grad.copy()

        g_both = run(lambda t: t * 3.0 + t.exp())
        g_parts = run(lambda t: t * 3.0) + run(lambda t: t.exp())
        assert np.allclose(g_both, g_parts, atol=1e-6)

    def test_detach_blocks_gradient(self):
        t = Tensor(np.ones(2), requires_grad=True)
        y = (t * 2.0).detach() * t
        y.sum().backward()
        assert np.allclose(t.grad, 2.0)
