import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmdit import tensor as T
from mmdit.errors import ContractError, ShapeError
from mmdit.masks import masked_mse


def matmul_oracle(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        rhs = T.Tensor([[3.0, 4.0], [5.0, 6.0]])
        out = T.matmul(T.Tensor(np.eye(2)), rhs)
        assert np.array_equal(out.data, rhs.data)

    def test_zeros_annihilate(self):
        out = T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.arange(6.0).reshape(3, 2)))
        assert np.array_equal(out.data, np.zeros((2, 2)))

    def test_two_by_two_oracle(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        out = T.matmul(T.Tensor(a), T.Tensor(b))
        assert np.array_equal(out.data, np.array([[19.0, 22.0], [43.0, 50.0]]))
        assert np.array_equal(out.data, matmul_oracle(a, b))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 2))))

    def test_associativity(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            a, b, c = (T.Tensor(rng.standard_normal(s))
                       for s in [(4, 6), (6, 3), (3, 5)])
            left = T.matmul(T.matmul(a, b), c).data
            right = T.matmul(a, T.matmul(b, c)).data
            assert np.abs(left - right).max() / max(np.abs(left).max(), 1.0) < 1e-9


class TestSoftmax:
    def test_uniform_input(self):
        out = T.softmax(T.Tensor([0.0, 0.0, 0.0]), axis=-1)
        assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_direct_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()
        out = T.softmax(T.Tensor(x), axis=-1)
        assert np.allclose(out.data, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)
        assert np.allclose(out.data, expected, atol=1e-15)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8),
           st.floats(-1e3, 1e3))
    @settings(max_examples=50, deadline=None, derandomize=True)
    def test_shift_invariance(self, values, shift):
        x = np.array(values)
        a = T.softmax(T.Tensor(x), axis=-1).data
        b = T.softmax(T.Tensor(x + shift), axis=-1).data
        assert np.abs(a - b).max() < 1e-12

    def test_rows_sum_to_one_at_large_magnitude(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1e3, 1e3, (20, 9))
        out = T.softmax(T.Tensor(x), axis=-1).data
        assert np.all(out >= 0)
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-12

    def test_outputs_positive_at_moderate_magnitude(self):
        rng = np.random.default_rng(4)
        out = T.softmax(T.Tensor(rng.uniform(-30, 30, (10, 6))), axis=-1).data
        assert np.all(out > 0)

    def test_empty_axis_raises(self):
        with pytest.raises(ShapeError):
            T.softmax(T.Tensor(np.zeros((2, 0))), axis=-1)


class TestGradCheck:
    def test_quadratic_exact(self):
        x = T.Tensor([1.0, 2.0])
        leaf = T.Tensor(x.data, requires_grad=True)
        y = T.tsum(T.mul(leaf, leaf))
        y.backward()
        assert np.allclose(leaf.grad, [2.0, 4.0], atol=1e-15)
        assert T.grad_check(lambda t: T.tsum(T.mul(t, t)), x) < 1e-6

    def test_softmax_dot(self):
        rng = np.random.default_rng(2)
        w = T.Tensor(rng.standard_normal(8))
        err = T.grad_check(lambda t: T.tsum(T.mul(T.softmax(t, axis=-1), w)),
                           T.Tensor(rng.standard_normal(8)))
        assert err < 1e-4

    def test_masked_mse(self):
        rng = np.random.default_rng(3)
        target = rng.standard_normal((4, 4))
        mask = (rng.random((4, 4)) > 0.5).astype(float)
        mask[0, 0] = 1.0
        err = T.grad_check(lambda t: masked_mse(t, target, mask),
                           T.Tensor(rng.standard_normal((4, 4))))
        assert err < 1e-4

    def test_eps_range_enforced(self):
        with pytest.raises(ContractError):
            T.grad_check(lambda t: T.tsum(t), T.Tensor([1.0]), eps=1e-2)

    def test_non_scalar_fn_rejected(self):
        with pytest.raises(ContractError):
            T.grad_check(lambda t: t, T.Tensor([1.0, 2.0]))


class TestRegisteredOpGradients:
    def test_every_registered_op(self):
        from mmdit.verify import suite_grad

        for name, ok, detail in suite_grad():
            assert ok, f"{name}: {detail}"


class TestTensorBasics:
    def test_finite_invariant_on_construction(self):
        with pytest.raises(ContractError):
            T.Tensor([1.0, np.nan])
        with pytest.raises(ContractError):
            T.Tensor([np.inf])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_producing_ops_raise(self):
        with pytest.raises(ContractError):
            T.exp(T.Tensor([1e4]))
        with pytest.raises(ContractError):
            T.log(T.Tensor([0.0]))
        with pytest.raises(ContractError):
            T.sqrt(T.Tensor([-1.0]))
        with pytest.raises(ContractError):
            T.div(T.Tensor([1.0]), T.Tensor([0.0]))

    def test_shape_data_invariant(self):
        t = T.Tensor(np.zeros((3, 5)))
        assert int(np.prod(t.shape)) == t.data.size

    def test_tape_cleared_after_backward(self):
        a = T.Tensor([1.0, 2.0], requires_grad=True)
        y = T.tsum(T.mul(a, a))
        assert y._parents is not None
        y.backward()
        assert y._parents is None and y._vjp is None
        assert a.grad is not None

    def test_backward_requires_scalar(self):
        a = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            T.mul(a, a).backward()

    def test_no_grad_suppresses_tape(self):
        a = T.Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = T.mul(a, a)
        assert y._parents is None and not y.requires_grad

    def test_grad_accumulates_across_backwards(self):
        a = T.Tensor([1.0, 2.0], requires_grad=True)
        T.tsum(T.mul(a, a)).backward()
        first = a.grad.copy()
        T.tsum(T.mul(a, a)).backward()
        assert np.array_equal(a.grad, 2 * first)

    def test_elementwise_requires_same_shape(self):
        with pytest.raises(ShapeError):
            T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((3, 2))))
        with pytest.raises(ShapeError):
            T.broadcast_mul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2,))))
