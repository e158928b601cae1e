import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from t2pose import tensor as tn
from t2pose.tensor import ShapeError, Tensor


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar f at float64 array x."""
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def check_grads(build, *arrays_, tol=1e-6):
    """Compare tape grads of build(*tensors) (made scalar by a weighted sum) to finite differences."""
    rng = np.random.default_rng(0)
    probe = None
    leaves = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays_]
    out = build(*leaves)
    probe = rng.normal(size=out.shape)
    tn.backward(tn.sum_(out * probe))
    for i, leaf in enumerate(leaves):
        def f(x, i=i):
            args = [Tensor(a.astype(np.float64)) for a in arrays_]
            args[i] = Tensor(x)
            return float(np.sum(build(*args).data * probe))
        num = numeric_grad(f, arrays_[i].astype(np.float64))
        np.testing.assert_allclose(leaf.grad, num, rtol=tol, atol=tol)


R = np.random.default_rng(42)


class TestPrimitiveGradients:
    @pytest.mark.parametrize("op", [tn.add, tn.sub, tn.mul, tn.div])
    def test_binary_same_shape(self, op):
        check_grads(op, R.normal(size=(3, 4)), R.uniform(0.5, 2, size=(3, 4)))

    @pytest.mark.parametrize("op", [tn.add, tn.sub, tn.mul, tn.div])
    def test_binary_suffix_broadcast(self, op):
        check_grads(op, R.normal(size=(2, 3, 4)), R.uniform(0.5, 2, size=(4,)))
        check_grads(op, R.uniform(0.5, 2, size=(4,)), R.uniform(0.5, 2, size=(2, 3, 4)))

    @pytest.mark.parametrize("op", [tn.exp, tn.sigmoid, tn.tanh, tn.gelu, tn.softplus, tn.square, tn.neg])
    def test_unary(self, op):
        check_grads(op, R.normal(size=(3, 5)))

    def test_log(self):
        check_grads(tn.log, R.uniform(0.2, 3, size=(4,)))

    def test_matmul_2d(self):
        check_grads(tn.matmul, R.normal(size=(3, 4)), R.normal(size=(4, 2)))

    def test_matmul_batched_by_matrix(self):
        check_grads(tn.matmul, R.normal(size=(2, 3, 4)), R.normal(size=(4, 5)))

    def test_matmul_batched_by_batched(self):
        check_grads(tn.matmul, R.normal(size=(2, 2, 3, 4)), R.normal(size=(2, 2, 4, 3)))

    def test_reductions(self):
        check_grads(lambda a: tn.sum_(a, axis=1), R.normal(size=(3, 4)))
        check_grads(lambda a: tn.mean(a, axis=0, keepdims=True), R.normal(size=(3, 4)))
        check_grads(lambda a: tn.mean(a), R.normal(size=(3, 4)))

    @pytest.mark.parametrize("op", [tn.softmax, tn.log_softmax, tn.logsumexp])
    @pytest.mark.parametrize("axis", [0, -1])
    def test_softmax_family(self, op, axis):
        check_grads(lambda a: op(a, axis=axis), R.normal(size=(3, 4)))

    def test_shape_ops(self):
        check_grads(lambda a: tn.reshape(a, (6, 2)), R.normal(size=(3, 4)))
        check_grads(lambda a: tn.transpose(a, (2, 0, 1)), R.normal(size=(2, 3, 4)))
        check_grads(lambda a: tn.broadcast_to(a, (2, 3, 4)), R.normal(size=(3, 1)))
        check_grads(lambda a, b: tn.concat([a, b], axis=1), R.normal(size=(2, 3)), R.normal(size=(2, 2)))

    def test_indexing(self):
        check_grads(lambda a: a[1:, ::2], R.normal(size=(3, 4)))
        check_grads(lambda a: a[np.array([0, 2, 0])], R.normal(size=(3, 4)))
        idx = np.array([[0, 3], [1, 1], [2, 0]])
        check_grads(lambda a: tn.gather(a, idx, axis=1), R.normal(size=(3, 4)))

    def test_masked_fill(self):
        mask = np.array([True, False, False, True])
        check_grads(lambda a: tn.masked_fill(a, mask, 7.0), R.normal(size=(3, 4)))

    def test_layer_norm(self):
        check_grads(tn.layer_norm, R.normal(size=(3, 5)), R.normal(size=(5,)), R.normal(size=(5,)), tol=1e-5)

    def test_l2_normalize(self):
        check_grads(tn.l2_normalize, R.normal(size=(3, 5)))


class TestForwardValues:
    def test_layer_norm_matches_numpy(self):
        x = R.normal(size=(4, 6))
        out = tn.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
        ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
        np.testing.assert_allclose(out, ref, rtol=1e-6, atol=1e-8)

    def test_gelu_reference_points(self):
        # tanh approximation evaluated independently
        x = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
        ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(tn.gelu(Tensor(x)).data, ref, rtol=1e-12)

    def test_softplus_is_stable_for_large_inputs(self):
        out = tn.softplus(Tensor(np.array([-800.0, 800.0]))).data
        np.testing.assert_allclose(out, [0.0, 800.0])

    def test_logsumexp_handles_neg_inf_rows(self):
        out = tn.logsumexp(Tensor(np.array([[-np.inf, 0.0], [1.0, 1.0]]))).data
        np.testing.assert_allclose(out, [0.0, 1.0 + np.log(2)])

    def test_float32_stays_float32(self):
        a = Tensor(np.ones((2, 3), np.float32), requires_grad=True)
        out = tn.mean(tn.gelu(a * 2.0) @ Tensor(np.ones((3, 2), np.float32)))
        assert out.dtype == np.float32
        tn.backward(out)
        assert a.grad.dtype == np.float32


class TestBroadcastRule:
    def test_non_suffix_shapes_rejected(self):
        with pytest.raises(ShapeError, match="trailing-dim"):
            tn.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 1))))

    def test_explicit_broadcast_is_allowed(self):
        b = tn.broadcast_to(Tensor(np.ones((3, 1))), (3, 4))
        assert tn.add(Tensor(np.ones((3, 4))), b).shape == (3, 4)

    def test_scalar_operand(self):
        assert (Tensor(np.ones((2, 2))) * 3.0).shape == (2, 2)

    def test_matmul_shape_errors(self):
        with pytest.raises(ShapeError):
            tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_masked_fill_mask_must_be_suffix(self):
        with pytest.raises(ShapeError):
            tn.masked_fill(Tensor(np.ones((3, 4))), np.ones((3, 1), bool), 0.0)


class TestGraph:
    def test_fan_out_accumulates(self):
        a = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        tn.backward(tn.sum_(a * a + a))
        np.testing.assert_allclose(a.grad, 2 * a.data + 1)

    def test_leaf_grads_accumulate_across_calls(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        tn.backward(tn.sum_(a * 3.0))
        tn.backward(tn.sum_(a * 3.0))
        np.testing.assert_allclose(a.grad, [6.0, 6.0])

    def test_leaf_grad_is_writable_copy(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        tn.backward(tn.sum_(tn.broadcast_to(a, (4,))))
        a.grad[0] = 0.0  # must not raise on a read-only broadcast view
        assert a.grad.flags.owndata

    def test_backward_requires_scalar(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            tn.backward(a * 2.0)

    def test_backward_requires_grad(self):
        with pytest.raises(RuntimeError):
            tn.backward(tn.sum_(Tensor(np.ones(3))))

    def test_no_grad_records_nothing(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with tn.no_grad():
            out = tn.sum_(a * 2.0)
            assert not tn.is_grad_enabled()
        assert tn.is_grad_enabled()
        assert not out.requires_grad and out._parents == ()

    def test_intermediate_grads_freed(self):
        a = Tensor(np.ones(3), requires_grad=True)
        mid = a * 2.0
        tn.backward(tn.sum_(mid))
        assert mid.grad is None and a.grad is not None

    def test_topological_order_parents_first(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = tn.exp(a)
        c = tn.sum_(b * a)
        order = tn.topological_order(c)
        assert order.index(a) < order.index(b) < order.index(c)

    def test_forward_op_dispatch(self):
        a, b = Tensor(np.ones((2, 2))), Tensor(np.eye(2))
        np.testing.assert_allclose(tn.forward_op("matmul", [a, b]).data, np.ones((2, 2)))
        with pytest.raises(ValueError, match="unknown primitive"):
            tn.forward_op("conv2d", [a])


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)),
           arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
    def test_product_rule(self, x, y):
        a, b = Tensor(x, requires_grad=True), Tensor(y, requires_grad=True)
        tn.backward(tn.sum_(a * b))
        np.testing.assert_allclose(a.grad, y)
        np.testing.assert_allclose(b.grad, x)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (2, 5), elements=st.floats(-30, 30)))
    def test_softmax_rows_sum_to_one(self, x):
        np.testing.assert_allclose(tn.softmax(Tensor(x)).data.sum(-1), 1.0, rtol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3)))
    def test_l2_normalize_unit_rows(self, x):
        np.testing.assert_allclose(np.linalg.norm(tn.l2_normalize(Tensor(x)).data, axis=-1), 1.0, rtol=1e-9)


class TestDocumentedExamples:
    def test_matmul_identity(self):
        out = tn.forward_op("matmul", [Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]])])
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_softmax_symmetric(self):
        np.testing.assert_allclose(tn.forward_op("softmax", [Tensor([0.0, 0.0])]).data, [0.5, 0.5])

    def test_log_exp_inverse(self):
        x = np.array([-3.0, 0.0, 2.5], np.float32)
        np.testing.assert_allclose(tn.log(tn.exp(Tensor(x))).data, x, atol=1e-6)

    def test_square_grad(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        tn.backward(x * x)
        assert x.grad == pytest.approx(6.0)

    def test_reuse_grad(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        tn.backward(x + x)
        assert x.grad == pytest.approx(2.0)

    def test_softmax_weighted_sum_f32(self):
        # f32 tape against f64 central differences with h=1e-4
        rng = np.random.default_rng(3)
        x0 = rng.uniform(-2, 2, 6).astype(np.float32)
        c = rng.uniform(-2, 2, 6).astype(np.float32)
        x = Tensor(x0, requires_grad=True)
        tn.backward(tn.sum_(tn.softmax(x) * c))

        def f(v):
            e = np.exp(v - v.max())
            return float(np.sum(e / e.sum() * c))

        num = numeric_grad(f, x0.astype(np.float64), h=1e-4)
        rel = np.abs(x.grad - num) / (np.abs(num) + 1e-8)
        assert rel.max() < 1e-3


class TestFloat32Gradients:
    @pytest.mark.parametrize("op", [tn.exp, tn.sigmoid, tn.tanh, tn.gelu, tn.softplus])
    def test_unary_f32_within_1e3(self, op):
        rng = np.random.default_rng(7)
        x0 = rng.uniform(-2, 2, (3, 4)).astype(np.float32)
        x = Tensor(x0, requires_grad=True)
        tn.backward(tn.sum_(op(x)))
        num = numeric_grad(lambda v: float(np.sum(op(Tensor(v)).data)), x0.astype(np.float64), h=1e-4)
        rel = np.abs(x.grad - num) / (np.abs(num) + 1e-8)
        assert rel.max() < 1e-3


def test_no_grad_forward_is_bit_identical():
    from t2pose.nn import MLP

    mlp = MLP(5, 8, 3, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(4, 5)).astype(np.float32))
    with_grad = tn.softmax(mlp(x)).data
    with tn.no_grad():
        without = tn.softmax(mlp(x)).data
    assert with_grad.tobytes() == without.tobytes()
