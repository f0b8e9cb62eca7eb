import numpy as np
import pytest
from hypothesis import given, strategies as st

from gnasforge import tensor as T
from gnasforge.tensor import Tensor, ParameterStore, ShapeError
from gnasforge.gradcheck import finite_difference_check


def test_matmul_identity():
    x = np.arange(12.0).reshape(3, 4)
    out = T.matmul(Tensor(np.eye(3)), Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_segment_sum_direct():
    out = T.segment_sum(Tensor([[1.0, 2.0], [3.0, 4.0]]), np.array([0, 0]), 1)
    np.testing.assert_array_equal(out.data, [[4.0, 6.0]])


def test_segment_max_forward_and_backward_routing():
    v = Tensor([[1.0], [5.0], [2.0]], requires_grad=True)
    out = T.segment_max(v, np.array([0, 0, 0]), 1)
    np.testing.assert_array_equal(out.data, [[5.0]])
    T.tsum(out).backward()
    np.testing.assert_array_equal(v.grad, [[0.0], [1.0], [0.0]])


def test_square_sum_gradient():
    x = Tensor([3.0], requires_grad=True)
    T.tsum(T.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_sigmoid_gradient_at_zero():
    x = Tensor(0.0, requires_grad=True)
    T.sigmoid(x).backward()
    np.testing.assert_allclose(x.grad, 0.25, atol=1e-15)


def test_random_composite_finite_difference():
    rng = np.random.default_rng(5)
    w1 = Tensor(rng.standard_normal((4, 4)))
    w2 = Tensor(rng.standard_normal((4, 4)))

    def f(x):
        h = T.tanh(T.matmul(x, w1))
        s = T.softmax_rows(T.matmul(h, w2))
        return T.tsum(T.mul(s, w1))

    err = finite_difference_check(f, rng.standard_normal((4, 4)))
    assert err < 1e-4


def test_backward_linearity():
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((3, 3))
    a, b = 1.7, -0.4

    def grad_of(fn):
        x = Tensor(x0, requires_grad=True)
        fn(x).backward()
        return x.grad.copy()

    f = lambda x: T.tsum(T.tanh(x))
    g = lambda x: T.tsum(T.mul(x, x))
    combined = grad_of(lambda x: T.scale(f(x), a) + T.scale(g(x), b))
    np.testing.assert_allclose(combined, a * grad_of(f) + b * grad_of(g), atol=1e-10)


def test_segment_mean_matches_sum_over_counts():
    rng = np.random.default_rng(2)
    vals = rng.standard_normal((6, 3))
    seg = np.array([0, 0, 1, 1, 1, 3])   # segment 2 is empty
    mean = T.segment_mean(Tensor(vals), seg, 4).data
    sums = T.segment_sum(Tensor(vals), seg, 4).data
    counts = np.bincount(seg, minlength=4)
    for s in range(4):
        if counts[s]:
            np.testing.assert_allclose(mean[s], sums[s] / counts[s])
        else:
            np.testing.assert_array_equal(mean[s], 0.0)


def test_empty_segment_max_is_zero():
    out = T.segment_max(Tensor([[2.0]]), np.array([1]), 3)
    np.testing.assert_array_equal(out.data, [[0.0], [2.0], [0.0]])


def test_shape_mismatch_names_primitive_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        T.gather_rows(Tensor(np.zeros((2, 2))), np.array([2]))


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.mul(x, x).backward()


def test_non_trainable_leaf_gets_no_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    T.tsum(T.mul(x, c)).backward()
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])
    assert c.grad is None


def test_row_vector_broadcast():
    row = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    big = Tensor(np.ones((3, 2)))
    T.tsum(T.add(big, row)).backward()
    np.testing.assert_array_equal(row.grad, [[3.0, 3.0]])


def test_finite_difference_constant_gradient():
    assert finite_difference_check(T.tsum, np.array([1.0, -2.0, 0.5])) < 1e-10


def test_finite_difference_tanh_at_zero():
    err = finite_difference_check(lambda x: T.tsum(T.tanh(x)), np.zeros(4))
    assert err < 1e-8
    x = Tensor(np.zeros(4), requires_grad=True)
    T.tsum(T.tanh(x)).backward()
    np.testing.assert_allclose(x.grad, 1.0)


def test_detach_blocks_gradient():
    x = Tensor([2.0], requires_grad=True)
    y = T.mul(x, x).detach()
    loss = T.tsum(T.mul(y, x))
    loss.backward()
    np.testing.assert_allclose(x.grad, [4.0])   # only the attached factor


def test_checkpoint_roundtrip(tmp_path):
    store = ParameterStore()
    rng = np.random.default_rng(3)
    store.add("layer0/W", rng.standard_normal((3, 4)))
    store.add("controller/z", rng.standard_normal((1, 8)), group="a_micro")
    store.save(tmp_path / "ckpt", extra_meta={"step": 17})

    other = ParameterStore()
    extra = other.load(tmp_path / "ckpt")
    assert extra == {"step": 17}
    for name in store.names():
        np.testing.assert_array_equal(other[name].data, store[name].data)
        assert other.group_of(name) == store.group_of(name)


@given(st.lists(st.lists(st.floats(-50, 50), min_size=3, max_size=3), min_size=1, max_size=6))
def test_softmax_rows_is_distribution(rows):
    out = T.softmax_rows(Tensor(np.array(rows))).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8),
       st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_add_commutes(a, b):
    n = min(len(a), len(b))
    x, y = np.array(a[:n]), np.array(b[:n])
    np.testing.assert_array_equal(T.add(Tensor(x), Tensor(y)).data,
                                  T.add(Tensor(y), Tensor(x)).data)
