import numpy as np
import pytest

from petlab import tensor as T
from petlab.tensor import ContractError, DimensionError, Rng, Tensor
from petlab.verify import grad_check


def test_rng_streams_are_reproducible():
    a = Rng(123).child(7).normal((32,), dtype=np.float64)
    b = Rng(123).child(7).normal((32,), dtype=np.float64)
    assert np.array_equal(a, b)


def test_rng_children_are_independent():
    a = Rng(123).child(1).normal((32,), dtype=np.float64)
    b = Rng(123).child(2).normal((32,), dtype=np.float64)
    assert not np.array_equal(a, b)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        x.backward()


def test_matmul_shape_mismatch_raises():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 2)))
    with pytest.raises(DimensionError):
        T.matmul(a, b)


def test_grad_accumulates_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    loss = T.tsum(T.add(T.mul(x, x), x))  # d/dx (x^2 + x) = 2x + 1
    loss.backward()
    assert np.allclose(x.grad, [5.0])


def test_sigmoid_and_gelu_at_zero():
    z = Tensor(np.zeros((3,)))
    assert np.allclose(T.sigmoid(z).data, 0.5)
    assert np.allclose(T.gelu(z).data, 0.0)


def test_softmax_rows_sum_to_one():
    rng = Rng(5)
    x = Tensor(rng.normal((4, 7), dtype=np.float64))
    s = T.softmax(x, axis=-1).data
    assert np.allclose(s.sum(axis=-1), 1.0)
    assert (s > 0).all()


def test_log_softmax_matches_log_of_softmax():
    rng = Rng(6)
    x = Tensor(rng.normal((3, 5), dtype=np.float64))
    a = T.log_softmax(x, axis=-1).data
    b = np.log(T.softmax(x, axis=-1).data)
    assert np.allclose(a, b, atol=1e-12)


def test_broadcast_rows_and_cols_entries():
    rng = Rng(7)
    v = rng.normal((1, 6), dtype=np.float64)
    u = rng.normal((4, 1), dtype=np.float64)
    R = T.broadcast_rows(Tensor(v), 4).data
    C = T.broadcast_cols(Tensor(u), 6).data
    for i in range(4):
        assert np.array_equal(R[i], v[0])
        assert (C[i] == u[i, 0]).all()


def test_take_rows_scatter_gradient():
    x = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    idx = np.array([1, 1, 3])
    loss = T.tsum(T.take_rows(x, idx))
    loss.backward()
    assert np.array_equal(x.grad, [[0, 0, 0], [2, 2, 2], [0, 0, 0], [1, 1, 1]])


def test_concat_gradient_splits_correctly():
    rng = Rng(8)
    a = Tensor(rng.normal((2, 3), dtype=np.float64), requires_grad=True)
    b = Tensor(rng.normal((2, 2), dtype=np.float64), requires_grad=True)
    w = Tensor(rng.normal((2, 5), dtype=np.float64))
    loss = T.tsum(T.mul(T.concat([a, b], axis=-1), w))
    loss.backward()
    assert np.allclose(a.grad, w.data[:, :3])
    assert np.allclose(b.grad, w.data[:, 3:])


def test_matmul_broadcasting_batch_dims():
    rng = Rng(9)
    a = Tensor(rng.normal((2, 3, 4, 5), dtype=np.float64), requires_grad=True)
    b = Tensor(rng.normal((5, 6), dtype=np.float64), requires_grad=True)
    out = T.matmul(a, b)
    assert out.shape == (2, 3, 4, 6)
    reps = grad_check("batched_matmul", lambda: T.tsum(T.sigmoid(T.matmul(a, b))), [a, b])
    assert all(r.passed for r in reps)


def test_finite_difference_core_ops():
    rng = Rng(10)
    x = Tensor(rng.normal((3, 4), dtype=np.float64), requires_grad=True)
    y = Tensor(rng.normal((4, 3), dtype=np.float64), requires_grad=True)
    builders = [
        lambda: T.tsum(T.sigmoid(T.matmul(x, y))),
        lambda: T.tsum(T.gelu(x)),
        lambda: T.tsum(T.tmean(T.mul(x, x), axis=-1)),
        lambda: T.tsum(T.power(T.add(T.mul(x, x), 1.0), -0.5)),
        lambda: T.tsum(T.mul(T.log_softmax(x, axis=-1), Tensor(np.ones((3, 4))))),
    ]
    for build in builders:
        for rep in grad_check("op", build, [x, y]):
            assert rep.passed, rep
