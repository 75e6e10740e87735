import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dgvae.numerics import (
    AdamState,
    SparseMatrix,
    Tensor,
    adam_step,
    backward,
    gradcheck,
    l2_normalize,
    softmax,
    softplus,
    sparse_dense_matmul,
)
from dgvae.numerics import tensor as T
from dgvae.numerics.sparse import dense_sparse_matmul

finite = st.floats(-5, 5, allow_nan=False)


def sequential_dense_product(a, x):
    """Oracle: dense product with an explicit ascending-index sum."""
    out = np.zeros((a.shape[0], x.shape[1]))
    for i in range(a.shape[0]):
        for c in range(x.shape[1]):
            acc = 0.0
            for j in range(a.shape[1]):
                if a[i, j] != 0.0:
                    acc += a[i, j] * x[j, c]
            out[i, c] = acc
    return out


# -- sparse_dense_matmul ---------------------------------------------------

def test_spmm_identity():
    s = SparseMatrix.identity(2)
    out = sparse_dense_matmul(s, [[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(out.data, [[1, 2], [3, 4]])


def test_spmm_permutation():
    s = SparseMatrix.from_dense([[0, 1], [1, 0]])
    out = sparse_dense_matmul(s, np.eye(2))
    assert np.array_equal(out.data, [[0, 1], [1, 0]])


@pytest.mark.parametrize("seed", range(5))
def test_spmm_matches_densified_product(seed):
    rng = np.random.default_rng(seed)
    dense = rng.normal(size=(5, 5)) * (rng.random((5, 5)) < 0.3)
    x = rng.normal(size=(5, 3))
    s = SparseMatrix.from_dense(dense)
    out = sparse_dense_matmul(s, x).data
    assert np.array_equal(out, sequential_dense_product(dense, x))
    np.testing.assert_allclose(out, dense @ x, rtol=1e-14, atol=1e-14)


def test_dense_sparse_matches_sequential():
    rng = np.random.default_rng(3)
    dense = rng.normal(size=(6, 4)) * (rng.random((6, 4)) < 0.5)
    x = rng.normal(size=(3, 6))
    out = dense_sparse_matmul(x, SparseMatrix.from_dense(dense)).data
    assert np.array_equal(out, sequential_dense_product(dense.T, x.T).T)


def test_spmm_shape_mismatch():
    with pytest.raises(ValueError):
        sparse_dense_matmul(SparseMatrix.identity(3), np.ones((2, 2)))


def test_sparse_invariants():
    s = SparseMatrix.from_triples(3, 3, [2, 0, 0, 1], [1, 2, 0, 1], [1.0, 0.0, 5.0, -2.0])
    r, c, v = s.triples()
    assert list(zip(r, c)) == [(0, 0), (1, 1), (2, 1)]
    assert np.all(v != 0)
    with pytest.raises(ValueError):
        s.data[0] = 3.0


# -- softmax / softplus / l2_normalize --------------------------------------

def test_softmax_examples():
    assert np.allclose(softmax([0.0, 0.0]).data, [0.5, 0.5])
    e = math.e
    np.testing.assert_allclose(softmax([1.0, 0.0]).data, [e / (e + 1), 1 / (e + 1)], rtol=1e-14)
    big = softmax([1000.0, 0.0]).data
    assert abs(big[0] - 1.0) < 1e-12 and abs(big[1]) < 1e-12


def test_softmax_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        softmax([1.0, 2.0], temperature=0.0)


@given(arrays(np.float64, (3, 4), elements=finite), st.floats(-50, 50), st.floats(0.05, 5))
def test_softmax_sums_to_one_and_shift_invariant(x, c, tau):
    a = softmax(x, axis=1, temperature=tau).data
    b = softmax(x + c, axis=1, temperature=tau).data
    assert np.all(np.abs(a.sum(axis=1) - 1.0) < 1e-12)
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_softplus_examples():
    assert abs(softplus(0.0).item() - math.log(2)) < 1e-15
    assert abs(softplus(100.0).item() - 100.0) < 1e-12
    assert abs(softplus(-2.0).item() - math.log1p(math.exp(-2))) < 1e-15
    assert abs(softplus(-2.0).item() - 0.126928) < 1e-6


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize([3.0, 4.0]).data, [0.6, 0.8])
    assert np.array_equal(l2_normalize([0.0, 0.0]).data, [0.0, 0.0])
    np.testing.assert_allclose(l2_normalize([1.0, 1.0, 1.0, 1.0]).data, [0.5] * 4)


# -- Adam ---------------------------------------------------------------------

def test_adam_single_step():
    theta = np.zeros(1)
    state = AdamState.for_params([theta], lr=0.001)
    adam_step([theta], [np.ones(1)], state)
    assert abs(theta[0] + 0.001) < 1e-10
    assert state.step == 1


def test_adam_zero_gradient_is_identity():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=(3, 2))
    before = theta.copy()
    state = AdamState.for_params([theta])
    for _ in range(10):
        adam_step([theta], [np.zeros_like(theta)], state)
    assert np.array_equal(theta, before)


def test_adam_deterministic():
    rng = np.random.default_rng(1)
    grads = [rng.normal(size=(4,)) for _ in range(20)]
    a, b = np.ones(4), np.ones(4)
    sa, sb = AdamState.for_params([a]), AdamState.for_params([b])
    for g in grads:
        adam_step([a], [g], sa)
        adam_step([b], [g.copy()], sb)
    assert a.tobytes() == b.tobytes()


def test_adam_shape_mismatch():
    theta = np.zeros(2)
    state = AdamState.for_params([theta])
    with pytest.raises(ValueError):
        adam_step([theta], [np.zeros(3)], state)


# -- gradient checks ----------------------------------------------------------

def test_gradcheck_quadratic():
    theta = Tensor(np.random.default_rng(0).normal(size=(5,)), requires_grad=True)
    report = gradcheck(lambda: 0.5 * T.tsum(theta * theta), [theta], h=1e-5, tol=1e-8)
    assert report.passed, report.table()


def test_gradcheck_constant_loss():
    theta = Tensor(np.ones(3), requires_grad=True)
    const = Tensor(2.0)
    loss_fn = lambda: const * 3.0 + 0.0 * T.tsum(theta)  # noqa: E731
    report = gradcheck(loss_fn, [theta])
    backward(loss_fn())
    assert np.all(np.abs(theta.grad) < 1e-10)
    assert report.params[0].max_abs_err < 1e-10


def test_gradcheck_non_finite_loss():
    theta = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(FloatingPointError):
        gradcheck(lambda: T.tsum(T.log(theta - 1.0)), [theta])


def _prim_loss(name, x, aux):
    """Scalar loss through one primitive; weights break symmetry."""
    w = Tensor(aux["w"])
    if name == "exp":
        y = T.exp(x)
    elif name == "log":
        y = T.log(T.exp(x) + 1.0)
    elif name == "tanh":
        y = T.tanh(x)
    elif name == "sigmoid":
        y = T.sigmoid(x)
    elif name == "softplus":
        y = T.softplus(x)
    elif name == "abs":
        y = T.absolute(x)
    elif name == "sqrt":
        y = T.sqrt(x * x + 1.0)
    elif name == "div":
        y = x / (x * x + 2.0)
    elif name == "softmax":
        y = T.softmax(x, axis=1, temperature=0.8)
    elif name == "log_softmax":
        y = T.log_softmax(x, axis=0, temperature=0.7)
    elif name == "logsumexp":
        y = T.logsumexp(x, axis=1, keepdims=True) * x
    elif name == "l2_normalize":
        y = T.l2_normalize(x, axis=1)
    elif name == "matmul":
        y = T.matmul(x, T.transpose(x))
        w = Tensor(aux["w"] @ aux["w"].T)
    elif name == "bmm":
        x3 = T.reshape(x, (2, 2, 3))
        y = T.reshape(T.matmul(x3, T.swapaxes(x3, 1, 2)), (2, 4))
        w = Tensor(aux["w"][:2, :4] if aux["w"].shape[1] >= 4 else np.ones((2, 4)))
    elif name == "spmm":
        y = sparse_dense_matmul(aux["s"], x)
    elif name == "dsmm":
        y = dense_sparse_matmul(T.transpose(x), aux["s"])
        w = Tensor(aux["w"].T)
    elif name == "stack":
        y = T.stack([x[0], x[1] * 2.0, x[3]], axis=1)
        w = Tensor(np.ones((3, 3)))
    elif name == "concat":
        y = T.concat([x, x * x], axis=1)
        w = Tensor(np.ones((4, 6)))
    elif name == "getitem":
        y = x[:, 1] * x[:, 2] + T.tsum(x[2]) * x[np.array([0, 0, 3]), 0].sum()
        w = Tensor(aux["w"][:, 0])
    elif name == "mean":
        y = T.mean(x * x, axis=0, keepdims=True)
        w = Tensor(np.ones((1, 3)))
    elif name == "clamp":
        y = T.clamp_min(x, -0.31)
    else:
        raise KeyError(name)
    return T.tsum(y * w)


PRIMS = [
    "exp", "log", "tanh", "sigmoid", "softplus", "abs", "sqrt", "div", "softmax",
    "log_softmax", "logsumexp", "l2_normalize", "matmul", "bmm", "spmm", "dsmm",
    "stack", "concat", "getitem", "mean", "clamp",
]


@pytest.mark.parametrize("name", PRIMS)
@pytest.mark.parametrize("seed", range(3))
def test_primitive_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    if name == "abs":
        x.data += np.sign(x.data) * 0.1  # keep clear of the kink
    if name == "clamp":
        x.data[np.abs(x.data + 0.31) < 1e-3] += 0.01
    aux = {
        "w": rng.normal(size=(4, 3)),
        "s": SparseMatrix.from_dense(rng.normal(size=(4, 4)) * (rng.random((4, 4)) < 0.5)),
    }
    report = gradcheck(lambda: _prim_loss(name, x, aux), [x], h=1e-5, tol=1e-6)
    assert report.passed, report.table()


def test_nonfinite_output_raises():
    with pytest.raises(FloatingPointError):
        T.log(Tensor([0.0, 1.0]))


def test_broadcast_gradient_reduces_to_parent_shape():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    backward(T.tsum(a * b))
    assert b.grad.shape == (4,)
    assert np.array_equal(b.grad, [3.0] * 4)
