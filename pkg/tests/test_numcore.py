from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sfada import numcore as nc
from sfada.numcore import DomainError, ShapeError, Tensor

getcontext().prec = 50

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# matmul

def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 3.0]])
    np.testing.assert_array_equal(nc.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)


def test_matmul_unit_column():
    out = nc.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
    np.testing.assert_array_equal(out.data, [[2], [4]])


def test_matmul_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(nc.matmul(Tensor(a), Tensor(b)).data, ref, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    nc.backward(nc.sum_all(nc.matmul(a, b)))
    g = np.ones((3, 2))
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


# softmax

def test_softmax_symmetric():
    np.testing.assert_allclose(nc.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_large_shift():
    np.testing.assert_allclose(nc.softmax_rows(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])


def test_softmax_high_precision():
    z = [Decimal(1), Decimal(2), Decimal(3)]
    den = sum(v.exp() for v in z)
    ref = [float(v.exp() / den) for v in z]
    np.testing.assert_allclose(nc.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0], ref,
                               rtol=0, atol=1e-12)


@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_rows_sum_to_one(z):
    p = nc.softmax_rows(Tensor(z)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


@given(arrays(np.float64, (3, 5), elements=finite), arrays(np.float64, (3, 1), elements=finite))
def test_softmax_row_shift_invariance(z, c):
    a = nc.softmax_rows(Tensor(z)).data
    b = nc.softmax_rows(Tensor(z + c)).data
    np.testing.assert_allclose(a, b, atol=1e-9)


# log_clamped

def test_log_clamped_values():
    out = nc.log_clamped(Tensor([[1.0, 0.0, 0.5]])).data[0]
    assert out[0] == 0.0
    assert out[1] == np.log(1e-12)
    assert abs(out[2] - float(Decimal("0.5").ln())) < 1e-15


def test_log_clamped_negative():
    with pytest.raises(DomainError):
        nc.log_clamped(Tensor([[0.5, -0.1]]))


# cosine

def test_cosine_self_and_orthogonal():
    u = np.array([[0.6, 0.8]])
    assert abs(nc.cosine_sim_matrix(Tensor(u), Tensor(u)).item() - 1.0) < 1e-9
    assert nc.cosine_sim_matrix(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).item() == 0.0


def test_cosine_pairwise_oracle(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))
    out = nc.cosine_sim_matrix(Tensor(a), Tensor(b)).data
    for i in range(4):
        for j in range(2):
            dot = sum(a[i, k] * b[j, k] for k in range(3))
            na = sum(v * v for v in a[i]) ** 0.5
            nb = sum(v * v for v in b[j]) ** 0.5
            assert abs(out[i, j] - dot / (na * nb + 1e-12)) < 1e-10


def test_cosine_zero_row_is_finite():
    out = nc.cosine_sim_matrix(Tensor([[0.0, 0.0]]), Tensor([[1.0, 2.0]])).data
    assert np.all(np.isfinite(out)) and out[0, 0] == 0.0


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (2, 4), elements=finite))
def test_cosine_bounded(a, b):
    out = nc.cosine_sim_matrix(Tensor(a), Tensor(b)).data
    assert np.all(np.abs(out) <= 1 + 1e-9)


# backward

def test_backward_sum_all_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    nc.backward(nc.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = leaf([[1.0, 2.0]])
    nc.backward(nc.sum_all(nc.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [[2.0, 4.0]])


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        nc.backward(leaf(np.ones((2, 2))))


def test_backward_composition_2x2_jacobian():
    # L = sum(tanh(W x)); dL/dW_ij = (1 - tanh(z_i)^2) x_j, dL/dx_j = sum_i (1 - tanh(z_i)^2) W_ij
    W = leaf([[0.5, -1.0], [2.0, 0.25]])
    x = leaf([[0.3], [-0.7]])
    nc.backward(nc.sum_all(nc.tanh(nc.matmul(W, x))))
    z = [0.5 * 0.3 + -1.0 * -0.7, 2.0 * 0.3 + 0.25 * -0.7]
    s = [1 - np.tanh(z[0]) ** 2, 1 - np.tanh(z[1]) ** 2]
    gW = [[s[0] * 0.3, s[0] * -0.7], [s[1] * 0.3, s[1] * -0.7]]
    gx = [[s[0] * 0.5 + s[1] * 2.0], [s[0] * -1.0 + s[1] * 0.25]]
    np.testing.assert_allclose(W.grad, gW, atol=1e-14)
    np.testing.assert_allclose(x.grad, gx, atol=1e-14)


def test_tape_reverse_order():
    x = leaf([[1.0, 2.0]])
    y = nc.tanh(nc.scale(x, 2.0))
    loss = nc.sum_all(nc.mul(y, y))
    tape = nc.backward(loss)
    seqs = [t._seq for t in tape.nodes]
    assert seqs == sorted(seqs)
    assert tape.ops()[-1] == loss.op
    assert tape.leaves == [x]


def test_shared_subexpression_accumulates():
    x = leaf([[3.0]])
    nc.backward(nc.add(nc.mul(x, x), x))
    assert x.grad[0, 0] == 7.0


# grad_check

def test_grad_check_quadratic(rng):
    x = leaf(rng.normal(size=(2, 3)))
    assert nc.grad_check(lambda: nc.sum_all(nc.mul(x, x)), [x]) < 1e-8


OPS = {
    "matmul": lambda a, b: nc.matmul(a, b),
    "add": lambda a, b: nc.add(a, b),
    "sub": lambda a, b: nc.sub(a, b),
    "mul": lambda a, b: nc.mul(a, b),
    "scale": lambda a, b: nc.scale(a, -1.7),
    "relu": lambda a, b: nc.relu(a),
    "tanh": lambda a, b: nc.tanh(a),
    "sum_rows": lambda a, b: nc.sum_rows(a),
    "mean_rows": lambda a, b: nc.mean_rows(a),
    "mean_all": lambda a, b: nc.mean_all(a),
    "softmax_rows": lambda a, b: nc.softmax_rows(a),
    "log_clamped": lambda a, b: nc.log_clamped(nc.softmax_rows(a)),
    "cosine": lambda a, b: nc.cosine_sim_matrix(a, b),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_grad_check_every_op(name):
    for seed in range(10):
        r = np.random.default_rng(seed)
        a = leaf(r.normal(size=(3, 3)))
        b = leaf(r.normal(size=(3, 3)))
        if name == "relu":  # keep away from the kink
            a.data[np.abs(a.data) < 1e-3] = 0.5
        w = r.normal(size=OPS[name](a, b).shape)

        def f():
            return nc.sum_all(nc.mul(OPS[name](a, b), nc.Tensor(w)))

        assert nc.grad_check(f, [a, b]) < 1e-4, (name, seed)


def test_grad_check_ce_logits(rng):
    z = leaf(rng.normal(size=(5, 4)))
    q = np.eye(4)[rng.integers(0, 4, 5)]

    def f():
        return nc.scale(nc.mean_all(nc.sum_rows(nc.mul(Tensor(q), nc.log_clamped(nc.softmax_rows(z))))), -1)

    assert nc.grad_check(f, [z]) < 1e-4


@given(arrays(np.float64, (2, 3), elements=st.floats(-5, 5)))
def test_tensor_ops_stay_finite(x):
    t = leaf(x)
    out = nc.softmax_rows(nc.tanh(nc.matmul(t, Tensor(np.ones((3, 2))))))
    assert np.all(np.isfinite(out.data))
    nc.backward(nc.sum_all(nc.log_clamped(out)))
    assert t.grad.shape == t.data.shape and np.all(np.isfinite(t.grad))
