import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctnn import autodiff as ad
from ctnn.autodiff import Tape, Tensor, backward, gradcheck
from ctnn.errors import DetachedTensor, NonFiniteValue, NotScalarLoss, ShapeMismatch


def R(seed=0):
    return np.random.Generator(np.random.Philox(seed))


def naive_matmul(A, B):
    n, k = A.shape
    m = B.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += A[i, t] * B[t, j]
            out[i, j] = s
    return out


def test_softmax_uniform():
    s = ad.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(s.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_rows_and_mask():
    x = R(1).standard_normal((5, 7)) * 10
    s = ad.softmax(Tensor(x), axis=1).data
    assert np.max(np.abs(s.sum(axis=1) - 1)) <= 1e-12
    mask = np.ones((5, 7), bool)
    mask[0] = False
    mask[1, 3:] = False
    sm = ad.softmax(Tensor(x), axis=1, mask=mask).data
    assert np.all(sm[0] == 0) and np.all(sm[1, 3:] == 0)
    assert abs(sm[1].sum() - 1) <= 1e-12


def test_outer_prelinear_value():
    q, k = np.array([1.0, 2, 3]), np.array([4.0, 5, 6])
    np.testing.assert_array_equal(ad.outer(Tensor(q), Tensor(k)).data, np.outer(q, k))


def test_matmul_naive():
    A, B = R(2).standard_normal((4, 5)), R(3).standard_normal((5, 3))
    out = ad.matmul(Tensor(A), Tensor(B)).data
    ref = naive_matmul(A, B)
    assert np.max(np.abs(out - ref) / np.maximum(1, np.abs(ref))) <= 1e-12


def test_forward_matches_reference():
    rng = R(4)
    x = rng.standard_normal((3, 4))
    y = rng.standard_normal((3, 4))
    checks = {
        "add": (ad.add(Tensor(x), Tensor(y)).data, [[x[i, j] + y[i, j] for j in range(4)] for i in range(3)]),
        "sub": (ad.sub(Tensor(x), Tensor(y)).data, [[x[i, j] - y[i, j] for j in range(4)] for i in range(3)]),
        "mul": (ad.mul(Tensor(x), Tensor(y)).data, [[x[i, j] * y[i, j] for j in range(4)] for i in range(3)]),
        "scalar": (ad.mul(Tensor(x), 2.5).data, [[2.5 * x[i, j] for j in range(4)] for i in range(3)]),
        "tanh": (ad.tanh(Tensor(x)).data, [[np.tanh(x[i, j]) for j in range(4)] for i in range(3)]),
        "sigmoid": (ad.sigmoid(Tensor(x)).data, [[1 / (1 + np.exp(-x[i, j])) for j in range(4)] for i in range(3)]),
        "exp": (ad.exp(Tensor(x)).data, [[np.exp(x[i, j]) for j in range(4)] for i in range(3)]),
        "transpose": (ad.transpose(Tensor(x)).data, [[x[i, j] for i in range(3)] for j in range(4)]),
        "sum": (ad.tsum(Tensor(x), axis=0).data, [sum(x[i, j] for i in range(3)) for j in range(4)]),
        "mean": (ad.mean(Tensor(x)).data, sum(x.ravel()) / 12),
        "reshape": (ad.reshape(Tensor(x), (4, 3)).data, [list(x.ravel()[3 * i:3 * i + 3]) for i in range(4)]),
        "concat": (ad.concat([Tensor(x), Tensor(y)], axis=1).data, [list(x[i]) + list(y[i]) for i in range(3)]),
        "slice": (Tensor(x)[1:, 2].data, [x[1, 2], x[2, 2]]),
    }
    for name, (got, ref) in checks.items():
        ref = np.asarray(ref, dtype=float)
        assert np.max(np.abs(got - ref) / np.maximum(1, np.abs(ref))) <= 1e-12, name
    e = np.exp(x - x.max(axis=1, keepdims=True))
    np.testing.assert_allclose(ad.softmax(Tensor(x), axis=1).data, e / e.sum(axis=1, keepdims=True), rtol=1e-12)
    pred, tgt = x, y
    assert abs(ad.mse_loss(Tensor(pred), Tensor(tgt)).item() - sum(((pred - tgt) ** 2).ravel()) / 12) <= 1e-12
    labels = [0, 3, 1]
    ce = -np.mean([x[i, labels[i]] - np.log(np.exp(x[i]).sum()) for i in range(3)])
    assert abs(ad.cross_entropy(Tensor(x), labels).item() - ce) <= 1e-12


def test_cross_entropy_confident_limit():
    logits = np.array([[50.0, 0.0], [0.0, 50.0]])
    assert ad.cross_entropy(Tensor(logits), [0, 1]).item() < 1e-20


def test_no_broadcasting():
    with pytest.raises(ShapeMismatch):
        ad.add(Tensor(np.ones((3, 1))), Tensor(np.ones((3, 4))))
    with pytest.raises(ShapeMismatch):
        ad.matmul(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 2))))
    # scalars are the one exception
    assert ad.add(Tensor(np.ones((2, 2))), Tensor(1.0)).data.sum() == 8.0


def test_sum_grad_ones():
    x = Tensor(R(5).standard_normal(6), trainable=True)
    with Tape() as tape:
        loss = ad.tsum(x)
    g = backward(tape, loss)
    np.testing.assert_array_equal(g[x], np.ones(6))
    np.testing.assert_array_equal(x.grad, np.ones(6))


def test_mse_grad_closed_form():
    rng = R(6)
    W = Tensor(rng.standard_normal((4, 3)), trainable=True)
    x = rng.standard_normal((3, 1))
    y = rng.standard_normal((4, 1))
    with Tape() as tape:
        loss = ad.mse_loss(ad.matmul(W, Tensor(x)), Tensor(y))
    g = backward(tape, loss)[W]
    expect = 2 / 4 * (W.data @ x - y) @ x.T
    np.testing.assert_allclose(g, expect, rtol=0, atol=1e-14)


def test_backward_errors():
    x = Tensor(np.ones(3), trainable=True)
    with Tape() as tape:
        v = x * 2.0
    with pytest.raises(NotScalarLoss):
        backward(tape, v)
    other = Tape()
    with Tape() as t2:
        loss = ad.tsum(x)
    with pytest.raises(DetachedTensor):
        backward(other, loss)
    backward(t2, loss)
    with pytest.raises(DetachedTensor):
        backward(t2, loss)  # tape freed


def test_no_tape_no_record():
    x = Tensor(np.ones(3), trainable=True)
    y = ad.tsum(x * 3.0)
    assert y._node is None


def test_gradcheck_linear_exact():
    a = R(7).standard_normal(5)
    x = Tensor(R(8).standard_normal(5))
    assert gradcheck(lambda p: ad.tsum(p * a), x, 1e-5) <= 1e-9


def test_gradcheck_nonfinite():
    with pytest.raises(NonFiniteValue), np.errstate(invalid="ignore"):
        gradcheck(lambda p: ad.tsum(ad.log(p)), Tensor([-1.0, 1.0]))


def _composite(p, M1, M2, idx, seg, mask):
    h = ad.tanh(ad.matmul(p, M1))
    z = ad.take(h, idx, axis=0)
    z = ad.segment_sum(z, seg, 3)
    s = ad.softmax(ad.matmul(z, M2), axis=1, mask=mask)
    o = ad.outer(ad.reshape(s[:, 0], (3,)), ad.reshape(h[0], (4,)))
    c = ad.concat([s, ad.sigmoid(z)], axis=1)
    b = ad.broadcast_to(ad.reshape(ad.tsum(c, axis=1), (3, 1)), (3, 4))
    ex = ad.exp(ad.clamp_min(z * 0.1, -0.05))
    return (
        ad.cross_entropy(c, [0, 1, 2])
        + ad.mse_loss(o, b)
        + ad.mean(ex * ex)
        + ad.tsum(ad.transpose(ad.reshape(h, (2, 3, 4)), (2, 0, 1))[1])
    )


@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_composites(seed):
    rng = R(100 + seed)
    M1 = Tensor(rng.standard_normal((3, 4)))
    M2 = Tensor(rng.standard_normal((4, 3)))
    idx = rng.integers(0, 6, size=8)
    seg = rng.integers(0, 3, size=8)
    mask = rng.random((3, 3)) < 0.7
    mask[:, 0] = True
    p = Tensor(rng.standard_normal((6, 3)))
    assert gradcheck(lambda q: _composite(q, M1, M2, idx, seg, mask), p, 1e-5) <= 1e-4
    # gradients also flow into the constant-looking parameters when marked trainable
    assert gradcheck(lambda ms: _composite(p, ms[0], ms[1], idx, seg, mask), [M1, M2], 1e-5) <= 1e-4


def test_batched_matmul_grads():
    rng = R(9)
    A = Tensor(rng.standard_normal((2, 3, 4)))
    B = Tensor(rng.standard_normal((4, 5)))
    C = Tensor(rng.standard_normal((2, 4, 5)))
    D = Tensor(rng.standard_normal((3, 4)))

    def f(ps):
        a, b, c, d = ps
        return ad.tsum(ad.tanh(ad.matmul(a, b))) + ad.tsum(ad.tanh(ad.matmul(a, c))) + ad.tsum(ad.tanh(ad.matmul(d, c)))

    assert gradcheck(f, [A, B, C, D]) <= 1e-6


def test_tape_thread_confined():
    results = {}

    def work(i):
        x = Tensor(np.full(3, float(i)), trainable=True)
        with Tape() as tape:
            loss = ad.tsum(x * x)
        results[i] = backward(tape, loss)[x]

    ts = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    for i in range(4):
        np.testing.assert_array_equal(results[i], np.full(3, 2.0 * i))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_property_softmax_grad(n, m, seed):
    rng = R(seed)
    x = Tensor(rng.standard_normal((n, m)))
    w = rng.standard_normal((n, m))
    assert gradcheck(lambda p: ad.tsum(ad.softmax(p, axis=1) * w), x) <= 1e-6
