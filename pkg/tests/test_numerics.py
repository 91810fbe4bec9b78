import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foodbridge.numerics import (AdamState, DimensionError, MissingGradientError, NumericError, Tensor, adam_step,
                                 backward, concat, cross_entropy, embedding, finite_difference, gelu, layer_norm,
                                 matmul, mse, softmax, tanh)


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def triple_loop(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 4))
    np.testing.assert_allclose(matmul(leaf(a), leaf(b)).data, triple_loop(a, b), rtol=1e-12)


def test_matmul_batched_activation_times_weight():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3, 5)), rng.normal(size=(5, 4))
    out = matmul(leaf(a), leaf(b)).data
    for i in range(2):
        np.testing.assert_allclose(out[i], triple_loop(a[i], b), rtol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError, match=r"\(2, 3\) x \(4, 2\)"):
        matmul(leaf(np.ones((2, 3))), leaf(np.ones((4, 2))))


def test_softmax_rows():
    x = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    y = softmax(leaf(x)).data
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(y[0], e / e.sum(), rtol=1e-12)
    np.testing.assert_allclose(y[1], [1 / 3] * 3, rtol=1e-12)


def test_softmax_large_logits_stay_finite():
    y = softmax(leaf([[1000.0, 0.0]])).data
    np.testing.assert_allclose(y, [[1.0, 0.0]], atol=1e-300)


def test_layer_norm_formula():
    x = np.array([[1.0, 2.0, 4.0, 7.0]])
    g, b = np.array([1.0, 2.0, 0.5, 1.0]), np.array([0.0, 1.0, 0.0, -1.0])
    mu, var = x.mean(), x.var()
    want = (x - mu) / math.sqrt(var + 1e-5) * g + b
    np.testing.assert_allclose(layer_norm(leaf(x), leaf(g), leaf(b)).data, want, rtol=1e-12)


def test_cross_entropy_sums_masked_rows():
    logits = np.log(np.array([[[0.5, 0.25, 0.25], [0.1, 0.8, 0.1]]]))
    nll = cross_entropy(leaf(logits), np.array([[0, 1]]), np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(nll.data, [-math.log(0.5)], rtol=1e-12)


def test_mse_identity_and_ones():
    a = np.random.default_rng(2).normal(size=(1, 3, 4))
    assert mse(leaf(a), a).data[0] == 0.0
    np.testing.assert_allclose(mse(leaf(np.ones((1, 3, 4))), np.zeros((1, 3, 4))).data, [1.0])


def _check_grad(build, *arrays, tol=1e-6):
    leaves = {f"x{i}": leaf(a.copy()) for i, a in enumerate(arrays)}
    loss = build(*leaves.values())
    grads = backward(loss, leaves)
    for i, a in enumerate(arrays):
        work = a.copy()
        others = [arrays[j] for j in range(len(arrays))]

        def f():
            others[i] = work
            return float(build(*[Tensor(o) for o in others]).data)

        fd = finite_difference(f, work)
        np.testing.assert_allclose(grads[f"x{i}"], fd, rtol=tol, atol=tol)


RNG = np.random.default_rng(3)


@pytest.mark.parametrize("name,build,shapes", [
    ("matmul", lambda a, b: (matmul(a, b) * matmul(a, b)).sum(), [(3, 4), (4, 2)]),
    ("batched", lambda a, b: tanh(matmul(a, b)).sum(), [(2, 3, 4), (4, 5)]),
    ("broadcast_add", lambda a, b: ((a + b) * (a + b)).sum(), [(3, 4), (4,)]),
    ("gelu", lambda a: gelu(a).sum(), [(5, 3)]),
    ("softmax", lambda a, b: (softmax(a) * b).sum(), [(2, 5), (2, 5)]),
    ("layer_norm", lambda x, g, b: (layer_norm(x, g, b) * layer_norm(x, g, b)).sum(), [(3, 6), (6,), (6,)]),
    ("concat", lambda a, b: (concat([a, b], axis=0) * concat([b, a], axis=0)).sum(), [(2, 3), (2, 3)]),
    ("gather", lambda a: (a[np.array([0, 2, 0])] * a[np.array([1, 1, 2])]).sum(), [(3, 4)]),
    ("transpose", lambda a: (a.transpose(1, 0) @ a).sum(), [(3, 2)]),
])
def test_gradients_match_finite_differences(name, build, shapes):
    _check_grad(build, *[RNG.normal(size=s) for s in shapes])


def test_embedding_gradient_accumulates_repeats():
    table = leaf(np.zeros((4, 2)))
    out = embedding(table, np.array([[1, 1, 3]]))
    g = backward(out.sum(), {"t": table})["t"]
    np.testing.assert_array_equal(g, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_cross_entropy_gradient():
    logits = RNG.normal(size=(2, 3, 5))
    targets = np.array([[0, 4, 2], [1, 1, 3]])
    mask = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 1.0]])
    _check_grad(lambda x: cross_entropy(x, targets, mask).sum(), logits)


def test_backward_unreachable_leaf_gets_zeros():
    a, b = leaf(np.ones(3)), leaf(np.ones(2))
    g = backward((a * a).sum(), {"a": a, "b": b})
    np.testing.assert_array_equal(g["b"], np.zeros(2))
    np.testing.assert_array_equal(g["a"], 2 * np.ones(3))


def test_backward_rejects_non_leaf_and_frozen():
    a = leaf(np.ones(3))
    mid = a * 2.0
    with pytest.raises(MissingGradientError):
        backward(mid.sum(), {"mid": mid})
    with pytest.raises(MissingGradientError):
        backward(mid.sum(), {"c": Tensor(np.ones(3))})


def test_non_finite_raises():
    with pytest.raises(NumericError):
        leaf([1.0]) * np.inf
    with pytest.raises(NumericError):
        Tensor(np.array([np.nan]))


def test_adam_two_steps_by_hand():
    p = np.array([1.0, -2.0])
    g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.3])
    st = AdamState.zeros_like(p, lr=0.1, beta1=0.9, beta2=0.95, eps=1e-8)
    p1, st = adam_step(p, g1, st)
    p2, st = adam_step(p1, g2, st)
    m, v, want = np.zeros(2), np.zeros(2), p.copy()
    for t, g in ((1, g1), (2, g2)):
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        want = want - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.95 ** t)) + 1e-8)
    np.testing.assert_allclose(p2, want, rtol=1e-14)
    assert st.t == 2


def test_adam_first_step_moves_by_lr():
    # bias correction makes the first update lr * sign(g)
    p, _ = adam_step(np.zeros(3, np.float32), np.array([3.0, -0.2, 1e-3], np.float32),
                     AdamState.zeros_like(np.zeros(3, np.float32), lr=0.01))
    np.testing.assert_allclose(p, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_deterministic_and_pure():
    p, g = np.ones(4, np.float32), np.arange(4, dtype=np.float32)
    st = AdamState.zeros_like(p)
    a = adam_step(p, g, st)
    b = adam_step(p, g, st)
    assert a[0].tobytes() == b[0].tobytes()
    assert st.t == 0 and not st.m.any()


def test_adam_zero_lr_keeps_params():
    p = np.arange(3, dtype=np.float32)
    new, _ = adam_step(p, np.ones(3, np.float32), AdamState.zeros_like(p, lr=0.0))
    np.testing.assert_array_equal(new, p)


@settings(max_examples=40, deadline=None)
@given(rows=st.integers(1, 4), cols=st.integers(1, 4), keep=st.sampled_from(["row", "col", "scalar"]))
def test_broadcast_gradient_shapes(rows, cols, keep):
    a = leaf(np.ones((rows, cols)))
    shape = {"row": (cols,), "col": (rows, 1), "scalar": ()}[keep]
    b = leaf(np.full(shape, 2.0))
    g = backward((a * b).sum(), {"a": a, "b": b})
    assert g["b"].shape == shape
    np.testing.assert_allclose(g["b"].sum(), rows * cols)
