import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.signal import correlate2d

from lrtrack import tensor as T
from lrtrack.gradcheck import grad_check
from lrtrack.tensor import Parameter, ShapeError, Tape, TapeError


def P(rng, *shape, name="p", scale=1.0):
    return Parameter(scale * rng.normal(size=shape), name)


# ---------------------------------------------------------------- forward


def test_identity_matmul_returns_operand(rng):
    A = rng.normal(size=(3, 5))
    assert np.array_equal(T.matmul(T.constant(np.eye(3)), T.constant(A)).data, A)


def test_softmax_of_zero_row_is_uniform():
    out = T.softmax_rows(T.constant(np.zeros((1, 4)))).data
    assert np.array_equal(out, np.full((1, 4), 0.25))


def test_product_with_ones_is_identity(rng):
    A = rng.normal(size=(4, 3))
    assert np.array_equal(T.mul(T.constant(A), T.constant(np.ones((4, 3)))).data, A)


def test_primitives_match_numpy(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    A, B = T.constant(a), T.constant(b)
    assert np.allclose(T.add(A, B).data, a + b)
    assert np.allclose(T.sub(A, B).data, a - b)
    assert np.allclose(T.mul(A, B).data, a * b)
    assert np.allclose(T.scale(A, -2.5).data, -2.5 * a)
    assert np.allclose(T.transpose(A).data, a.T)
    assert np.allclose(T.sigmoid(A).data, 1 / (1 + np.exp(-a)))
    assert np.allclose(T.relu(A).data, np.maximum(a, 0))
    assert np.allclose(T.rows(A, [2, 0]).data, a[[2, 0]])
    assert np.allclose(T.concat([A, B], axis=1).data, np.hstack([a, b]))
    assert np.allclose(T.concat([A, B], axis=0).data, np.vstack([a, b]))
    assert np.isclose(T.mse(A, b).item(), np.mean((a - b) ** 2))
    d = np.abs(a - b)
    assert np.isclose(T.smooth_l1(A, b).item(), np.mean(np.where(d < 1, 0.5 * d * d, d - 0.5)))
    e = np.exp(a - a.max(axis=1, keepdims=True))
    assert np.allclose(T.softmax_rows(A).data, e / e.sum(axis=1, keepdims=True))


def test_row_and_column_vectors_broadcast(rng):
    a = rng.normal(size=(4, 3))
    assert np.allclose(T.add(T.constant(a), T.constant(np.ones((1, 3)))).data, a + 1)
    assert np.allclose(T.mul(T.constant(a), T.constant(np.full((4, 1), 2.0))).data, 2 * a)


def test_masked_softmax_ignores_masked_keys(rng):
    x = rng.normal(size=(3, 5))
    mask = np.array([True, True, False, True, False])
    out = T.softmax_rows(T.constant(x), mask=mask).data
    assert np.all(out[:, ~mask] == 0.0)
    ref = np.exp(x[:, mask]) / np.exp(x[:, mask]).sum(axis=1, keepdims=True)
    assert np.allclose(out[:, mask], ref)


def test_grouped_conv_matches_scipy_correlation(rng):
    H, W, cin, cout, g = 6, 5, 8, 4, 2
    x, w, b = rng.normal(size=(H * W, cin)), rng.normal(size=(cout, cin // g * 9)), rng.normal(size=(1, cout))
    out = T.conv2d(T.constant(x), T.constant(w), T.constant(b), H, W, groups=g).data
    wr = w.reshape(cout, cin // g, 3, 3)
    for o in range(cout):
        gi = o // (cout // g)
        acc = np.full((H, W), b[0, o])
        for c in range(cin // g):
            acc += correlate2d(x[:, gi * (cin // g) + c].reshape(H, W), wr[o, c], mode="same")
        assert np.allclose(out[:, o], acc.ravel(), atol=1e-12)


@pytest.mark.parametrize(
    "call, prim",
    [
        (lambda: T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3)))), "matmul"),
        (lambda: T.add(T.constant(np.ones((2, 3))), T.constant(np.ones((3, 2)))), "add"),
        (lambda: T.mul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 2)))), "mul"),
        (lambda: T.concat([T.constant(np.ones((2, 3))), T.constant(np.ones((2, 2)))], axis=0), "concat"),
        (lambda: T.mse(T.constant(np.ones((2, 3))), np.ones((3, 2))), "mse"),
        (lambda: T.conv2d(T.constant(np.ones((5, 4))), T.constant(np.ones((4, 9))), T.constant(np.zeros((1, 4))), 2, 2, 4), "conv2d"),
    ],
)
def test_shape_mismatch_names_the_primitive(call, prim):
    with pytest.raises(ShapeError, match=prim):
        call()


def test_identical_inputs_give_bitwise_identical_outputs():
    def run():
        r = np.random.default_rng(9)
        x = T.constant(r.normal(size=(16, 8)))
        w = T.constant(r.normal(size=(8, 8)))
        return T.softmax_rows(T.matmul(T.relu(T.matmul(x, w)), T.transpose(x))).data

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------- backward


def test_quadratic_minimum_has_zero_gradient(rng):
    c = rng.normal(size=(3, 4))
    x = Parameter(c.copy(), "x")
    with Tape() as tape:
        loss = T.mse(x, c)
    assert np.array_equal(tape.backward(loss)[x], np.zeros((3, 4)))


def test_sum_of_product_gradient_is_other_factor(rng):
    A, B = P(rng, 3, 4, name="A"), T.constant(rng.normal(size=(3, 4)))
    with Tape() as tape:
        out = T.mul(A, B)
    g = tape.backward(out, seed=np.ones((3, 4)))[A]
    assert np.array_equal(g, B.data)
    # central differences of sum(A*B)
    h = 1e-5
    num = np.empty_like(A.data)
    for idx in np.ndindex(A.data.shape):
        o = A.data[idx]
        A.data[idx] = o + h
        fp = np.sum(A.data * B.data)
        A.data[idx] = o - h
        fm = np.sum(A.data * B.data)
        A.data[idx] = o
        num[idx] = (fp - fm) / (2 * h)
    assert np.allclose(g, num, rtol=1e-8)


def test_softmax_at_uniform_row_against_zero_sum_seed(rng):
    n = 5
    x = Parameter(np.full((1, n), 0.7), "x")
    seed = rng.normal(size=(1, n))
    seed -= seed.mean()
    with Tape() as tape:
        y = T.softmax_rows(x)
    g = tape.backward(y, seed=seed)[x]
    # Jacobian at a uniform row is (I - 11^T/n)/n
    jac = (np.eye(n) - np.full((n, n), 1.0 / n)) / n
    assert np.allclose(g, seed @ jac, atol=1e-15)
    assert np.allclose(g, seed / n, atol=1e-15)
    report = grad_check(lambda: T.matmul(T.softmax_rows(x), T.constant(seed.T)), [x])
    assert report.passed


def test_softmax_at_uniform_row_kills_constant_seed():
    x = Parameter(np.full((1, 5), -1.3), "x")
    with Tape() as tape:
        y = T.softmax_rows(x)
    g = tape.backward(y, seed=np.full((1, 5), 2.0))[x]
    assert np.allclose(g, 0.0, atol=1e-15)


def test_backward_twice_is_an_error(rng):
    x = P(rng, 2, 2)
    with Tape() as tape:
        y = T.mse(x, np.zeros((2, 2)))
    tape.backward(y)
    with pytest.raises(TapeError):
        tape.backward(y)


def test_new_forward_rearms_the_tape(rng):
    x = P(rng, 2, 2)
    with Tape() as tape:
        y = T.mse(x, np.zeros((2, 2)))
        tape.backward(y)
        y2 = T.mse(x, np.ones((2, 2)))
        g = tape.backward(y2)[x]
    assert np.allclose(g, (x.data - 1) / 2)


def test_unused_tensor_gets_exact_zero_gradient(rng):
    used, unused = P(rng, 2, 3, name="u"), P(rng, 2, 3, name="n")
    with Tape() as tape:
        _ = T.relu(unused)
        y = T.mse(used, np.zeros((2, 3)))
    g = tape.backward(y, wrt=[used, unused])
    assert np.array_equal(g[unused], np.zeros((2, 3)))


def test_nothing_is_recorded_outside_a_tape(rng):
    x = P(rng, 2, 2)
    T.relu(x)
    with Tape() as tape:
        pass
    assert tape.ops == []


def test_backward_is_linear_in_the_seed(rng):
    x, w = P(rng, 4, 3, name="x"), P(rng, 3, 5, name="w")
    seed = rng.normal(size=(4, 5))
    grads = []
    for s in (seed, 2 * seed):
        with Tape() as tape:
            y = T.sigmoid(T.matmul(x, w))
        grads.append(tape.backward(y, seed=s))
    for p in (x, w):
        a, b = grads[0][p], grads[1][p]
        assert np.max(np.abs(b - 2 * a) / np.maximum(np.abs(2 * a), 1e-300)) < 1e-12


# ------------------------------------------------------------- grad_check

CASES = {
    "matmul": (lambda r: [P(r, 3, 4), P(r, 4, 2)], lambda a, b: T.matmul(a, b)),
    "add": (lambda r: [P(r, 3, 4), P(r, 1, 4)], lambda a, b: T.add(a, b)),
    "sub": (lambda r: [P(r, 3, 4), P(r, 3, 1)], lambda a, b: T.sub(a, b)),
    "mul": (lambda r: [P(r, 3, 4), P(r, 3, 4)], lambda a, b: T.mul(a, b)),
    "scale": (lambda r: [P(r, 3, 4)], lambda a: T.scale(a, -1.7)),
    "transpose": (lambda r: [P(r, 3, 4)], lambda a: T.transpose(a)),
    "softmax_rows": (lambda r: [P(r, 3, 5)], lambda a: T.softmax_rows(a)),
    "masked_softmax": (lambda r: [P(r, 3, 5)], lambda a: T.softmax_rows(a, mask=[True, False, True, True, False])),
    "sigmoid": (lambda r: [P(r, 3, 4)], lambda a: T.sigmoid(a)),
    "relu": (lambda r: [P(r, 3, 4)], lambda a: T.relu(a)),
    "rows": (lambda r: [P(r, 5, 3)], lambda a: T.rows(a, [4, 1, 1, 0])),
    "concat": (lambda r: [P(r, 2, 3), P(r, 2, 2)], lambda a, b: T.concat([a, b], axis=1)),
    "mse": (lambda r: [P(r, 3, 4)], lambda a: T.mse(a, np.zeros((3, 4)))),
    "smooth_l1": (lambda r: [P(r, 3, 4, scale=2.0)], lambda a: T.smooth_l1(a, np.zeros((3, 4)))),
    "conv2d": (
        lambda r: [P(r, 12, 4), P(r, 4, 18), P(r, 1, 4)],
        lambda x, w, b: T.conv2d(x, w, b, 3, 4, groups=2),
    ),
}


def _scalarize(out, r):
    """Random linear read-out so every output entry influences the check."""
    v = T.constant(r.normal(size=(out.shape[1], 1)))
    u = T.constant(r.normal(size=(1, out.shape[0])))
    return T.matmul(T.matmul(u, out), v)


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients_on_50_seeded_instances(name):
    make, op = CASES[name]
    worst = 0.0
    for seed in range(50):
        r = np.random.default_rng(seed)
        params = make(r)
        if name == "relu":  # keep away from the kink
            params[0].data[np.abs(params[0].data) < 1e-3] = 0.5
        if name == "smooth_l1":
            params[0].data[np.abs(np.abs(params[0].data) - 1.0) < 1e-3] = 0.5
        readout = np.random.default_rng(1000 + seed)
        out_shape = op(*params).shape
        u = T.constant(readout.normal(size=(1, out_shape[0])))
        v = T.constant(readout.normal(size=(out_shape[1], 1)))
        report = grad_check(lambda: T.matmul(T.matmul(u, op(*params)), v), params)
        assert report.passed, f"seed {seed}\n{report}"
        worst = max(worst, report.max_rel_error)
    assert worst < 1e-4


def test_linear_layer_passes_grad_check(rng):
    x = T.constant(rng.normal(size=(6, 4)))
    w, b = P(rng, 4, 3, name="w"), P(rng, 1, 3, name="b")
    report = grad_check(lambda: T.mse(T.add(T.matmul(x, w), b), np.ones((6, 3))), [w, b], tolerance=1e-4)
    assert report.passed and report.max_rel_error < 1e-4


def test_corrupted_backward_rule_is_caught(rng, monkeypatch):
    x, w = T.constant(rng.normal(size=(5, 3))), P(rng, 3, 2, name="w")

    def fn():
        return T.mse(T.sigmoid(T.matmul(x, w)), np.zeros((5, 2)))

    assert grad_check(fn, [w]).passed
    original = T.Sigmoid.backward
    monkeypatch.setattr(T.Sigmoid, "backward", staticmethod(lambda ctx, g: [-gi for gi in original(ctx, g)]))
    report = grad_check(fn, [w])
    assert not report.passed
    assert report.failures()[0].name == "w"


def test_non_finite_difference_is_reported_with_location(rng):
    w = P(rng, 2, 2, name="w")
    w0 = w.data.copy()

    def fn():
        if w.data[1, 0] != w0[1, 0]:
            return T.constant([[np.inf]])
        return T.mse(w, np.zeros((2, 2)))

    report = grad_check(fn, [w])
    assert not report.passed
    bad = report.failures()[0]
    assert not bad.finite and bad.worst_index == (1, 0)


@given(
    n=st.integers(1, 5),
    m=st.integers(1, 5),
    k=st.integers(1, 5),
    seed=st.integers(0, 2**31 - 1),
)
def test_matmul_chain_gradients_property(n, m, k, seed):
    r = np.random.default_rng(seed)
    a, b = P(r, n, m, name="a"), P(r, m, k, name="b")
    report = grad_check(lambda: T.mse(T.sigmoid(T.matmul(a, b)), np.full((n, k), 0.3)), [a, b])
    assert report.passed, str(report)


def test_init_uniform_respects_fan_in_bound():
    p = T.init_uniform(np.random.default_rng(0), 64, 32, 32, "w")
    assert p.shape == (64, 32)
    assert np.all(np.abs(p.data) <= 1 / np.sqrt(32))
    q = T.init_uniform(np.random.default_rng(0), 64, 32, 32, "w")
    assert np.array_equal(p.data, q.data)
