import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfsense import autodiff as ad
from conftest import central_difference, rel_err


def _grad1(fn, x):
    tape = ad.Tape()
    v = tape.var(np.asarray(x, dtype=np.float64))
    out = fn(v)
    return out, ad.grad(tape, out, [v])[v]


def test_square_and_sin():
    _, g = _grad1(lambda x: ad.mul(x, x), 3.0)
    assert g == pytest.approx(6.0)
    _, g = _grad1(ad.sin, 0.0)
    assert g == pytest.approx(1.0)


def test_second_order_scalar():
    tape = ad.Tape()
    x = tape.var(2.0)
    y = ad.power(x, 3.0)
    gx = ad.grad(tape, y, [x], create_graph=True)[x]
    assert float(ad.value_of(gx)) == pytest.approx(12.0)
    assert ad.grad(tape, gx, [x])[x] == pytest.approx(12.0)


def test_mixed_second_order():
    tape = ad.Tape()
    x, y = tape.var(1.5), tape.var(-0.5)
    jac = ad.grad_of_grad(tape, ad.mul(x, y), x, [y])
    assert jac[y] == pytest.approx(1.0)


def test_non_scalar_output_rejected():
    tape = ad.Tape()
    x = tape.var(np.ones(3))
    with pytest.raises(ad.AutodiffError):
        ad.grad(tape, ad.mul(x, 2.0), [x])


def test_foreign_node_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    x = t1.var(1.0)
    y = t2.var(2.0)
    with pytest.raises(ad.AutodiffError):
        ad.grad(t1, ad.mul(x, x), [y])


def test_untouched_variable_is_zero():
    tape = ad.Tape()
    x, y = tape.var(np.ones(2)), tape.var(np.ones((2, 2)))
    g = ad.grad(tape, ad.sum(ad.mul(x, x)), [x, y])
    assert np.all(g[y] == 0) and g[y].shape == (2, 2)


def test_relu_second_order_raises():
    tape = ad.Tape()
    x = tape.var(np.array([0.3, -0.2]))
    y = ad.sum(ad.mul(ad.relu(x), ad.relu(x)))
    g = ad.grad(tape, y, [x], create_graph=False)[x]
    assert np.allclose(g, [0.6, 0.0])
    with pytest.raises(ad.UnsupportedOpError):
        ad.grad(tape, y, [x], create_graph=True)


def test_plain_arrays_record_nothing():
    a = ad.add(np.ones(3), 2.0)
    assert isinstance(a, np.ndarray) and np.all(a == 3)


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        tape = ad.Tape()
        x = tape.var(2.0)
        seen["worker"] = isinstance(ad.mul(x, x), ad.Var)

    with ad.no_grad():
        tape = ad.Tape()
        x = tape.var(2.0)
        assert not isinstance(ad.mul(x, x), ad.Var)
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["worker"]


def test_replay_reproduces_values():
    rng = np.random.default_rng(0)
    tape = ad.Tape()
    w = tape.var(rng.normal(size=(4, 3)))
    x = tape.var(rng.normal(size=(5, 4)))
    ad.sum(ad.softplus(ad.matmul(x, w), 100.0))
    assert tape.replay()


# ----------------------------------------------------------------------------
# per-primitive finite-difference checks

UNARY = {
    "exp": (ad.exp, lambda x: x),
    "log": (ad.log, lambda x: np.abs(x) + 0.5),
    "sin": (ad.sin, lambda x: x),
    "cos": (ad.cos, lambda x: x),
    "sqrt": (ad.sqrt, lambda x: np.abs(x) + 0.5),
    "sigmoid": (ad.sigmoid, lambda x: x),
    "softplus": (lambda v: ad.softplus(v, 100.0), lambda x: x),
    "abs": (ad.absolute, lambda x: np.where(np.abs(x) < 0.1, x + 0.3, x)),
    "power": (lambda v: ad.power(v, 2.5), lambda x: np.abs(x) + 0.5),
    "square": (ad.square, lambda x: x),
    "cumsum": (lambda v: ad.cumsum(v, axis=-1), lambda x: x),
    "rcumsum": (lambda v: ad.rcumsum(v, axis=-1), lambda x: x),
    "norm": (lambda v: ad.norm(v, axis=-1, keepdims=True), lambda x: x + 0.2),
    "transpose": (ad.transpose, lambda x: x),
    "reshape": (lambda v: ad.reshape(v, (-1,)), lambda x: x),
    "getitem": (lambda v: v[1:, ::2], lambda x: x),
    "mean": (lambda v: ad.mean(v, axis=0), lambda x: x),
    "clip": (lambda v: ad.clip(v, -0.5, 0.5), lambda x: np.where(np.abs(np.abs(x) - 0.5) < 0.05, x * 0.5, x)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_unary_primitives_match_fd(name, seed):
    op, domain = UNARY[name]
    rng = np.random.default_rng(seed)
    x0 = domain(rng.uniform(-1.5, 1.5, size=(3, 4)))
    w = rng.normal(size=np.shape(op(x0)))

    def f(x):
        return float(np.sum(op(x) * w))

    tape = ad.Tape()
    v = tape.var(x0)
    g = ad.grad(tape, ad.sum(ad.mul(op(v), w)), [v])[v]
    assert rel_err(g, central_difference(f, x0, 1e-6), floor=1e-4) < 1e-5


BINARY = {
    "add": ad.add, "sub": ad.sub, "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.add(ad.absolute(b), 0.5)),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "concat": lambda a, b: ad.concat([a, b], axis=0),
    "stack": lambda a, b: ad.stack([a, b], axis=-1),
    "broadcast": lambda a, b: ad.mul(a, ad.sum(b, axis=0, keepdims=True)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_binary_primitives_match_fd(name, seed):
    op = BINARY[name]
    rng = np.random.default_rng(seed)
    a0 = rng.uniform(-1, 1, size=(3, 4))
    b0 = rng.uniform(-1, 1, size=(3, 4))
    b0 = np.where(np.abs(b0) < 0.05, 0.3, b0)
    w = rng.normal(size=np.shape(op(a0, b0)))
    tape = ad.Tape()
    a, b = tape.var(a0), tape.var(b0)
    g = ad.grad(tape, ad.sum(ad.mul(op(a, b), w)), [a, b])
    ga = central_difference(lambda x: float(np.sum(op(x, b0) * w)), a0, 1e-6)
    gb = central_difference(lambda x: float(np.sum(op(a0, x) * w)), b0, 1e-6)
    assert rel_err(g[a], ga, 1e-4) < 1e-5
    assert rel_err(g[b], gb, 1e-4) < 1e-5


def test_where_routes_gradient():
    cond = np.array([True, False, True])
    tape = ad.Tape()
    a, b = tape.var(np.array([1.0, 2.0, 3.0])), tape.var(np.array([4.0, 5.0, 6.0]))
    g = ad.grad(tape, ad.sum(ad.where(cond, a, b)), [a, b])
    assert np.array_equal(g[a], [1, 0, 1]) and np.array_equal(g[b], [0, 1, 0])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_grad_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1, 1, size=5)

    def f(v):
        return ad.sum(ad.sin(v))

    def g(v):
        return ad.sum(ad.mul(v, v))

    tape = ad.Tape()
    x = tape.var(x0)
    combo = ad.add(ad.mul(f(x), a), ad.mul(g(x), b))
    lhs = ad.grad(tape, combo, [x])[x]
    rhs = a * np.cos(x0) + b * 2 * x0
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_norm_hessian_vector_product():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x0 = rng.normal(size=3)
        if np.linalg.norm(x0) < 0.1:
            continue
        v = rng.normal(size=3)
        tape = ad.Tape()
        x = tape.var(x0)
        gx = ad.grad(tape, ad.norm(x), [x], create_graph=True)[x]
        hv = ad.grad(tape, ad.sum(ad.mul(gx, v)), [x])[x]
        r = np.linalg.norm(x0)
        H = (np.eye(3) - np.outer(x0, x0) / r**2) / r
        assert rel_err(hv, H @ v, 1e-10) < 1e-4


def _mlp(params, x, tape=None):
    h = x
    for k in range(len(params) // 2 - 1):
        h = ad.softplus(ad.add(ad.matmul(h, params[2 * k]), params[2 * k + 1]), 100.0)
    return ad.add(ad.matmul(h, params[-2]), params[-1])


def test_mlp_head_matches_fd():
    rng = np.random.default_rng(0)
    shapes = [(6, 16), (16,), (16, 16), (16,), (16, 1), (1,)]
    p0 = [rng.normal(scale=0.5, size=s) for s in shapes]
    x0 = rng.normal(size=(1, 6))
    tape = ad.Tape()
    x = tape.var(x0)
    ps = [tape.var(p) for p in p0]
    g = ad.grad(tape, ad.sum(_mlp(ps, x)), [x])[x]
    fd = central_difference(lambda xx: float(np.sum(_mlp(p0, xx))), x0, 1e-4)
    assert rel_err(g, fd, 1e-6) < 1e-4


def test_second_order_mlp_gradient_wrt_weights():
    """d(grad_x f)/d theta against finite differences of first-order gradients."""
    rng = np.random.default_rng(1)
    shapes = [(3, 8), (8,), (8, 1), (1,)]
    p0 = [rng.normal(scale=0.7, size=s) for s in shapes]
    x0 = rng.normal(size=(4, 3))
    c = rng.normal(size=(4, 3))

    def grad_x(params):
        tape = ad.Tape()
        x = tape.var(x0)
        ps = [tape.var(p) for p in params]
        return ad.grad(tape, ad.sum(_mlp(ps, x)), [x])[x]

    tape = ad.Tape()
    x = tape.var(x0)
    ps = [tape.var(p) for p in p0]
    gx = ad.grad(tape, ad.sum(_mlp(ps, x)), [x], create_graph=True)[x]
    got = ad.grad(tape, ad.sum(ad.mul(gx, c)), ps)
    for k, p in enumerate(ps):
        def obj(v, k=k):
            params = list(p0)
            params[k] = v
            return float(np.sum(grad_x(params) * c))

        assert rel_err(got[p], central_difference(obj, p0[k], 1e-5), 1e-6) < 1e-3


# ----------------------------------------------------------------------------
# parameter store


def _store():
    s = ad.ParamStore(np.float64)
    s.add("a", np.zeros((2, 3)))
    s.add("b", np.zeros(4))
    return s


def test_segments_cover_vector():
    s = _store()
    spans = sorted((s.slice_of(n).start, s.slice_of(n).stop) for n in s.names())
    assert spans[0][0] == 0 and spans[-1][1] == s.data.size
    assert all(x[1] == y[0] for x, y in zip(spans, spans[1:]))


def test_accumulate_zero_and_cancel():
    s = _store()
    s.accumulate({"a": np.zeros((2, 3))})
    assert np.all(s.reduce() == 0)
    g = np.random.default_rng(0).normal(size=4)
    s.accumulate({"b": g})
    s.accumulate({"b": -g})
    assert np.all(s.reduce() == 0)


def test_accumulate_shape_mismatch():
    with pytest.raises(ValueError):
        _store().accumulate({"a": np.zeros(6)})


def test_permuted_accumulation_is_bitwise_equal():
    rng = np.random.default_rng(0)
    contribs = [{"b": rng.normal(size=4) * 10.0 ** rng.integers(-8, 8)} for _ in range(100)]
    ref = _store()
    seq = np.zeros(4)
    for k, c in enumerate(contribs):
        ref.accumulate(c, key=k)
        seq = seq + c["b"]
    want = ref.reduce().copy()
    assert np.array_equal(want[ref.slice_of("b")], seq)
    for trial in range(5):
        s = _store()
        for k in rng.permutation(100):
            s.accumulate(contribs[k], key=int(k))
        assert np.array_equal(s.reduce(), want)


def test_zero_grad_clears():
    s = _store()
    s.accumulate({"b": np.ones(4)})
    s.reduce()
    s.zero_grad()
    assert np.all(s.grad == 0)
