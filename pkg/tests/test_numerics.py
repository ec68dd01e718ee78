import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fitdistill import numerics as nx
from fitdistill.numerics import ShapeError, Tape, finite_difference_check, numeric_grad, relative_error


def test_add_values():
    t = Tape()
    out = t.leaf([1.0, 2.0]) + t.leaf([3.0, 4.0])
    np.testing.assert_array_equal(out.value, [4.0, 6.0])


def test_matmul_with_identity_factor():
    a = np.arange(6.0).reshape(2, 3)
    eye = np.eye(3)[:, :2]
    t = Tape()
    out = t.leaf(a) @ t.leaf(eye)
    np.testing.assert_array_equal(out.value, a[:, :2])


def test_softmax_reference_values():
    # independent evaluation: exp(k - 3) / sum_j exp(j - 3) in long double
    z = np.array([1.0, 2.0, 3.0], dtype=np.longdouble)
    ref = np.exp(z - 3) / np.exp(z - 3).sum()
    np.testing.assert_allclose(ref.astype(float), [0.09003057, 0.24472847, 0.66524096], atol=5e-9)
    t = Tape()
    np.testing.assert_allclose(nx.softmax(t.leaf([1.0, 2.0, 3.0])).value, ref.astype(float), atol=1e-15)


def test_shape_mismatch_names_primitive():
    t = Tape()
    with pytest.raises(ShapeError, match="matmul"):
        t.leaf(np.ones((2, 3))) @ t.leaf(np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        t.leaf(np.ones(3)) + t.leaf(np.ones(4))


def test_square_derivative():
    t = Tape()
    x = t.leaf(3.0)
    g = t.backward(x * x)
    assert g[x.id] == pytest.approx(6.0)


def test_softmax_cross_entropy_identity(rng):
    z = rng.normal(size=5)
    k = 2
    t = Tape()
    x = t.leaf(z)
    loss = -nx.take(nx.log_softmax(x), k)
    g = t.backward(loss)[x.id]
    expected = nx.softmax_np(z) - np.eye(5)[k]
    np.testing.assert_allclose(g, expected, atol=1e-14)


def test_matmul_chain_fd(rng):
    a, b, c = (rng.normal(size=(4, 4)) for _ in range(3))

    def f(t, x):
        return nx.vsum(t.const(a) @ x @ t.const(b) @ x @ t.const(c))

    assert finite_difference_check(f, rng.normal(size=(4, 4))) < 1e-6


def test_non_scalar_loss_rejected():
    t = Tape()
    with pytest.raises(ShapeError):
        t.backward(t.leaf(np.ones(3)))


def test_backward_twice_identical(rng):
    t = Tape()
    x = t.leaf(rng.normal(size=(3, 4)))
    w = t.leaf(rng.normal(size=(4, 2)))
    loss = nx.vsum(nx.gelu(x @ w))
    g1 = t.backward(loss)
    g2 = t.backward(loss)
    assert g1.keys() == g2.keys()
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_non_ancestors_and_constants_absent():
    t = Tape()
    x = t.leaf(2.0)
    y = t.leaf(5.0)
    c = t.const(4.0)
    g = t.backward(x * c)
    assert x.id in g and y.id not in g and c.id not in g


def test_fd_of_sum_is_exact(rng):
    assert finite_difference_check(lambda t, x: nx.vsum(x), rng.normal(size=7)) < 1e-10


def test_fd_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        numeric_grad(lambda z: float("nan"), np.zeros(2))
    with pytest.raises(ValueError):
        finite_difference_check(lambda t, x: nx.vsum(x), np.zeros(2), step=0)


def test_relative_error_formula():
    assert relative_error(np.array([1.0]), np.array([1.0])) == 0
    assert relative_error(np.array([1.0]), np.array([3.0])) == pytest.approx(0.5)
    assert relative_error(np.array([0.0]), np.array([0.0])) == 0


# --- every primitive against central differences on seeded inputs ----------

def _cases():
    def ln(t, x, rng):
        g = t.const(rng.normal(size=x.shape[-1]) + 1.0)
        b = t.const(rng.normal(size=x.shape[-1]))
        return nx.layer_norm(x, g, b)

    return {
        "add": lambda t, x, r: x + t.const(r.normal(size=x.shape)),
        "add-broadcast": lambda t, x, r: x + t.const(r.normal(size=x.shape[-1])),
        "multiply": lambda t, x, r: x * t.const(r.normal(size=x.shape)),
        "self-multiply": lambda t, x, r: x * x,
        "matmul": lambda t, x, r: x @ t.const(r.normal(size=(x.shape[-1], 3))),
        "matmul-left": lambda t, x, r: t.const(r.normal(size=(3, x.shape[0]))) @ x,
        "layer-norm": ln,
        "gelu": lambda t, x, r: nx.gelu(x),
        "softmax": lambda t, x, r: nx.softmax(x) * t.const(r.normal(size=x.shape)),
        "log-softmax": lambda t, x, r: nx.log_softmax(x) * t.const(r.normal(size=x.shape)),
        "reshape": lambda t, x, r: nx.reshape(x, (-1,)) * t.const(r.normal(size=int(np.prod(x.shape)))),
        "transpose": lambda t, x, r: nx.transpose(x, (1, 0)) * t.const(r.normal(size=x.shape[::-1])),
        "slice": lambda t, x, r: nx.take(x, (slice(1, None), slice(None, 2))),
        "gather": lambda t, x, r: nx.take(x, (np.array([0, 0, 2]), np.array([1, 1, 0]))),
        "concat": lambda t, x, r: nx.concat([x, x * x], axis=0),
        "sum": lambda t, x, r: nx.vsum(x, axis=0) * t.const(r.normal(size=x.shape[1])),
        "mean": lambda t, x, r: nx.vmean(x, axis=1, keepdims=True) * t.const(r.normal(size=(x.shape[0], 1))),
    }


@pytest.mark.parametrize("name", sorted(_cases()))
def test_primitive_gradients_match_fd(name):
    build = _cases()[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4))

        def f(t, leaf):
            r = np.random.default_rng(10_000 + seed)
            return nx.vsum(build(t, leaf, r))

        worst = max(worst, finite_difference_check(f, x))
    assert worst < 1e-4, name


def test_embedding_gradient_fd(rng):
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    w = rng.normal(size=(2, 3, 5))

    def f(t, table):
        return nx.vsum(nx.embedding(table, ids) * t.const(w))

    assert finite_difference_check(f, rng.normal(size=(4, 5))) < 1e-8


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12), st.floats(-50, 50))
def test_softmax_normalised_and_shift_invariant(xs, c):
    x = np.array(xs)
    p = nx.softmax_np(x)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-12
    np.testing.assert_allclose(nx.softmax_np(x + c), p, atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_outputs_finite_on_finite_inputs(seed):
    r = np.random.default_rng(seed)
    t = Tape()
    x = t.leaf(r.normal(scale=20, size=(2, 6)))
    g = t.const(np.ones(6))
    b = t.const(np.zeros(6))
    for v in (nx.softmax(x), nx.log_softmax(x), nx.gelu(x), nx.layer_norm(x, g, b)):
        assert np.all(np.isfinite(v.value))
