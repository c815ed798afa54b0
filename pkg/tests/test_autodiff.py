import numpy as np
import pytest
from hypothesis import given, strategies as st

from learnedsis import autodiff as ad
from learnedsis.checks import GRADCHECK_TOL, _op_cases, gradcheck_suite
from learnedsis.errors import JitterCapExceeded, RootNotScalar, ShapeMismatch, TapeAlreadySwept
from learnedsis.linalg import LOG_2PI, mvn_log_density

seeds = st.integers(0, 2**32 - 1)


def _grad(f, *arrays):
    tape = ad.Tape()
    nodes = [tape.parameter(np.array(a, dtype=float)) for a in arrays]
    root = f(tape, *nodes)
    tape.backward(root)
    return root, [tape.grad(n) for n in nodes]


def test_tanh_at_zero():
    root, (g,) = _grad(lambda t, x: ad.sum_(ad.tanh(x)), [[0.0]])
    assert root.value[0, 0] == 0.0
    assert g[0, 0] == 1.0


def test_logsumexp_pair():
    root, (g,) = _grad(lambda t, x: ad.logsumexp_over_entries(x), [[0.0, 0.0]])
    assert root.value[0, 0] == pytest.approx(np.log(2.0), abs=1e-15)
    np.testing.assert_allclose(g, [[0.5, 0.5]])


def test_logsumexp_no_overflow():
    root, (g,) = _grad(lambda t, x: ad.logsumexp_over_entries(x), [[1000.0, 1000.0]])
    assert root.value[0, 0] == pytest.approx(1000.0 + np.log(2.0), abs=1e-12)
    assert np.all(np.isfinite(g))


@given(seeds, st.floats(-1e3, 1e3))
def test_logsumexp_shift(seed, c):
    v = np.random.default_rng(seed).standard_normal((1, 7)) * 10
    tape = ad.Tape()
    a = ad.logsumexp_over_entries(tape.constant(v)).value[0, 0]
    b = ad.logsumexp_over_entries(tape.constant(v + c)).value[0, 0]
    assert b == pytest.approx(a + c, abs=1e-12 * max(1.0, abs(c)))


def test_root_is_parameter():
    root, (g,) = _grad(lambda t, p: p, [[3.0]])
    assert g[0, 0] == 1.0


def test_sum_of_squares_gradient():
    _, (g,) = _grad(lambda t, p: ad.sum_(ad.square(p)), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(g.reshape(-1), [2.0, 4.0, 6.0])


def test_backward_errors():
    tape = ad.Tape()
    p = tape.parameter(np.ones((2, 1)))
    with pytest.raises(RootNotScalar):
        tape.backward(p)
    root = ad.sum_(p)
    tape.backward(root)
    with pytest.raises(TapeAlreadySwept):
        tape.backward(root)


def test_shape_mismatch():
    tape = ad.Tape()
    with pytest.raises(ShapeMismatch):
        ad.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        ad.add(tape.constant(np.ones((2, 3))), tape.constant(np.ones((3, 2))))


def test_unreachable_nodes_have_zero_adjoint():
    tape = ad.Tape()
    p = tape.parameter(np.ones((2, 2)))
    q = tape.parameter(np.full((3, 1), 2.0))
    ad.exp(q)
    root = ad.sum_(p)
    tape.backward(root)
    np.testing.assert_array_equal(tape.grad(q), np.zeros((3, 1)))
    for node in tape.nodes:
        assert tape.grad(node).shape == node.value.shape


def test_parents_precede_children():
    tape = ad.Tape()
    x = tape.parameter(np.ones((2, 2)))
    ad.sum_(ad.tanh(ad.matmul(x, x)))
    for node in tape.nodes:
        assert all(parent.id < node.id for parent in node.parents)


def test_parameter_is_shared():
    arr = np.array([[2.0]])
    tape = ad.Tape()
    root = ad.elementwise_multiply(tape.parameter(arr), tape.parameter(arr))
    tape.backward(root)
    assert tape.grad_of(arr)[0, 0] == 4.0


@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(seed, a, b):
    x0 = np.random.default_rng(seed).standard_normal((3, 2))

    def grads(ca, cb):
        tape = ad.Tape()
        x = tape.parameter(x0)
        f = ad.sum_(ad.tanh(x))
        g = ad.sum_(ad.square(x))
        root = ad.add(ad.scalar_multiply(f, ca), ad.scalar_multiply(g, cb))
        tape.backward(root)
        return tape.grad(x)

    np.testing.assert_allclose(grads(a, b), a * grads(1, 0) + b * grads(0, 1), atol=1e-12)


def test_cholesky_node_forward():
    tape = ad.Tape()
    L = ad.cholesky(tape.constant(np.array([[4.0, 2.0], [2.0, 5.0]])), rel_jitter=0.0)
    np.testing.assert_allclose(L.value, [[2.0, 0.0], [1.0, 2.0]], atol=1e-15)
    L = ad.cholesky(tape.constant(np.eye(3)), rel_jitter=0.0)
    np.testing.assert_array_equal(L.value, np.eye(3))


def test_cholesky_identity_direction():
    # d/ds sum(chol(I + s I)) at s = 0, against central differences with step 1e-5.
    def f(s):
        tape = ad.Tape()
        S = tape.parameter(np.array([[s]]))
        M = ad.add(tape.constant(np.eye(3)), ad.elementwise_multiply(S, tape.constant(np.eye(3))))
        return tape, S, ad.sum_(ad.cholesky(M, rel_jitter=0.0))

    tape, S, root = f(0.0)
    tape.backward(root)
    fd = (f(1e-5)[2].value[0, 0] - f(-1e-5)[2].value[0, 0]) / 2e-5
    assert tape.grad(S)[0, 0] == pytest.approx(fd, abs=1e-5)
    assert fd == pytest.approx(1.5, abs=1e-8)


def test_cholesky_gradcheck_6x6(rng):
    G = rng.standard_normal((6, 6))
    S = G @ G.T + np.eye(6)
    err = ad.gradcheck(lambda t, x: ad.sum_(ad.cholesky(ad.symmetrize(x[0]))), [S])
    assert err < 1e-4


def test_cholesky_node_cap():
    tape = ad.Tape()
    with pytest.raises(JitterCapExceeded):
        ad.cholesky(tape.constant(np.diag([1.0, -1.0])))


def test_gradcheck_sum_is_exact_to_rounding(rng):
    params = [rng.standard_normal((3, 2)), rng.standard_normal((1, 4))]
    err = ad.gradcheck(lambda t, x: ad.add(ad.sum_(x[0]), ad.sum_(x[1])), params)
    assert err < 1e-10


def _graph_mvn(tape, x, mu, S):
    L = ad.cholesky(ad.symmetrize(S), rel_jitter=0.0)
    u = ad.triangular_solve(L, ad.subtract(x, mu))
    n = x.shape[0]
    quad = ad.scalar_multiply(ad.sum_(ad.square(u)), -0.5)
    return ad.add(ad.subtract(quad, ad.log_diagonal_sum(L)), -0.5 * n * LOG_2PI)


def test_graph_mvn_matches_plain_and_gradcheck(rng):
    G = rng.standard_normal((3, 3))
    S = G @ G.T + np.eye(3)
    x, mu = rng.standard_normal((3, 1)), rng.standard_normal((3, 1))
    tape = ad.Tape()
    val = _graph_mvn(tape, tape.constant(x), tape.constant(mu), tape.constant(S)).value[0, 0]
    assert val == pytest.approx(mvn_log_density(x, mu, np.linalg.cholesky(S)), abs=1e-12)
    err = ad.gradcheck(lambda t, p: _graph_mvn(t, *p), [x, mu, S])
    assert err < 1e-4


def test_kernel_contraction_gradcheck(rng):
    W = rng.standard_normal((5, 5))
    z = rng.standard_normal((5, 1))
    err = ad.gradcheck(
        lambda t, p: ad.sum_(ad.elementwise_multiply(ad.gaussian_kernel(p[0]), t.constant(W))), [z])
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_every_op_gradchecks_at_random_points(seed):
    for name, f, params in _op_cases(np.random.default_rng(seed)):
        assert ad.gradcheck(f, params) < GRADCHECK_TOL, name


def test_suite_covers_the_filter_loss():
    names = [n for n, err in gradcheck_suite(0) if err < GRADCHECK_TOL]
    assert {"proposal_moments", "loss_linear", "loss_nonlinear"} <= set(names)


def test_operator_overloads():
    tape = ad.Tape()
    a = tape.parameter(np.array([[1.0, 2.0]]))
    b = (a + 1.0) * 3.0 - a
    c = -(2.0 - b)
    root = ad.sum_(c * a)
    tape.backward(root)
    # c = 2a + 1, root = sum(2a^2 + a), grad = 4a + 1
    np.testing.assert_allclose(tape.grad(a), [[5.0, 9.0]])
