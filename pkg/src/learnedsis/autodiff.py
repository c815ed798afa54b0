"""Tape-based reverse-mode automatic differentiation.

A :class:`Tape` records every operation as a :class:`Node` holding its value
and a vector-Jacobian product. ``backward`` sweeps the tape once in reverse
order and accumulates adjoints.

Shapes follow a column convention: vectors are ``(n, 1)`` and scalars are
``(1, 1)``. A batch of ``B`` vectors is an ``(n, B)`` matrix whose columns are
the batch members; the matching batch of matrices is a ``(B, n, n)`` stack.
The triangular, Cholesky and kernel ops accept either the single form or the
batched form.

Example::

    tape = Tape()
    p = tape.parameter(np.array([[1.0], [2.0], [3.0]]))
    loss = sum_(square(p))
    tape.backward(loss)
    tape.grad(p)  # [[2], [4], [6]]
"""

import numpy as np

from . import kernels
from .errors import RootNotScalar, ShapeMismatch, TapeAlreadySwept
from .linalg import REL_JITTER, cholesky_relative

__all__ = [
    "Node", "Tape", "backward", "gradcheck",
    "constant", "parameter", "add", "subtract", "elementwise_multiply",
    "matmul", "matvec", "concat_rows", "transpose", "tanh", "exp", "log",
    "square", "negate", "abs_", "sum_", "scalar_multiply",
    "logsumexp_over_entries", "lower_triangular_matvec", "triangular_solve",
    "log_diagonal_sum", "cholesky", "gaussian_kernel", "congruence",
    "symmetrize",
]


class Node:
    __slots__ = ("tape", "id", "value", "op", "parents", "vjp", "requires_grad")

    def __init__(self, tape, id, value, op, parents, vjp, requires_grad):
        self.tape = tape
        self.id = id
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_multiply(self, other)
        return elementwise_multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of a computation."""

    def __init__(self):
        self.nodes = []
        self.gradients = None
        self._params = {}
        self._swept = False

    def __len__(self):
        return len(self.nodes)

    def _push(self, value, op, parents=(), vjp=None, requires_grad=None):
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), value, op, tuple(parents), vjp, requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, value):
        """A node that never receives a gradient."""
        value = np.array(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(-1, 1)
        return self._push(value, "constant", requires_grad=False)

    def parameter(self, array):
        """Leaf node for a trainable array.

        The same array object always maps to the same node, so a parameter
        used several times on one tape accumulates a single adjoint.
        """
        key = id(array)
        hit = self._params.get(key)
        if hit is not None and hit[0] is array:
            return hit[1]
        # No copy: callers must not mutate the array while the tape is live.
        value = np.asarray(array, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(-1, 1)
        node = self._push(value, "parameter", requires_grad=True)
        self._params[key] = (array, node)
        return node

    def bind(self, array, node):
        """Make later ``parameter(array)`` calls resolve to ``node``."""
        if node.tape is not self or np.size(array) != node.value.size:
            raise ShapeMismatch("bind needs a node of this tape with the array's size")
        self._params[id(array)] = (array, node)

    def backward(self, root):
        if self._swept:
            raise TapeAlreadySwept("backward was already called on this tape")
        if root.tape is not self:
            raise ValueError("root does not belong to this tape")
        if root.value.size != 1:
            raise RootNotScalar(f"backward needs a scalar root, got shape {root.shape}")
        grads = [None] * len(self.nodes)
        grads[root.id] = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.id + 1]):
            g = grads[node.id]
            if g is None or node.vjp is None:
                continue
            needs = tuple(p.requires_grad for p in node.parents)
            if not any(needs):
                continue
            for parent, need, pg in zip(node.parents, needs, node.vjp(g, needs)):
                if not need or pg is None:
                    continue
                if grads[parent.id] is None:
                    grads[parent.id] = pg
                else:
                    grads[parent.id] = grads[parent.id] + pg
        self.gradients = grads
        self._swept = True
        return grads

    def grad(self, node):
        """Adjoint of ``node`` after ``backward``; zeros if unreachable."""
        if self.gradients is None:
            raise RuntimeError("backward has not been run")
        g = self.gradients[node.id] if node.id < len(self.gradients) else None
        return np.zeros_like(node.value) if g is None else g

    def grad_of(self, array):
        """Adjoint of the parameter registered for ``array``, in its shape."""
        hit = self._params.get(id(array))
        if hit is None:
            return np.zeros_like(array, dtype=np.float64)
        return self.grad(hit[1]).reshape(np.shape(array))

    def reset(self):
        """Forget gradients so ``backward`` may run again."""
        self.gradients = None
        self._swept = False


def backward(tape, root):
    return tape.backward(root)


# -- helpers ------------------------------------------------------------------

def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one argument must be a Node")


def _lift(tape, x):
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("nodes from different tapes cannot be combined")
        return x
    return tape.constant(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def constant(tape, value):
    return tape.constant(value)


def parameter(tape, array):
    return tape.parameter(array)


# -- elementwise --------------------------------------------------------------

def add(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a, b, "add")

    def vjp(g, needs):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return tape._push(a.value + b.value, "add", (a, b), vjp)


def subtract(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a, b, "subtract")

    def vjp(g, needs):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return tape._push(a.value - b.value, "subtract", (a, b), vjp)


def elementwise_multiply(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a, b, "elementwise_multiply")

    def vjp(g, needs):
        ga = _unbroadcast(g * b.value, a.shape) if needs[0] else None
        gb = _unbroadcast(g * a.value, b.shape) if needs[1] else None
        return ga, gb

    return tape._push(a.value * b.value, "elementwise_multiply", (a, b), vjp)


def scalar_multiply(a, c):
    c = float(c)
    return a.tape._push(a.value * c, "scalar_multiply", (a,), lambda g, n: (g * c,))


def negate(a):
    return a.tape._push(-a.value, "negate", (a,), lambda g, n: (-g,))


def tanh(a):
    y = np.tanh(a.value)
    return a.tape._push(y, "tanh", (a,), lambda g, n: (g * (1.0 - y * y),))


def exp(a):
    y = np.exp(a.value)
    return a.tape._push(y, "exp", (a,), lambda g, n: (g * y,))


def log(a):
    x = a.value
    with np.errstate(divide="ignore"):
        y = np.log(x)
    return a.tape._push(y, "log", (a,), lambda g, n: (g / x,))


def square(a):
    x = a.value
    return a.tape._push(x * x, "square", (a,), lambda g, n: (2.0 * x * g,))


def abs_(a):
    x = a.value
    return a.tape._push(np.abs(x), "abs", (a,), lambda g, n: (np.sign(x) * g,))


# -- reductions ---------------------------------------------------------------

def sum_(a, axis=None):
    """Sum of all entries as ``(1, 1)``, or over one axis with dims kept."""
    x = a.value
    if axis is None:
        value = np.array([[x.sum()]])
    else:
        value = x.sum(axis=axis, keepdims=True)
        if value.ndim > 2:
            value = value.reshape(value.shape[-2:])

    def vjp(g, needs):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), x.shape).copy(),)
        return (np.broadcast_to(g.reshape(_kept_shape(x.shape, axis)), x.shape).copy(),)

    return a.tape._push(value, "sum", (a,), vjp)


def _kept_shape(shape, axis):
    s = list(shape)
    s[axis] = 1
    return tuple(s)


def logsumexp_over_entries(a):
    """``log(sum(exp(a)))`` over every entry, shifted by the maximum."""
    x = a.value
    m = np.max(x)
    if not np.isfinite(m):
        value = float(m) if m == -np.inf else np.nan
        soft = np.full_like(x, np.nan) if m != -np.inf else np.zeros_like(x)
    else:
        e = np.exp(x - m)
        s = e.sum()
        value = m + np.log(s)
        soft = e / s
    return a.tape._push(
        np.array([[value]]), "logsumexp_over_entries", (a,),
        lambda g, n: (g.reshape(()) * soft,),
    )


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def vjp(g, needs):
        ga = g @ b.value.T if needs[0] else None
        gb = a.value.T @ g if needs[1] else None
        return ga, gb

    return tape._push(a.value @ b.value, "matmul", (a, b), vjp)


def matvec(m, v):
    if isinstance(v, Node) and (v.value.ndim != 2 or v.shape[1] != 1):
        raise ShapeMismatch(f"matvec needs an (n, 1) vector, got {v.shape}")
    node = matmul(m, v)
    node.op = "matvec"
    return node


def concat_rows(*parts):
    tape = _tape_of(*parts)
    parts = [_lift(tape, p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1 or any(p.value.ndim != 2 for p in parts):
        raise ShapeMismatch(f"concat_rows: incompatible shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g, needs):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return tape._push(np.vstack([p.value for p in parts]), "concat_rows", parts, vjp)


def transpose(a):
    if a.value.ndim != 2:
        raise ShapeMismatch(f"transpose needs a matrix, got {a.shape}")
    return a.tape._push(a.value.T.copy(), "transpose", (a,), lambda g, n: (g.T,))


def symmetrize(a):
    """``(S + S^T) / 2`` on the trailing two axes."""
    x = a.value
    if x.shape[-1] != x.shape[-2]:
        raise ShapeMismatch(f"symmetrize needs square matrices, got {x.shape}")
    xt = np.swapaxes(x, -1, -2)
    return a.tape._push(
        0.5 * (x + xt), "symmetrize", (a,),
        lambda g, n: (0.5 * (g + np.swapaxes(g, -1, -2)),),
    )


def _as_stack(L, v, op):
    """Normalize (L, v) to ``(B, n, n)`` and ``(B, n)`` arrays."""
    Lv, vv = L.value, v.value
    if Lv.ndim == 2:
        n = Lv.shape[0]
        if Lv.shape != (n, n) or vv.shape != (n, 1):
            raise ShapeMismatch(f"{op}: matrix {Lv.shape} with vector {vv.shape}")
        return Lv[None], vv.T, False
    if Lv.ndim == 3:
        B, n, _ = Lv.shape
        if Lv.shape != (B, n, n) or vv.shape != (n, B):
            raise ShapeMismatch(f"{op}: stack {Lv.shape} with columns {vv.shape}")
        return Lv, vv.T, True
    raise ShapeMismatch(f"{op}: bad matrix shape {Lv.shape}")


def _restore(stack, batched):
    return stack if batched else stack[0]


def lower_triangular_matvec(L, v):
    """``tril(L) v``; batched form multiplies each column by its own factor."""
    tape = _tape_of(L, v)
    L, v = _lift(tape, L), _lift(tape, v)
    Ls, vs, batched = _as_stack(L, v, "lower_triangular_matvec")
    out = kernels.lower_matvec_batched(Ls, vs)

    def vjp(g, needs):
        gs = g.T
        gL = np.tril(gs[:, :, None] * vs[:, None, :]) if needs[0] else None
        gv = np.einsum("bji,bj->bi", np.tril(Ls), gs).T if needs[1] else None
        return (_restore(gL, batched) if gL is not None else None), gv

    return tape._push(out.T.copy(), "lower_triangular_matvec", (L, v), vjp)


def triangular_solve(L, v):
    """``L^{-1} v`` for lower-triangular ``L``."""
    tape = _tape_of(L, v)
    L, v = _lift(tape, L), _lift(tape, v)
    Ls, vs, batched = _as_stack(L, v, "triangular_solve")
    u = kernels.solve_lower_batched(Ls, vs)

    def vjp(g, needs):
        gv = kernels.solve_lower_transpose_batched(Ls, np.ascontiguousarray(g.T))
        gL = -np.tril(gv[:, :, None] * u[:, None, :]) if needs[0] else None
        return (_restore(gL, batched) if gL is not None else None), gv.T

    return tape._push(u.T.copy(), "triangular_solve", (L, v), vjp)


def log_diagonal_sum(L):
    """``sum_i log L_ii``: ``(1, 1)`` for one matrix, ``(1, B)`` for a stack."""
    x = L.value
    batched = x.ndim == 3
    d = np.diagonal(x, axis1=-2, axis2=-1)
    value = np.log(d).sum(axis=-1)
    value = value.reshape(1, -1) if batched else np.array([[value]])

    def vjp(g, needs):
        out = np.zeros_like(x)
        n = x.shape[-1]
        idx = np.arange(n)
        if batched:
            out[:, idx, idx] = g.reshape(-1, 1) / d
        else:
            out[idx, idx] = g.reshape(()) / d
        return (out,)

    return L.tape._push(value, "log_diagonal_sum", (L,), vjp)


def cholesky(S, rel_jitter=REL_JITTER):
    """Lower Cholesky factor of ``S + j(S) I`` with ``j = c * trace(S) / n``.

    ``c`` starts at ``rel_jitter`` and escalates by ten while factorization
    fails. The adjoint treats ``c`` as fixed and includes the trace term, so
    it is the exact derivative of the forward map away from escalation jumps.
    Input adjoints are returned symmetric: only symmetric perturbations of
    ``S`` are meaningful.
    """
    x = S.value
    batched = x.ndim == 3
    if x.shape[-1] != x.shape[-2] or x.ndim not in (2, 3):
        raise ShapeMismatch(f"cholesky needs square matrices, got {x.shape}")
    stack = x if batched else x[None]
    Lst, factor = cholesky_relative(stack, rel_jitter)
    n = stack.shape[-1]

    def vjp(g, needs):
        gs = g if batched else g[None]
        Sbar = kernels.cholesky_backward_batched(Lst, np.ascontiguousarray(gs))
        tr = np.trace(Sbar, axis1=1, axis2=2)
        Sbar = Sbar + ((factor / n) * tr)[:, None, None] * np.eye(n)
        return (_restore(Sbar, batched),)

    node = S.tape._push(_restore(Lst, batched), "cholesky", (S,), vjp)
    return node


def cholesky_node(S, rel_jitter=REL_JITTER):
    return cholesky(S, rel_jitter)


def gaussian_kernel(z):
    """``D_ij = exp(-(z_i - z_j)^2)``; ``(n, B)`` input gives a ``(B, n, n)`` stack."""
    x = z.value
    if x.ndim != 2:
        raise ShapeMismatch(f"gaussian_kernel needs (n, B) columns, got {x.shape}")
    batched = x.shape[1] != 1
    zs = np.ascontiguousarray(x.T)
    D = kernels.gaussian_gram_batched(zs)

    def vjp(g, needs):
        gs = g if batched else g[None]
        diff = zs[:, :, None] - zs[:, None, :]
        w = diff * D * (gs + np.swapaxes(gs, 1, 2))
        return ((-2.0 * w.sum(axis=2)).T,)

    return z.tape._push(_restore(D, batched), "gaussian_kernel", (z,), vjp)


def congruence(C, D):
    """``C D C^T`` for a single matrix ``C`` and one ``D`` or a stack of them."""
    tape = _tape_of(C, D)
    C, D = _lift(tape, C), _lift(tape, D)
    c, d = C.value, D.value
    if c.ndim != 2 or d.shape[-1] != c.shape[1] or d.shape[-2] != c.shape[1]:
        raise ShapeMismatch(f"congruence: C {c.shape} with D {d.shape}")
    value = c @ d @ c.T

    def vjp(g, needs):
        gD = c.T @ g @ c if needs[1] else None
        gC = None
        if needs[0]:
            gC = g @ c @ np.swapaxes(d, -1, -2) + np.swapaxes(g, -1, -2) @ c @ d
            if gC.ndim == 3:
                gC = gC.sum(axis=0)
        return gC, gD

    return tape._push(value, "congruence", (C, D), vjp)


# -- verification -------------------------------------------------------------

def gradcheck(f, params, step=1e-5, atol=1e-8, return_details=False):
    """Compare reverse-mode gradients with central finite differences.

    ``f(tape, nodes)`` builds a scalar node from parameter nodes created for
    each array in ``params``. Returns the largest elementwise relative error
    ``|ad - fd| / max(|ad|, |fd|, floor)``. The floor is ``atol`` or, if
    larger, ten thousand times the rounding noise of the difference quotient
    (``eps * |f| / step``), so entries that are numerically zero next to the
    loss scale cannot dominate.
    """
    params = [np.array(p, dtype=np.float64) for p in params]

    def evaluate(values):
        tape = Tape()
        nodes = [tape.parameter(v) for v in values]
        return tape, nodes, f(tape, nodes)

    tape, nodes, root = evaluate(params)
    f0 = float(root.value.reshape(()))
    tape.backward(root)
    analytic = [tape.grad(n).reshape(p.shape) for n, p in zip(nodes, params)]
    floor = max(atol, 1e4 * np.finfo(float).eps * max(1.0, abs(f0)) / step)

    worst = 0.0
    details = []
    for i, p in enumerate(params):
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(evaluate(params)[2].value.reshape(()))
            flat[j] = orig - step
            fm = float(evaluate(params)[2].value.reshape(()))
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2.0 * step)
        a = analytic[i]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        err = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
        worst = max(worst, err)
        details.append((a, numeric, err))
    if return_details:
        return worst, details
    return worst
