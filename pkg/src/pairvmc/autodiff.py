"""Reverse-mode automatic differentiation on numpy arrays.

Every primitive below accepts either plain ndarrays (returning an ndarray,
no bookkeeping) or `Node` operands (returning a `Node` that records its
parents and vector-Jacobian products). VJP closures capture *nodes*, never
raw values, and build their results out of the same primitives, so `grad`
output is itself differentiable. That is what makes per-coordinate second
derivatives (`laplacian_logpsi`) possible by repeated reverse sweeps.
"""

from __future__ import annotations

import numpy as np

from .errors import NodeEvaluation

__all__ = [
    "Node", "value_of", "grad", "detach",
    "add", "sub", "mul", "div", "neg", "exp", "log", "logabs", "tanh",
    "sqrt", "square", "power", "sum_", "mean_", "broadcast_to", "reshape",
    "transpose", "swap_last", "concat", "getitem", "take_along", "matmul",
    "inv", "logabsdet", "tree_sum_last", "sorted_tree_sum_last",
    "grad_logpsi", "laplacian_logpsi",
]


class Node:
    """One value in a reverse-mode graph.

    Leaves are built as ``Node(array)``; interior nodes are produced by the
    primitives in this module and carry (parent, vjp) pairs.
    """

    __slots__ = ("value", "_parents", "_vjps")
    # Refuse numpy's ufunc dispatch so `ndarray <op> Node` falls through to
    # our reflected operators instead of producing object arrays.
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self._parents = parents
        self._vjps = vjps

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(shape={self.value.shape}, leaf={not self._parents})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, c):
        return power(self, c)

    def __getitem__(self, key):
        return getitem(self, key)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def value_of(x):
    """Underlying ndarray of a Node, or the input coerced to float64."""
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=np.float64)


def detach(x):
    """Value of x severed from the graph."""
    return value_of(x)


def _is_traced(*xs):
    return any(isinstance(x, Node) for x in xs)


def _shape_of(x):
    return np.shape(value_of(x))


# ---------------------------------------------------------------------------
# broadcasting helper: reduce a cotangent back to the operand's shape

def _unbroadcast(g, shape):
    gshape = _shape_of(g)
    if gshape == tuple(shape):
        return g
    extra = len(gshape) - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and _shape_of(g)[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    if not _is_traced(a, b):
        return value_of(a) + value_of(b)
    av, bv = value_of(a), value_of(b)
    out = av + bv
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g, av.shape))
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(g, bv.shape))
    return Node(out, tuple(parents), tuple(vjps))


def sub(a, b):
    if not _is_traced(a, b):
        return value_of(a) - value_of(b)
    av, bv = value_of(a), value_of(b)
    out = av - bv
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(g, av.shape))
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(neg(g), bv.shape))
    return Node(out, tuple(parents), tuple(vjps))


def neg(a):
    if not _is_traced(a):
        return -value_of(a)
    return Node(-a.value, (a,), (lambda g: neg(g),))


def mul(a, b):
    if not _is_traced(a, b):
        return value_of(a) * value_of(b)
    av, bv = value_of(a), value_of(b)
    out = av * bv
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(mul(g, b), av.shape))
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(mul(g, a), bv.shape))
    return Node(out, tuple(parents), tuple(vjps))


def div(a, b):
    if not _is_traced(a, b):
        return value_of(a) / value_of(b)
    av, bv = value_of(a), value_of(b)
    out_node = None  # set below; vjp for b references the output
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(div(g, b), av.shape))
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(neg(div(mul(g, out_node), b)), bv.shape))
    out_node = Node(av / bv, tuple(parents), tuple(vjps))
    return out_node


def power(a, c):
    """a ** c for a constant exponent c."""
    if not _is_traced(a):
        return value_of(a) ** c
    out = a.value ** c
    return Node(out, (a,), (lambda g: mul(g, mul(c, power(a, c - 1))),))


def square(a):
    return mul(a, a)


def exp(a):
    if not _is_traced(a):
        return np.exp(value_of(a))
    out_node = Node(np.exp(a.value))
    out_node._parents = (a,)
    out_node._vjps = (lambda g: mul(g, out_node),)
    return out_node


def log(a):
    if not _is_traced(a):
        return np.log(value_of(a))
    return Node(np.log(a.value), (a,), (lambda g: div(g, a),))


def logabs(a):
    """log |a|, with derivative 1/a on either side of zero.

    A zero operand yields -inf (intended semantics for log-domain signs);
    the numpy divide warning is suppressed for that case.
    """
    if not _is_traced(a):
        with np.errstate(divide="ignore"):
            return np.log(np.abs(value_of(a)))
    with np.errstate(divide="ignore"):
        out = np.log(np.abs(a.value))
    return Node(out, (a,), (lambda g: div(g, a),))


def tanh(a):
    if not _is_traced(a):
        return np.tanh(value_of(a))
    out_node = Node(np.tanh(a.value))
    out_node._parents = (a,)
    out_node._vjps = (lambda g: mul(g, sub(1.0, square(out_node))),)
    return out_node


def sqrt(a):
    if not _is_traced(a):
        return np.sqrt(value_of(a))
    out_node = Node(np.sqrt(a.value))
    out_node._parents = (a,)
    out_node._vjps = (lambda g: div(mul(0.5, g), out_node),)
    return out_node


# ---------------------------------------------------------------------------
# shape ops

def sum_(a, axis=None, keepdims=False):
    if not _is_traced(a):
        return np.sum(value_of(a), axis=axis, keepdims=keepdims)
    av = a.value
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return broadcast_to(reshape(g, (1,) * av.ndim), av.shape)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % av.ndim for ax in axes)
        if keepdims:
            gk = g
        else:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(av.shape))
            gk = reshape(g, kshape)
        return broadcast_to(gk, av.shape)

    return Node(out, (a,), (vjp,))


def mean_(a, axis):
    n = _shape_of(a)[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def broadcast_to(a, shape):
    if not _is_traced(a):
        return np.broadcast_to(value_of(a), shape)
    out = np.broadcast_to(a.value, shape)
    ashape = a.value.shape
    return Node(np.ascontiguousarray(out), (a,), (lambda g: _unbroadcast(g, ashape),))


def reshape(a, shape):
    if not _is_traced(a):
        return np.reshape(value_of(a), shape)
    ashape = a.value.shape
    return Node(np.reshape(a.value, shape), (a,), (lambda g: reshape(g, ashape),))


def transpose(a, axes):
    if not _is_traced(a):
        return np.transpose(value_of(a), axes)
    inverse = tuple(np.argsort(axes))
    return Node(np.transpose(a.value, axes), (a,), (lambda g: transpose(g, inverse),))


def swap_last(a):
    """Transpose the last two axes."""
    nd = len(_shape_of(a))
    axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    return transpose(a, axes)


def concat(parts, axis):
    if not _is_traced(*parts):
        return np.concatenate([value_of(p) for p in parts], axis=axis)
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    ax = axis % out.ndim
    sizes = [v.shape[ax] for v in values]
    offsets = np.cumsum([0] + sizes)
    parents, vjps = [], []
    for i, p in enumerate(parts):
        if not isinstance(p, Node):
            continue
        key = (slice(None),) * ax + (slice(int(offsets[i]), int(offsets[i + 1])),)
        parents.append(p)
        vjps.append(lambda g, key=key: getitem(g, key))
    return Node(out, tuple(parents), tuple(vjps))


def getitem(a, key):
    if not _is_traced(a):
        return value_of(a)[key]
    ashape = a.value.shape
    return Node(a.value[key], (a,), (lambda g: _scatter(g, key, ashape),))


def _scatter(g, key, shape):
    """Adjoint of getitem: place g into a zero array of the given shape."""
    if not _is_traced(g):
        buf = np.zeros(shape)
        np.add.at(buf, key, value_of(g))
        return buf
    buf = np.zeros(shape)
    np.add.at(buf, key, g.value)
    return Node(buf, (g,), (lambda gg: getitem(gg, key),))


def take_along(a, idx, axis):
    """numpy.take_along_axis with a constant index array."""
    if not _is_traced(a):
        return np.take_along_axis(value_of(a), idx, axis=axis)
    ashape = a.value.shape
    out = np.take_along_axis(a.value, idx, axis=axis)
    return Node(out, (a,), (lambda g: _put_along(g, idx, axis, ashape),))


def _put_along(g, idx, axis, shape):
    """Adjoint of take_along for permutation-style (duplicate-free) indices."""
    if not _is_traced(g):
        buf = np.zeros(shape)
        np.put_along_axis(buf, idx, value_of(g), axis=axis)
        return buf
    buf = np.zeros(shape)
    np.put_along_axis(buf, idx, g.value, axis=axis)
    return Node(buf, (g,), (lambda gg: take_along(gg, idx, axis),))


def matmul(a, b):
    if not _is_traced(a, b):
        return np.matmul(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    out = np.matmul(av, bv)
    parents, vjps = [], []
    if isinstance(a, Node):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(matmul(g, swap_last(b)), av.shape))
    if isinstance(b, Node):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(matmul(swap_last(a), g), bv.shape))
    return Node(out, tuple(parents), tuple(vjps))


# ---------------------------------------------------------------------------
# linear algebra

def inv(a):
    if not _is_traced(a):
        return np.linalg.inv(value_of(a))
    out_node = Node(np.linalg.inv(a.value))
    out_node._parents = (a,)
    out_node._vjps = (
        lambda g: neg(matmul(matmul(swap_last(out_node), g), swap_last(out_node))),
    )
    return out_node


def logabsdet(a):
    """(sign, log|det|) of square matrices in the last two axes.

    The sign comes back as a plain int array (it is locally constant); the
    log-magnitude is differentiable, with d log|det M| / dM = (M^-1)^T.
    """
    from .slog import batched_signed_logdet  # local import; slog depends on us

    av = value_of(a)
    sign, logdet = batched_signed_logdet(av)
    if not _is_traced(a):
        return sign, logdet

    def vjp(g):
        gm = reshape(g, _shape_of(g) + (1, 1))
        return mul(gm, swap_last(inv(a)))

    return sign, Node(logdet, (a,), (vjp,))


# ---------------------------------------------------------------------------
# deterministic reductions

def tree_sum_last(a):
    """Balanced pairwise-tree sum over the last axis."""
    n = _shape_of(a)[-1]
    if n == 0:
        return np.zeros(_shape_of(a)[:-1])
    while n > 1:
        m = n // 2
        left = getitem(a, (Ellipsis, slice(0, 2 * m, 2)))
        right = getitem(a, (Ellipsis, slice(1, 2 * m, 2)))
        merged = add(left, right)
        if n % 2:
            merged = concat([merged, getitem(a, (Ellipsis, slice(n - 1, n)))], -1)
        a = merged
        n = _shape_of(a)[-1]
    return getitem(a, (Ellipsis, 0))


def sorted_tree_sum_last(a):
    """Tree sum over the last axis in ascending value order.

    Sorting first makes the result a function of the *multiset* of addends,
    bit for bit, independent of their input order.
    """
    idx = np.argsort(value_of(a), axis=-1, kind="stable")
    return tree_sum_last(take_along(a, idx, -1))


# ---------------------------------------------------------------------------
# gradients

def _topological(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def grad(output, wrt):
    """Cotangents of a scalar output with respect to each node in `wrt`.

    Returns Nodes, so the results can be differentiated again (double
    backward). Nodes in `wrt` that the output does not depend on get zeros.
    """
    if not isinstance(output, Node):
        raise TypeError("grad needs a Node output")
    if output.value.ndim != 0:
        raise ValueError("grad needs a scalar output; reduce with sum_ first")
    order = _topological(output)
    wrt_ids = {id(w) for w in wrt}
    need = set(wrt_ids)
    for node in order:  # parents first
        if id(node) in need:
            continue
        if any(id(p) in need for p in node._parents):
            need.add(id(node))
    cot = {id(output): np.ones(())}
    for node in reversed(order):
        g = cot.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            if id(parent) not in need:
                continue
            contrib = vjp(g)
            prev = cot.get(id(parent))
            cot[id(parent)] = contrib if prev is None else add(prev, contrib)
    results = []
    for w in wrt:
        g = cot.get(id(w))
        if g is None:
            g = Node(np.zeros(w.value.shape))
        elif not isinstance(g, Node):
            g = Node(np.broadcast_to(g, w.value.shape).copy())
        results.append(g)
    return results


# ---------------------------------------------------------------------------
# wavefunction derivative drivers

def _check_off_node(slv):
    if np.any(value_of(slv.sign) == 0):
        raise NodeEvaluation("log|psi| derivative requested on the node set (sign = 0)")


def grad_logpsi(psi_log, x):
    """Gradient of log|psi| at x by one reverse sweep.

    `psi_log` maps a configuration (or a batch with a leading axis) to a
    signed log value; x is flat (dN,) or batched (B, dN). Returns an array
    shaped like x.
    """
    leaf = Node(x)
    slv = psi_log(leaf)
    _check_off_node(slv)
    total = sum_(slv.log_abs) if _shape_of(slv.log_abs) else slv.log_abs
    return grad(total, [leaf])[0].value


def laplacian_logpsi(psi_log, x):
    """Sum of per-coordinate second derivatives of log|psi|.

    Runs one gradient sweep and then one repeated-reverse sweep per
    coordinate, so the cost is O(dN) evaluations of psi. For batched x the
    walkers are independent and all batch rows are handled in each sweep;
    returns a scalar for flat x, a (B,) array for batched x.
    """
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim > 1
    leaf = Node(x)
    slv = psi_log(leaf)
    _check_off_node(slv)
    total = sum_(slv.log_abs) if _shape_of(slv.log_abs) else slv.log_abs
    g = grad(total, [leaf])[0]
    ncoord = x.shape[-1]
    out = np.zeros(x.shape[:-1])
    for i in range(ncoord):
        gi = getitem(g, (Ellipsis, i))
        gi_total = sum_(gi) if _shape_of(gi) else gi
        hess_row = grad(gi_total, [leaf])[0].value
        out = out + hess_row[..., i]
    return out if batched else float(out)
