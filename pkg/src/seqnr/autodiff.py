"""Reverse-mode automatic differentiation on a tape of numpy arrays.

A :class:`Tape` records every operation applied to tensors that descend
from a tape variable. Tensors without a tape are constants: operations on
them compute values and record nothing, so the same model code runs both
the training path and the inference path.

Example::

    tape = Tape()
    x = tape.variable(np.array([1.0, 2.0]))
    y = ad.sum(ad.sin(x) * x)
    grads = backward(y)
    grads[x]
"""

import numpy as np
from scipy.special import expit

from seqnr import linalg
from seqnr.errors import ContractViolation
from seqnr.instrument import CALLS


class _Node:
    __slots__ = ("tag", "parents", "vjp", "shape")

    def __init__(self, tag, parents, vjp, shape):
        self.tag = tag
        self.parents = parents
        self.vjp = vjp
        self.shape = shape


class Tape:
    """Append-only record of operations; node ids are positions in ``nodes``."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def variable(self, value, name=None):
        value = np.array(value, dtype=np.float64)
        t = Tensor(value, self, len(self.nodes), name=name)
        self.nodes.append(_Node("leaf", (), None, value.shape))
        return t

    def _push(self, tag, value, parents, vjp):
        node_id = len(self.nodes)
        self.nodes.append(_Node(tag, parents, vjp, value.shape))
        return Tensor(value, self, node_id)


class Tensor:
    __slots__ = ("value", "tape", "node_id", "name")
    __array_priority__ = 100

    def __init__(self, value, tape=None, node_id=None, name=None):
        self.value = value
        self.tape = tape
        self.node_id = node_id
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.value)

    def __repr__(self):
        where = "const" if self.tape is None else f"node {self.node_id}"
        return f"Tensor(shape={self.shape}, {where})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    def __rmul__(self, other):
        return hadamard(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)


def constant(value):
    return Tensor(np.asarray(value, dtype=np.float64))


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(tag, value, inputs, vjp):
    """Attach ``value`` to the tape shared by ``inputs``.

    ``vjp(g)`` returns one gradient (or ``None``) per input.
    """
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractViolation("tensors belong to different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    parents = tuple(t.node_id if t.tape is not None else None for t in inputs)
    return tape._push(tag, value, parents, vjp)


def custom_op(tag, value, inputs, vjp):
    """Record an operation with a hand-written vector-Jacobian product."""
    inputs = [_lift(t) for t in inputs]
    return _record(tag, np.asarray(value, dtype=np.float64), inputs, vjp)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(tag, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{tag}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary -----------------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def subtract(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _record("subtract", a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def hadamard(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast("hadamard", a, b)
    av, bv = a.value, b.value
    return _record("hadamard", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def divide(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast("divide", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _record("divide", out, (a, b),
                   lambda g: (_unbroadcast(g / bv, av.shape),
                              _unbroadcast(-g * out / bv, bv.shape)))


def scale(a, c):
    a = _lift(a)
    c = float(c)
    return _record("scale", a.value * c, (a,), lambda g: (g * c,))


# -- linear algebra and shape ----------------------------------------------


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    sa, sb = av.shape, bv.shape
    if bv.ndim == 2 and av.ndim > 2:
        # stacked rows against one matrix: fold the batch axes into rows
        a2 = av.reshape(-1, sa[-1])

        def vjp_rows(g):
            g2 = g.reshape(-1, sb[-1])
            return (g2 @ bv.T).reshape(sa), a2.T @ g2

        return _record("matmul", (a2 @ bv).reshape(sa[:-1] + sb[-1:]), (a, b), vjp_rows)

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _record("matmul", av @ bv, (a, b), vjp)


def transpose(a, axes=None):
    """Swap the last two axes, or permute by ``axes``."""
    a = _lift(a)
    if axes is None:
        if a.ndim < 2:
            raise ContractViolation("transpose needs at least two axes")
        return _record("transpose", np.swapaxes(a.value, -1, -2), (a,),
                       lambda g: (np.swapaxes(g, -1, -2),))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.value, axes), (a,),
                   lambda g: (np.transpose(g, inverse),))


def reshape(a, shape):
    a = _lift(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot reshape {old} to {shape}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ContractViolation(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record("concat", out, tensors, vjp)


def slice_(a, index):
    """Basic (non-fancy) indexing."""
    a = _lift(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _record("slice", a.value[index], (a,), vjp)


def take(a, indices, axis=0):
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = _lift(a)
    indices = np.asarray(indices, dtype=np.intp)
    flat_idx = indices.reshape(-1)
    shape = a.shape
    pre, post = shape[:axis], shape[axis + 1:]
    out = np.take(a.value, flat_idx, axis=axis).reshape(pre + indices.shape + post)
    lead = (slice(None),) * axis

    def vjp(g):
        res = np.zeros(shape)
        np.add.at(res, lead + (flat_idx,), g.reshape(pre + (flat_idx.size,) + post))
        return (res,)

    return _record("take", out, (a,), vjp)


def where(mask, a, b):
    """Select ``a`` where ``mask`` holds, else ``b``; ``mask`` is a constant."""
    mask = np.asarray(mask, dtype=bool)
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _record("where", np.where(mask, a.value, b.value), (a, b),
                   lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa),
                              _unbroadcast(np.where(mask, 0.0, g), sb)))


# -- reductions -------------------------------------------------------------


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = _lift(a)
    shape = a.shape
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def frobenius_norm(a, axis=None):
    """Euclidean norm over ``axis`` (all axes by default); gradient 0 at 0."""
    a = _lift(a)
    av = a.value
    out = np.sqrt(np.sum(av * av, axis=axis))

    def vjp(g):
        denom = out if axis is None else np.expand_dims(out, axis)
        gg = g if axis is None else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            res = np.where(denom > 0.0, gg * av / np.where(denom > 0.0, denom, 1.0), 0.0)
        return (res,)

    return _record("frobenius_norm", np.asarray(out), (a,), vjp)


# -- elementwise unary ------------------------------------------------------


def sin(a):
    a = _lift(a)
    av = a.value
    return _record("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    a = _lift(a)
    av = a.value
    return _record("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def exp(a):
    a = _lift(a)
    out = np.exp(a.value)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = _lift(a)
    av = a.value
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    a = _lift(a)
    out = np.sqrt(a.value)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a):
    a = _lift(a)
    out = expit(a.value)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    return leaky_relu(a, 0.0)


def leaky_relu(a, slope=0.01):
    a = _lift(a)
    av = a.value
    pos = av > 0.0
    return _record("leaky_relu", np.where(pos, av, slope * av), (a,),
                   lambda g: (np.where(pos, g, slope * g),))


# -- custom-backward nodes --------------------------------------------------


def nuclear_norm_node(a):
    """Sum of singular values of the trailing matrix; leading axes batch.

    Backward is the upstream value times ``U @ V.T`` (subgradient).
    """
    a = _lift(a)
    if a.ndim < 2:
        raise ContractViolation("nuclear_norm_node needs a matrix")
    CALLS["nuclear_norm_node"] += 1
    av = a.value
    value = linalg.nuclear_norm(av)

    def vjp(g):
        return (np.asarray(g)[..., None, None] * linalg.nuclear_norm_subgrad(av),)

    return _record("nuclear_norm", np.asarray(value), (a,), vjp)


# -- backward ---------------------------------------------------------------


class Gradients:
    """Mapping from tensors on one tape to their accumulated gradients."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, tensor):
        if tensor.tape is not self._tape:
            raise ContractViolation("tensor is not on the differentiated tape")
        g = self._grads[tensor.node_id]
        if g is None:
            return np.zeros(tensor.shape)
        return g

    def by_node(self, node_id):
        return self._grads[node_id]


def backward(root, upstream=1.0):
    """Propagate ``upstream * d(root)`` to every ancestor of ``root``."""
    if not isinstance(root, Tensor) or root.tape is None:
        raise ContractViolation("backward needs a tensor recorded on a tape")
    if root.size != 1:
        raise ContractViolation(f"backward root must be scalar, got shape {root.shape}")
    tape = root.tape
    nodes = tape.nodes
    grads = [None] * len(nodes)
    grads[root.node_id] = np.full(root.shape, float(upstream))
    for node_id in range(root.node_id, -1, -1):
        g = grads[node_id]
        if g is None:
            continue
        node = nodes[node_id]
        if node.vjp is None:
            continue
        contributions = node.vjp(g)
        for parent, pg in zip(node.parents, contributions):
            if parent is None or pg is None:
                continue
            if grads[parent] is None:
                grads[parent] = np.array(pg, dtype=np.float64).reshape(nodes[parent].shape)
            else:
                grads[parent] = grads[parent] + pg
    return Gradients(tape, grads)


def gradcheck(function, point, step=1e-5):
    """Worst relative error between tape and central-difference gradients.

    ``function`` maps a :class:`Tensor` to a scalar :class:`Tensor`. The
    error per coordinate is ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ContractViolation(f"gradcheck step {step} outside [1e-7, 1e-3]")
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.variable(point)
    g_ad = backward(function(x))[x]
    g_fd = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += step
        minus[i] -= step
        fp = function(Tensor(plus.reshape(point.shape))).item()
        fm = function(Tensor(minus.reshape(point.shape))).item()
        g_fd.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    err = np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float(err.max()) if err.size else 0.0
