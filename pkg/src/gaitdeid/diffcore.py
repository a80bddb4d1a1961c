"""Small dense reverse-mode autodiff engine over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` (one per thread).
A tape is meant to live for a single forward/backward pass::

    with Tape() as tape:
        z = Tensor(z0, requires_grad=True)
        loss = mean(sigmoid(matvec(W, z)))
    grads = tape.backward(loss)
    grads[z]
"""
from __future__ import annotations

import threading

import numpy as np

_NORM_GUARD = 1e-12
_local = threading.local()


class ShapeError(ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFiniteError(FloatingPointError):
    def __init__(self, op, where="input"):
        self.op = op
        super().__init__(f"{op}: non-finite value in {where}")


class Tensor:
    """A float64 array plus the bookkeeping needed for the reverse pass."""

    __slots__ = ("data", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor", "construction")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: scale(self, -1.0)


class _Node:
    __slots__ = ("op", "inputs", "output", "forward", "backward")

    def __init__(self, op, inputs, output, forward, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.forward = forward
        self.backward = backward


class Tape:
    """Ordered record of executed primitives.

    Entering the context makes this tape the thread's active tape. Nodes are
    appended in execution order, which is a valid topological order.
    """

    def __init__(self):
        self.nodes = []
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, root):
        """Return ``{leaf: d root / d leaf}`` for every grad-requiring leaf seen.

        Tensors hash by identity, so the result is keyed by the leaf objects.
        """
        if root.data.size != 1:
            raise ShapeError("backward (root must be scalar)", root.shape)
        grads = {id(root): np.ones_like(root.data)}
        leaves = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t._node is None:
                    leaves[id(t)] = t
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not _tracked(t):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            out[leaf] = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)
        if root.requires_grad and root._node is None:
            out[root] = np.ones_like(root.data)
        return out

    def replay(self):
        """Recompute every recorded output from its recorded inputs."""
        values = {}
        outs = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            val = node.forward(*args)
            values[id(node.output)] = val
            outs.append(val)
        return outs


def active_tape():
    return getattr(_local, "tape", None)


def _tracked(t):
    return t.requires_grad


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op, arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(op, where)


def _apply(op, inputs, forward, backward):
    """Run ``forward`` on the input arrays and record the node if needed."""
    for t in inputs:
        _check_finite(op, t.data, "input")
    with np.errstate(all="ignore"):
        out_arr = forward(*[t.data for t in inputs])
    _check_finite(op, out_arr, "output")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out_arr = np.asarray(out_arr, dtype=np.float64)
    out_arr.setflags(write=False)
    out.data = out_arr
    out.requires_grad = needs
    out._node = None
    tape = active_tape()
    if needs and tape is not None:
        node = _Node(op, tuple(inputs), out, forward, backward)
        out._node = node
        tape.nodes.append(node)
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 0 and b.data.ndim > 0:
        a = broadcast(a, b.shape)
    elif b.data.ndim == 0 and a.data.ndim > 0:
        b = broadcast(b, a.shape)
    _same_shape("add", a, b)
    return _apply("add", (a, b), np.add, lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 0 and b.data.ndim > 0:
        a = broadcast(a, b.shape)
    elif b.data.ndim == 0 and a.data.ndim > 0:
        b = broadcast(b, a.shape)
    _same_shape("sub", a, b)
    return _apply("sub", (a, b), np.subtract, lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 0 and b.data.ndim > 0:
        a = broadcast(a, b.shape)
    elif b.data.ndim == 0 and a.data.ndim > 0:
        b = broadcast(b, a.shape)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _apply("mul", (a, b), np.multiply, lambda g: (g * bd, g * ad))


def scale(a, s):
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    s = float(s)
    if not np.isfinite(s):
        raise NonFiniteError("scale", "scalar")
    return _apply("scale", (a,), lambda x: x * s, lambda g: (g * s,))


def broadcast(a, shape):
    a = as_tensor(a)
    if a.data.size != 1:
        raise ShapeError("broadcast", a.shape, tuple(shape))
    shape = tuple(shape)
    return _apply(
        "broadcast",
        (a,),
        lambda x: np.full(shape, x.reshape(-1)[0]),
        lambda g: (np.asarray(g.sum()).reshape(a.shape),),
    )


def sigmoid(a):
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _apply("sigmoid", (a,), _sigmoid, lambda g: (g * y * (1.0 - y),))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _apply("tanh", (a,), np.tanh, lambda g: (g * (1.0 - y * y),))


def sqrt(a, guard=0.0):
    """sqrt(a + guard); callers pass a positive guard where a can reach 0."""
    a = as_tensor(a)
    y = np.sqrt(a.data + guard)
    return _apply("sqrt", (a,), lambda x: np.sqrt(x + guard), lambda g: (g * 0.5 / y,))


def reciprocal(a):
    a = as_tensor(a)
    if np.any(a.data == 0):
        raise NonFiniteError("reciprocal", "input (division by zero)")
    y = 1.0 / a.data
    return _apply("reciprocal", (a,), lambda x: 1.0 / x, lambda g: (-g * y * y,))


def clamp(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _apply("clamp", (a,), lambda x: np.clip(x, lo, hi), lambda g: (g * inside,))


# reductions and products ---------------------------------------------------

def sum(a):  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    return _apply("sum", (a,), lambda x: np.asarray(x.sum()), lambda g: (np.full(shape, g.reshape(-1)[0]),))


def mean(a):
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _apply(
        "mean", (a,), lambda x: np.asarray(x.mean()), lambda g: (np.full(shape, g.reshape(-1)[0] / n),)
    )


def dot(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1:
        raise ShapeError("dot", a.shape, b.shape)
    _same_shape("dot", a, b)
    ad, bd = a.data, b.data
    return _apply("dot", (a, b), lambda x, y: np.asarray(x @ y), lambda g: (g * bd, g * ad))


def norm(a):
    """Guarded Euclidean norm sqrt(a.a + 1e-12)."""
    a = as_tensor(a)
    ad = a.data
    n = np.sqrt(ad @ ad + _NORM_GUARD) if ad.ndim == 1 else np.sqrt(np.sum(ad * ad) + _NORM_GUARD)
    return _apply(
        "norm",
        (a,),
        lambda x: np.asarray(np.sqrt(np.sum(x * x) + _NORM_GUARD)),
        lambda g: (g * ad / n,),
    )


def matvec(W, v):
    """W @ v. ``W`` may be a plain array (frozen weights) or a Tensor."""
    if not isinstance(W, Tensor):
        W = np.asarray(W, dtype=np.float64)
        v = as_tensor(v)
        if W.ndim != 2 or v.data.ndim != 1 or W.shape[1] != v.shape[0]:
            raise ShapeError("matvec", W.shape, v.shape)
        return _apply("matvec", (v,), lambda x: W @ x, lambda g: (W.T @ g,))
    v = as_tensor(v)
    if W.data.ndim != 2 or v.data.ndim != 1 or W.shape[1] != v.shape[0]:
        raise ShapeError("matvec", W.shape, v.shape)
    Wd, vd = W.data, v.data
    return _apply("matvec", (W, v), lambda M, x: M @ x, lambda g: (np.outer(g, vd), Wd.T @ g))


# structural ----------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError("reshape", a.shape, shape)
    old = a.shape
    return _apply("reshape", (a,), lambda x: x.reshape(shape), lambda g: (g.reshape(old),))


def concat(parts):
    parts = [as_tensor(p) for p in parts]
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError("concat", *[q.shape for q in parts])
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _apply(
        "concat", tuple(parts), lambda *xs: np.concatenate(xs), lambda g: tuple(np.split(g, sizes))
    )


def custom(op, inputs, forward, backward):
    """Record an op with hand-written forward/backward over raw arrays.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    return _apply(op, tuple(as_tensor(t) for t in inputs), forward, backward)


def normalize(a):
    """a / ||a|| with the guarded norm."""
    n = norm(a)
    return mul(a, broadcast(reciprocal(n), a.shape))
