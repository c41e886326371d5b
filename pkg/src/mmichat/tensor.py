"""Dense 2-D arrays and a reverse-mode gradient tape.

Matrices are plain ``numpy`` arrays (float64 for training, float32 allowed
for inference).  Vectors are handled either as 1-D arrays or 1xN rows.

Two interchangeable "op sets" expose the same methods:

* ``eager`` computes values only (decoding, scoring);
* ``Tape`` computes values and records how to push gradients back.

Model code is written once against that shared surface and takes the op
set as an argument.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values produced by {what}")


# -- value-level primitives -------------------------------------------------

def matmul(a, b):
    a = np.asarray(a, dtype=np.float64) if not isinstance(a, np.ndarray) else a
    b = np.asarray(b, dtype=np.float64) if not isinstance(b, np.ndarray) else b
    if a.ndim != 2 or b.ndim != 2:
        raise InputError(f"matmul expects 2-D matrices, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise InputError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x):
    # tanh form saturates cleanly at both ends; exp(-x) would overflow
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tanh(x):
    return np.tanh(np.asarray(x))


def log_softmax(x):
    """Row-wise (last axis) log-softmax with max subtraction."""
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, np.ndarray) else x
    if x.shape[-1] < 1:
        raise InputError("log_softmax of an empty vector")
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    # only row-vector broadcasting is ever used (biases, masks)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


class _Eager:
    """Op set that only computes values."""

    def value(self, x):
        return x

    def matmul(self, a, b):
        return matmul(a, b)

    def add(self, a, b):
        return a + b

    def mul(self, a, b):
        return a * b

    def sigmoid(self, x):
        return sigmoid(x)

    def tanh(self, x):
        return np.tanh(x)

    def concat(self, xs, axis=1):
        return np.concatenate(xs, axis=axis)

    def cols(self, x, start, stop):
        return x[:, start:stop]

    def transpose(self, x):
        return x.T

    def take_rows(self, table, ids):
        return table[np.asarray(ids, dtype=np.intp)]

    def where(self, mask, a, b):
        return np.where(mask, a, b)

    def log_softmax(self, x):
        return log_softmax(x)


eager = _Eager()


# -- tape -------------------------------------------------------------------

class Var:
    """A value on a tape.  ``grad`` is filled by :meth:`Tape.backward`."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Var{label} shape={self.value.shape}>"


def _v(x):
    return x.value if isinstance(x, Var) else x


class Tape(_Eager):
    """Records every op applied to :class:`Var` inputs.

    Nodes are appended in creation order, which is already a topological
    order, so the backward pass is a single reverse sweep.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: list[Var] = []

    def param(self, value, name=None) -> Var:
        var = Var(value, name=name)
        self.leaves.append(var)
        return var

    def _record(self, value, parents, backward_fn):
        var = Var(value, parents, backward_fn)
        self.nodes.append(var)
        return var

    def value(self, x):
        return _v(x)

    def matmul(self, a, b):
        av, bv = _v(a), _v(b)
        out = matmul(av, bv)
        return self._record(out, (a, b), lambda g: (g @ bv.T, av.T @ g))

    def add(self, a, b):
        av, bv = _v(a), _v(b)
        return self._record(
            av + bv, (a, b),
            lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
        )

    def mul(self, a, b):
        av, bv = _v(a), _v(b)
        return self._record(
            av * bv, (a, b),
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        )

    def sigmoid(self, x):
        s = sigmoid(_v(x))
        return self._record(s, (x,), lambda g: (g * s * (1.0 - s),))

    def tanh(self, x):
        t = np.tanh(_v(x))
        return self._record(t, (x,), lambda g: (g * (1.0 - t * t),))

    def concat(self, xs, axis=1):
        vals = [_v(x) for x in xs]
        splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return self._record(
            np.concatenate(vals, axis=axis), tuple(xs),
            lambda g: tuple(np.split(g, splits, axis=axis)),
        )

    def cols(self, x, start, stop):
        xv = _v(x)

        def back(g):
            full = np.zeros_like(xv)
            full[:, start:stop] = g
            return (full,)

        return self._record(xv[:, start:stop], (x,), back)

    def transpose(self, x):
        return self._record(_v(x).T, (x,), lambda g: (g.T,))

    def take_rows(self, table, ids):
        tv = _v(table)
        ids = np.asarray(ids, dtype=np.intp)

        def back(g):
            full = np.zeros_like(tv)
            np.add.at(full, ids, g)
            return (full,)

        return self._record(tv[ids], (table,), back)

    def where(self, mask, a, b):
        av, bv = _v(a), _v(b)
        mask = np.asarray(mask, dtype=bool)
        return self._record(
            np.where(mask, av, bv), (a, b),
            lambda g: (_unbroadcast(np.where(mask, g, 0.0), av.shape),
                       _unbroadcast(np.where(mask, 0.0, g), bv.shape)),
        )

    def log_softmax(self, x):
        out = log_softmax(_v(x))
        p = np.exp(out)
        return self._record(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))

    def pick_sum(self, logp, ids, weights):
        """Weighted sum of ``logp[r, ids[r]]`` over rows; returns a 1x1 node."""
        lv = _v(logp)
        rows = np.arange(lv.shape[0])
        ids = np.asarray(ids, dtype=np.intp)
        weights = np.asarray(weights, dtype=lv.dtype)
        total = np.array([[np.dot(lv[rows, ids], weights)]])

        def back(g):
            full = np.zeros_like(lv)
            full[rows, ids] = weights * g[0, 0]
            return (full,)

        return self._record(total, (logp,), back)

    def sum(self, x):
        xv = _v(x)
        return self._record(np.array([[xv.sum()]]), (x,), lambda g: (np.full_like(xv, g[0, 0]),))

    def scale(self, x, k: float):
        return self._record(_v(x) * k, (x,), lambda g: (g * k,))

    def backward(self, loss) -> list[np.ndarray]:
        """Reverse sweep from a scalar ``loss``.

        Returns gradients for every leaf created with :meth:`param`, in
        creation order.  Leaves that the loss does not depend on get zeros.
        """
        if not isinstance(loss, Var):
            raise InputError("loss is not a node on this tape")
        if loss.value.size != 1:
            raise InputError(f"loss must be scalar, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        for leaf in self.leaves:
            leaf.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                if not isinstance(parent, Var):
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
        grads = []
        for leaf in self.leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.value)
            grads.append(leaf.grad)
        return grads
