"""Reverse-mode automatic differentiation over small dense float64 tensors.

A Tape records every operation; Tensors are thin handles around numpy
arrays with an optional tape node id. Operations on tensors that are not
attached to a tape just compute values (used for target networks and
finite-difference probes, which need no gradients). The tape is rebuilt
for every training update, so gradients from one update can never leak
into the next.

Conventions for nondifferentiable points: relu'(0) = 0 and the subgradient
of abs at 0 is 0. ELU uses alpha = 1.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class EmptyTensorError(ValueError):
    """An operand has zero elements."""


class DetachedNodeError(ValueError):
    """backward() was called on a tensor that is not on a tape."""


class Tensor:
    """Dense float64 array, optionally registered on a tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, on_tape={self.node_id is not None})"


class Tape:
    """Append-only operation record.

    Every node stores its parents' ids (all smaller than its own id) and a
    closure mapping the output gradient to parent gradients.
    """

    def __init__(self):
        self._parents = []
        self._backwards = []
        self._shapes = []

    def __len__(self):
        return len(self._parents)

    def leaf(self, data):
        """Register a leaf (parameter or input) and return its Tensor."""
        t = Tensor(data)
        t.tape = self
        t.node_id = self._record([], None, t.data.shape)
        return t

    def _record(self, parent_ids, backward, shape):
        self._parents.append(tuple(parent_ids))
        self._backwards.append(backward)
        self._shapes.append(shape)
        return len(self._parents) - 1

    def backward(self, loss):
        """Gradient of a scalar loss w.r.t. every tape node.

        Returns a list indexed by node id; unreachable nodes get zeros of
        their recorded shape.
        """
        if loss.tape is not self or loss.node_id is None:
            raise DetachedNodeError("loss tensor is not on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
        grads = [None] * len(self._parents)
        grads[loss.node_id] = np.ones(self._shapes[loss.node_id])
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            bw = self._backwards[nid]
            if bw is None:
                continue
            for pid, pg in zip(self._parents[nid], bw(g)):
                if pg is None:
                    continue
                # accumulation always allocates, so aliasing pg is safe
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        for nid in range(len(grads)):
            if grads[nid] is None:
                grads[nid] = np.zeros(self._shapes[nid])
        return grads


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = t.tape
    return tape


def _check_nonempty(op, *tensors):
    for t in tensors:
        if t.data.size == 0:
            raise EmptyTensorError(f"{op}: empty tensor operand")


def _result(op_tensors, data, backward):
    """Register data on the operands' tape (if any) and wrap it."""
    tape = _tape_of(*op_tensors)
    out = Tensor(data)
    if tape is not None:
        pids = [t.node_id for t in op_tensors if t.tape is not None]
        on_tape = [t.tape is not None for t in op_tensors]

        def bw(g, _backward=backward, _on=on_tape):
            full = _backward(g)
            return [pg for pg, keep in zip(full, _on) if keep]

        out.tape = tape
        out.node_id = tape._record(pids, bw, out.data.shape)
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_nonempty("add", a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _result(
        [a, b],
        data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_nonempty("mul", a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _result(
        [a, b],
        data,
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def scale(a, c):
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    _check_nonempty("scale", a)
    c = float(c)
    return _result([a], a.data * c, lambda g: (g * c,))


def add_const(a, c):
    a = as_tensor(a)
    _check_nonempty("add_const", a)
    return _result([a], a.data + float(c), lambda g: (g,))


def sub(a, b):
    return add(a, scale(b, -1.0))


def matmul(a, b):
    """2-D x 2-D or batched 3-D x 3-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_nonempty("matmul", a, b)
    if a.data.ndim not in (2, 3) or b.data.ndim != a.data.ndim:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or (
        a.data.ndim == 3 and a.shape[0] != b.shape[0]
    ):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    data = a.data @ b.data

    def bw(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return _result([a, b], data, bw)


def relu(a):
    a = as_tensor(a)
    _check_nonempty("relu", a)
    data = np.maximum(a.data, 0.0)
    return _result([a], data, lambda g: (g * (a.data > 0.0),))


def elu(a, alpha=1.0):
    a = as_tensor(a)
    _check_nonempty("elu", a)
    neg = a.data <= 0.0
    expm = alpha * (np.exp(np.minimum(a.data, 0.0)) - 1.0)
    data = np.where(neg, expm, a.data)
    return _result([a], data, lambda g: (g * np.where(neg, expm + alpha, 1.0),))


def tanh(a):
    a = as_tensor(a)
    _check_nonempty("tanh", a)
    data = np.tanh(a.data)
    return _result([a], data, lambda g: (g * (1.0 - data * data),))


def sigmoid(a):
    a = as_tensor(a)
    _check_nonempty("sigmoid", a)
    data = 1.0 / (1.0 + np.exp(-a.data))
    return _result([a], data, lambda g: (g * data * (1.0 - data),))


def softmax(a):
    """Softmax over the last axis, numerically stabilized."""
    a = as_tensor(a)
    _check_nonempty("softmax", a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _result([a], data, bw)


def log(a):
    a = as_tensor(a)
    _check_nonempty("log", a)
    return _result([a], np.log(a.data), lambda g: (g / a.data,))


def abs_(a):
    a = as_tensor(a)
    _check_nonempty("abs", a)
    # sign(0) = 0 realizes the chosen subgradient at the kink
    return _result([a], np.abs(a.data), lambda g: (g * np.sign(a.data),))


def square(a):
    a = as_tensor(a)
    _check_nonempty("square", a)
    return _result([a], a.data * a.data, lambda g: (g * 2.0 * a.data,))


def sum_(a, axis=None):
    a = as_tensor(a)
    _check_nonempty("sum", a)
    data = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result([a], data, bw)


def mean_(a, axis=None):
    a = as_tensor(a)
    _check_nonempty("mean", a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def gather(a, index):
    """Select along the last axis: out[...] = a[..., index[...]].

    index has a's shape minus the last axis; gradient scatters back.
    """
    a = as_tensor(a)
    _check_nonempty("gather", a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ShapeError(
            f"gather: index shape {index.shape} != leading shape {a.shape[:-1]}"
        )
    if index.size and (index.min() < 0 or index.max() >= a.shape[-1]):
        raise IndexError("gather: index out of range")
    data = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def bw(g):
        out = np.zeros(a.shape)
        np.put_along_axis(out, index[..., None], g[..., None], axis=-1)
        return (out,)

    return _result([a], data, bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    _check_nonempty("concat", *tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(tensors, data, bw)


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return _result([a], data, lambda g: (g.reshape(a.shape),))


def gru_cell(x, h, wz, wr, wn, bz, br, bn):
    """Fused GRU step (kernel-backed tape primitive).

    x: (B, I), h: (B, H), weights (I+H, H), biases (H,). Returns (B, H).
    """
    ops = [as_tensor(t) for t in (x, h, wz, wr, wn, bz, br, bn)]
    x, h, wz, wr, wn, bz, br, bn = ops
    i, hd = x.shape[1], h.shape[1]
    for name, w in (("wz", wz), ("wr", wr), ("wn", wn)):
        if w.shape != (i + hd, hd):
            raise ShapeError(
                f"gru_cell: {name} shape {w.shape}, expected {(i + hd, hd)}"
            )
    for name, b_ in (("bz", bz), ("br", br), ("bn", bn)):
        if b_.shape != (hd,):
            raise ShapeError(f"gru_cell: {name} shape {b_.shape}, expected {(hd,)}")
    if x.shape[0] != h.shape[0]:
        raise ShapeError(f"gru_cell: batch mismatch {x.shape} vs {h.shape}")

    h_new, cache = kernels.gru_forward(
        x.data, h.data, wz.data, wr.data, wn.data, bz.data, br.data, bn.data
    )

    def bw(g):
        return kernels.gru_backward(cache, wz.data, wr.data, wn.data, g)

    return _result(ops, h_new, bw)


_FORWARD_DISPATCH = {
    "matmul": matmul,
    "add": add,
    "elementwise-mul": mul,
    "relu": relu,
    "elu": elu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax-over-last-axis": softmax,
    "abs": abs_,
    "sum": sum_,
    "mean": mean_,
    "gather-index": gather,
    "concat": concat,
    "square": square,
    "scalar-scale": scale,
    "log": log,
}


def forward_eval(op_kind, *inputs):
    """Evaluate a primitive by name (registered on the inputs' tape)."""
    try:
        fn = _FORWARD_DISPATCH[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind: {op_kind!r}")
    if op_kind == "concat":
        return fn(inputs)
    return fn(*inputs)


def grads_for(gradmap, tensors):
    """Pull gradients for given leaf tensors out of a Tape.backward result."""
    return [gradmap[t.node_id] for t in tensors]


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, x, h=1e-5, kink_rtol=1e-3):
    """Max relative error between analytic and central-difference gradients.

    f maps a leaf Tensor to a scalar Tensor; a fresh tape is built per
    evaluation. Coordinates where the one-sided difference quotients
    disagree by more than kink_rtol (relative) sit within h of a kink and
    are skipped.
    """
    x0 = np.asarray(x, dtype=np.float64)

    tape = Tape()
    xt = tape.leaf(x0)
    loss = f(xt)
    analytic = tape.backward(loss)[xt.node_id]

    def eval_at(arr):
        return float(f(Tensor(arr)).data)

    f0 = eval_at(x0)
    flat = x0.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        pert = x0.copy().ravel()
        pert[i] = orig + h
        fp = eval_at(pert.reshape(x0.shape))
        pert[i] = orig - h
        fm = eval_at(pert.reshape(x0.shape))
        central = (fp - fm) / (2.0 * h)
        right = (fp - f0) / h
        left = (f0 - fm) / h
        denom = max(1.0, abs(right), abs(left))
        if abs(right - left) / denom > kink_rtol:
            continue  # nondifferentiable point policy: skip near kinks
        a = analytic.ravel()[i]
        err = abs(a - central) / max(1.0, abs(a))
        worst = max(worst, err)
    return worst
