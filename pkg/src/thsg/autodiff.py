"""Small reverse-mode autodiff over 2-D float64 arrays.

Every value is a ``Tensor`` holding a (rows, cols) numpy array.  Operations
record their parents and a local backward rule; ``backward(root)`` orders the
recorded graph topologically into a ``Tape`` and propagates adjoints.

Products with a short inner dimension (<= ORDERED_INNER_MAX) accumulate in a
fixed left-to-right order, so they equal a naive triple loop bit-for-bit;
longer ones go to BLAS, which is deterministic on a given platform.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
ORDERED_INNER_MAX = 16


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "flags")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ContractError(f"Tensor must be 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite entries produced by {op}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.flags = {}

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def ordered_matmul(a, b):
    """``a @ b`` accumulated strictly in inner-index order, starting from 0.0."""
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if a.shape[1] > ORDERED_INNER_MAX:
        return a @ b
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(out):
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(out.grad, b.shape))

    return _result(out_data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(out):
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(-out.grad, b.shape))

    return _result(out_data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(out):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

    return _result(out_data, (a, b), backward, "mul")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = ordered_matmul(a.data, b.data)

    def backward(out):
        if a.requires_grad:
            _accumulate(a, ordered_matmul(out.grad, b.data.T))
        if b.requires_grad:
            _accumulate(b, ordered_matmul(a.data.T, out.grad))

    return _result(out_data, (a, b), backward, "matmul")


def affine_forward(x, W, b):
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.shape[1] != W.shape[0] or b.shape != (1, W.shape[1]):
        raise ContractError(
            f"affine shapes do not conform: x{x.shape} W{W.shape} b{b.shape}"
        )
    return add(matmul(x, W), b)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(out):
        _accumulate(x, out.grad * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def l2_normalize(x):
    """Row-wise unit normalisation.

    Rows with norm below 1e-12 pass through unchanged (identity gradient) and
    are reported in ``out.flags["degenerate_rows"]``.
    """
    x = as_tensor(x)
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    degenerate = norms[:, 0] < NORM_EPS
    safe = np.where(degenerate[:, None], 1.0, norms)
    y = x.data / safe
    if degenerate.any():
        log.warning("l2_normalize: %d degenerate row(s) left unnormalised", int(degenerate.sum()))

    def backward(out):
        g = out.grad
        proj = np.sum(y * g, axis=1, keepdims=True)
        gx = (g - y * proj) / safe
        gx[degenerate] = g[degenerate]
        _accumulate(x, gx)

    out = _result(y, (x,), backward, "l2_normalize")
    if degenerate.any():
        out.flags["degenerate_rows"] = np.flatnonzero(degenerate)
    return out


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(out):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accumulate(t, out.grad[lo:hi] if axis == 0 else out.grad[:, lo:hi])

    return _result(data, tuple(tensors), backward, "concat")


def rows(x, index):
    """Gather rows ``x[index]``; repeated indices accumulate in backward."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def backward(out):
        g = np.zeros_like(x.data)
        np.add.at(g, index, out.grad)
        _accumulate(x, g)

    return _result(x.data[index], (x,), backward, "rows")


def row_sqnorm(x):
    x = as_tensor(x)

    def backward(out):
        _accumulate(x, 2.0 * x.data * out.grad)

    return _result(np.sum(x.data * x.data, axis=1, keepdims=True), (x,), backward, "row_sqnorm")


def total(x):
    x = as_tensor(x)

    def backward(out):
        _accumulate(x, np.full_like(x.data, out.grad[0, 0]))

    return _result(np.sum(x.data).reshape(1, 1), (x,), backward, "sum")


def mean(x):
    x = as_tensor(x)
    n = x.data.size

    def backward(out):
        _accumulate(x, np.full_like(x.data, out.grad[0, 0] / n))

    return _result(np.mean(x.data).reshape(1, 1), (x,), backward, "mean")


def softmax_ce(logits, labels):
    """Mean cross-entropy of integer ``labels`` under row-softmax of ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ContractError(f"{labels.shape[0]} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1))
    picked = z[np.arange(n), labels]
    loss = np.mean(lse - picked)

    def backward(out):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        _accumulate(logits, p * (out.grad[0, 0] / n))

    return _result(np.reshape(loss, (1, 1)), (logits,), backward, "softmax_ce")


def softmax(logits):
    """Plain (non-differentiable) row softmax of an array or Tensor."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Tape:
    """Recorded graph in topological order (inputs before consumers)."""

    nodes: list = field(default_factory=list)

    @property
    def leaves(self):
        return [n for n in self.nodes if n.requires_grad and not n._parents]


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Fill ``.grad`` of every grad-requiring tensor reachable from ``root``.

    Gradients are reset first, so after the call each leaf holds exactly
    d(root)/d(leaf).  Leaves the root does not depend on keep ``grad=None``.
    """
    if not isinstance(root, Tensor) or root.shape != (1, 1):
        raise ContractError("backward() needs a scalar (1x1) root tensor")
    tape = Tape(_topological(root) if root.requires_grad else [root])
    for node in tape.nodes:
        node.grad = None
    root.grad = np.ones((1, 1))
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
    return tape


@dataclass
class AdamState:
    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default=None)
    v: list = field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = [np.zeros_like(p.data) for p in self.params]
        if self.v is None:
            self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state: AdamState, grads=None):
    """One Adam update with decoupled weight decay, in place on ``state.params``.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient is
    treated as zero.
    """
    if grads is None:
        grads = [p.grad for p in state.params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(state.params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return state.params


def clip_grad_norm(grads, max_norm):
    """Return ``(grads scaled to global L2 norm <= max_norm, original norm)``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm
