"""Dense float64 tensors with reverse-mode gradient accumulation.

Every higher layer of the package (embedding, attention blocks, the full
model, the trainer) is built exclusively on the operations in this module.
Forward evaluation is plain numpy. While a Graph is active (``with Graph()
as g:``), each operation appends a node holding a backward closure to the
graph's tape; ``g.backward(loss)`` replays the tape in exact reverse order
and accumulates gradients additively into ``Tensor.grad``. Without an
active graph, operations evaluate forward-only.

Conventions:
  * all data is float64, row-major
  * gradient accumulation is additive; callers zero grads between steps
  * a graph can be backwarded exactly once
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ContractError, LabelError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Stack of active graphs; ops record onto the top entry (None = no-grad).
_GRAPH_STACK: list["Graph | None"] = []


def _active_graph():
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class Tensor:
    """A dense array with shape, strides (via numpy), and an optional grad slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node_id", "_graph")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node_id = None
        self._graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    """One recorded operation: op id, input node ids, and a backward closure."""

    __slots__ = ("id", "op", "inputs", "input_ids", "output", "backward_fn")

    def __init__(self, node_id, op, inputs, output, backward_fn):
        self.id = node_id
        self.op = op
        self.inputs = inputs
        self.input_ids = tuple(
            t._node_id if t._node_id is not None else -1 for t in inputs
        )
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Tape of operation records, appended in execution (= topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _GRAPH_STACK.pop()
        assert popped is self
        return False

    def record(self, op, inputs, output, backward_fn):
        node = Node(len(self.nodes), op, inputs, output, backward_fn)
        self.nodes.append(node)
        output._node_id = node.id
        output._graph = self
        return node

    def backward(self, loss: Tensor):
        """Reverse-sweep the tape from `loss`, accumulating into .grad slots."""
        if self.consumed:
            raise ContractError(
                "backward already ran on this graph; build a new forward pass"
            )
        if loss._graph is not self or loss._node_id is None:
            raise ContractError("backward target was not produced by this graph")
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar, got shape {loss.data.shape}"
            )
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward_fn(out_grad)):
                if grad is None:
                    continue
                if tensor.requires_grad or tensor._node_id is not None:
                    if tensor.grad is None:
                        tensor.grad = grad.copy() if grad.base is not None else grad
                    else:
                        tensor.grad = tensor.grad + grad
        # the tape is single-use; drop it now so a training loop's
        # intermediates free by refcount instead of waiting on gc to find
        # the tensor->graph->node->tensor cycles
        self.nodes.clear()


class no_grad:
    """Context manager: operations inside are not recorded."""

    def __enter__(self):
        _GRAPH_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _GRAPH_STACK.pop()
        return False


def _tracked(t: Tensor, g: Graph):
    return t.requires_grad or (t._graph is g and t._node_id is not None)


def _record(op, inputs, out_data, backward_fn):
    out = Tensor(out_data)
    g = _active_graph()
    if g is not None and any(_tracked(t, g) for t in inputs):
        g.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", (a, b), out_data, bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _record("sub", (a, b), out_data, bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record("mul", (a, b), out_data, bwd)


def scale(a, c: float):
    """Multiply by a python constant (no gradient for the constant)."""
    a = as_tensor(a)
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return _record(
        "reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),)
    )


def moveaxis(a, src, dst):
    a = as_tensor(a)
    return _record(
        "moveaxis",
        (a,),
        np.moveaxis(a.data, src, dst),
        lambda g: (np.moveaxis(g, dst, src),),
    )


def swap_last2(a):
    a = as_tensor(a)
    return _record(
        "swap_last2",
        (a,),
        np.swapaxes(a.data, -1, -2),
        lambda g: (np.swapaxes(g, -1, -2),),
    )


def expand(a, shape):
    """Broadcast `a` to `shape`; backward sums over the broadcast axes."""
    a = as_tensor(a)
    out_data = np.broadcast_to(a.data, shape)
    return _record(
        "expand", (a,), out_data, lambda g: (_unbroadcast(g, a.data.shape),)
    )


def getitem(a, idx):
    """Basic (slice / integer) indexing; backward scatters into zeros."""
    a = as_tensor(a)
    out_data = a.data[idx]
    shape = a.data.shape

    def bwd(g):
        buf = np.zeros(shape)
        buf[idx] += g
        return (buf,)

    return _record("getitem", (a,), out_data, bwd)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), out_data, bwd)


def tsum(a, axis=None):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", (a,), out_data, bwd)


def tmean(a, axis):
    a = as_tensor(a)
    n = a.data.shape[axis]
    out_data = a.data.mean(axis=axis)
    shape = a.data.shape

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return _record("mean", (a,), out_data, bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Stacked matrix product; leading batch dims of a and b must agree."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs rank >= 2 operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(
            f"matmul batch dims differ: {a.data.shape} @ {b.data.shape}"
        )
    out_data = a.data @ b.data

    def bwd(g):
        return (
            g @ np.swapaxes(b.data, -1, -2),
            np.swapaxes(a.data, -1, -2) @ g,
        )

    return _record("matmul", (a, b), out_data, bwd)


def linear(x, w, b=None):
    """y = x W^T + b for x[..., Din], w[Dout, Din], optional b[Dout]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.shape[-1] != w.data.shape[-1]:
        raise ShapeError(
            f"linear: input last dim {x.data.shape[-1]} does not match weight "
            f"columns {w.data.shape[-1]} (x {x.data.shape}, W {w.data.shape})"
        )
    lead = x.data.shape[:-1]
    din = x.data.shape[-1]
    dout = w.data.shape[0]
    x2 = x.data.reshape(-1, din)
    y2 = x2 @ w.data.T
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (dout,):
            raise ShapeError(
                f"linear: bias shape {b.data.shape} does not match output dim {dout}"
            )
        y2 = y2 + b.data
    out_data = y2.reshape(lead + (dout,))
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ w.data).reshape(x.data.shape)
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record("linear", inputs, out_data, bwd)


# ---------------------------------------------------------------------------
# nonlinearities and losses


def softmax(v):
    """Row-wise softmax over the last axis, computed with max subtraction."""
    v = as_tensor(v)
    if v.data.shape[-1] == 0:
        raise ShapeError("softmax: empty last axis")
    shifted = v.data - v.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - dot),)

    return _record("softmax", (v,), out_data, bwd)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Per-row normalization over the last axis (population variance), then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = gamma.data * xhat + beta.data

    def bwd(g):
        lead_axes = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead_axes)
        ggamma = (g * xhat).sum(axis=lead_axes)
        gx_hat = g * gamma.data
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = (gx_hat - m1 - xhat * m2) * inv
        return gx, ggamma, gbeta

    return _record("layer_norm", (x, gamma, beta), out_data, bwd)


def gelu(x):
    """Exact-erf GELU: x * Phi(x)."""
    x = as_tensor(x)
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * phi_cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi_cdf + x.data * pdf),)

    return _record("gelu", (x,), out_data, bwd)


def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label].

    logits: Tensor[B, C]; labels: integer array-like of length B.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(
            f"cross_entropy expects logits [B, C], got {logits.data.shape}"
        )
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise ShapeError(
            f"cross_entropy: labels shape {labels.shape} does not match "
            f"batch {logits.data.shape[0]}"
        )
    n, c = logits.data.shape
    for i, lab in enumerate(labels):
        if not 0 <= int(lab) < c:
            raise LabelError(f"label {int(lab)} at index {i} outside [0, {c})")
    labels = labels.astype(np.int64)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    out_data = np.asarray(-logp[np.arange(n), labels].mean())

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _record("cross_entropy", (logits,), out_data, bwd)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_check(
    f, params, step, max_entries_per_param=None, seed=0
):
    """Compare analytic gradients of `f` against central finite differences.

    f: callable taking `params` and returning a scalar Tensor.
    params: dict[str, Tensor] (or list of Tensors) with requires_grad set.

    For each parameter tensor the checked entries are compared in max-abs
    norm, and the parameter's error is
    max|analytic - fd| / max(max|analytic|, max|fd|, 1e-12); the return
    value is the max over parameters. Comparing per tensor rather than per
    entry keeps the measure meaningful at entries whose true gradient is
    near zero, where central differences bottom out at roundoff noise while
    any genuinely wrong gradient term still shifts the numerator to the
    tensor's gradient scale.

    When `max_entries_per_param` is given, at most that many entries of each
    parameter are checked (a seeded uniform subsample); every parameter
    tensor is always touched. Default checks every entry.
    """
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = [(t.name or f"p{i}", t) for i, t in enumerate(params)]
    if step <= 0:
        raise ContractError(f"finite_difference_check: step must be > 0, got {step}")

    for _, t in items:
        t.zero_grad()
    with Graph() as g:
        loss = f(params)
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            got = loss.data.shape if isinstance(loss, Tensor) else type(loss)
            raise ContractError(
                f"finite_difference_check: f must be scalar-valued, got {got}"
            )
        g.backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in items
    }

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for name, t in items:
            flat = t.data.reshape(-1)
            if not np.shares_memory(flat, t.data):
                raise ContractError(
                    f"parameter {name} is not contiguous; cannot perturb in place"
                )
            n = flat.shape[0]
            if max_entries_per_param is not None and n > max_entries_per_param:
                idxs = rng.choice(n, size=max_entries_per_param, replace=False)
                idxs.sort()
            else:
                idxs = range(n)
            ga = analytic[name].reshape(-1)
            max_diff = 0.0
            max_ga = 0.0
            max_fd = 0.0
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f(params).data)
                flat[i] = orig - step
                fm = float(f(params).data)
                flat[i] = orig
                fd = (fp - fm) / (2.0 * step)
                max_diff = max(max_diff, abs(ga[i] - fd))
                max_ga = max(max_ga, abs(ga[i]))
                max_fd = max(max_fd, abs(fd))
            rel = max_diff / max(max_ga, max_fd, 1e-12)
            if rel > worst:
                worst = rel
    return worst
