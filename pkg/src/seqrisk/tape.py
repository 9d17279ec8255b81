"""Reverse-mode automatic differentiation over numpy arrays.

A small graph recorder sized for batched sequence models: values are float
arrays, each operation appends a node holding a backward closure, and
``backward`` walks the graph once to accumulate exact gradients into the
parameter leaves. Gradients accumulate additively across fan-out, so a value
used twice contributes twice, and replaying the same graph on the same inputs
is bit-identical at fixed precision.

Supported ops cover what the model needs: broadcasting add/mul, 2-D matmul,
concat/narrow, row gather for embedding lookups, sigmoid/tanh/relu/prelu,
log/softplus/clip, and sum/mean reductions. No GPU, no fusion, no
higher-order derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_DTYPE = np.dtype(np.float64)
_CHECK_FINITE = True


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(ArithmeticError):
    """A forward value came out NaN or infinite."""


def set_default_dtype(name):
    """Set the float dtype new constants/params are cast to (float32 or float64)."""
    global _DTYPE
    dt = np.dtype(name)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {name!r}; use float32 or float64")
    _DTYPE = dt


def default_dtype():
    return _DTYPE


def set_finite_checks(enabled):
    """Toggle the NaN/Inf guard on op outputs (on by default)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Node:
    """One recorded value in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(x):
    """Wrap an array as a non-differentiable leaf."""
    return Node(np.asarray(x, dtype=_DTYPE))


def param(x):
    """Wrap an array as a differentiable leaf whose gradient is wanted."""
    return Node(np.asarray(x, dtype=_DTYPE), requires_grad=True)


def _check(value, op):
    if _CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return value


def _make(value, op, parents, backward):
    _check(value, op)
    if any(p.requires_grad for p in parents):
        return Node(value, True, tuple(parents), backward)
    return Node(value)


def _acc(node, g):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        node.grad = node.grad + g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    try:
        value = a.value + b.value
    except ValueError:
        raise ShapeError(f"add: shapes {a.value.shape} and {b.value.shape}") from None

    def bw(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(g, b.value.shape))

    return _make(value, "add", (a, b), bw)


def sub(a, b):
    try:
        value = a.value - b.value
    except ValueError:
        raise ShapeError(f"sub: shapes {a.value.shape} and {b.value.shape}") from None

    def bw(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(-g, b.value.shape))

    return _make(value, "sub", (a, b), bw)


def mul(a, b):
    try:
        value = a.value * b.value
    except ValueError:
        raise ShapeError(f"mul: shapes {a.value.shape} and {b.value.shape}") from None

    def bw(g):
        _acc(a, _unbroadcast(g * b.value, a.value.shape))
        _acc(b, _unbroadcast(g * a.value, b.value.shape))

    return _make(value, "mul", (a, b), bw)


def neg(a):
    def bw(g):
        _acc(a, -g)

    return _make(-a.value, "neg", (a,), bw)


def scale(a, s):
    s = float(s)

    def bw(g):
        _acc(a, g * s)

    return _make(a.value * s, "scale", (a,), bw)


def matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: shapes {a.value.shape} and {b.value.shape}")
    value = a.value @ b.value

    def bw(g):
        _acc(a, g @ b.value.T)
        _acc(b, a.value.T @ g)

    return _make(value, "matmul", (a, b), bw)


def concat(nodes, axis=1):
    nodes = list(nodes)
    if not nodes:
        raise ShapeError("concat: no operands")
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat axis={axis}: shapes {[n.value.shape for n in nodes]}"
        ) from None
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(n, g[tuple(idx)])

    return _make(value, "concat", nodes, bw)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > a.value.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}) outside axis {axis} of {a.value.shape}"
        )
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    value = a.value[idx]

    def bw(g):
        full = np.zeros_like(a.value)
        full[idx] = g
        _acc(a, full)

    return _make(value, "narrow", (a,), bw)


def gather_rows(table, indices):
    """Pick rows of a 2-D table by integer index; duplicates accumulate in backward."""
    if table.value.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.value.shape}")
    idx = np.asarray(indices)
    value = table.value[idx]

    def bw(g):
        full = np.zeros_like(table.value)
        np.add.at(full, idx, g)
        _acc(table, full)

    return _make(value, "gather_rows", (table,), bw)


def _sigmoid_values(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    value = _sigmoid_values(np.asarray(a.value, dtype=a.value.dtype))

    def bw(g):
        _acc(a, g * value * (1.0 - value))

    return _make(value, "sigmoid", (a,), bw)


def tanh(a):
    value = np.tanh(a.value)

    def bw(g):
        _acc(a, g * (1.0 - value * value))

    return _make(value, "tanh", (a,), bw)


def relu(a):
    value = np.maximum(a.value, 0.0)

    def bw(g):
        _acc(a, g * (a.value > 0.0))

    return _make(value, "relu", (a,), bw)


def prelu(a, alpha):
    """max(0, x) + alpha * min(0, x) with scalar trainable slope alpha.

    The kink at x = 0 takes the negative-side slope alpha, a fixed choice of
    subgradient that keeps gradients deterministic.
    """
    al = float(alpha.value)
    value = np.where(a.value > 0.0, a.value, al * a.value)

    def bw(g):
        _acc(a, g * np.where(a.value > 0.0, 1.0, al))
        _acc(alpha, np.asarray(np.sum(g * np.minimum(a.value, 0.0))))

    return _make(value, "prelu", (a, alpha), bw)


def log(a):
    if np.any(a.value <= 0.0):
        raise NonFiniteError("log of non-positive value")
    value = np.log(a.value)

    def bw(g):
        _acc(a, g / a.value)

    return _make(value, "log", (a,), bw)


def softplus(a):
    value = np.logaddexp(0.0, a.value)

    def bw(g):
        _acc(a, g * _sigmoid_values(np.asarray(a.value, dtype=a.value.dtype)))

    return _make(value, "softplus", (a,), bw)


def clip(a, lo, hi):
    """Clamp values into [lo, hi]; gradient passes only where unclipped."""
    value = np.clip(a.value, lo, hi)
    inside = (a.value > lo) & (a.value < hi)

    def bw(g):
        _acc(a, g * inside)

    return _make(value, "clip", (a,), bw)


def sum_all(a):
    value = np.asarray(np.sum(a.value))

    def bw(g):
        _acc(a, np.full_like(a.value, float(g)))

    return _make(value, "sum", (a,), bw)


def mean_all(a):
    n = a.value.size
    value = np.asarray(np.sum(a.value) / n)

    def bw(g):
        _acc(a, np.full_like(a.value, float(g) / n))

    return _make(value, "mean", (a,), bw)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable differentiable leaf.

    ``loss`` must be a scalar node. Traversal is iterative, so graphs tens of
    thousands of nodes deep (long unrolled recurrences) are fine.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.value.shape}")
    if not loss.requires_grad:
        return

    topo = []
    seen = {id(loss)}
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, False))

    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


@dataclass
class GradCheckReport:
    """Per-parameter comparison of analytic gradients against central differences."""

    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def format(self):
        lines = [f"{name}: max rel err {err:.3e}" for name, err in sorted(self.per_param.items())]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"overall: {self.max_rel_error:.3e} (tol {self.tol:.1e}) {verdict}")
        return "\n".join(lines)


def grad_check(fn, arrays, h=1e-5, tol=1e-4):
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` maps a dict of named Nodes to a scalar Node and must be
    deterministic (no dropout). Relative error uses a 1e-5 floor in the
    denominator so finite-difference roundoff on near-zero derivatives does
    not register as failure.
    """
    params = {name: param(a) for name, a in arrays.items()}
    loss = fn(params)
    backward(loss)

    report = GradCheckReport(max_rel_error=0.0, tol=tol)
    for name, a in arrays.items():
        analytic = params[name].grad
        if analytic is None:
            analytic = np.zeros_like(np.asarray(a, dtype=_DTYPE))
        base = np.array(a, dtype=_DTYPE)
        worst = 0.0
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn({n: constant(arrays[n]) if n != name else constant(base) for n in arrays}).value)
            flat[i] = orig - h
            dn = float(fn({n: constant(arrays[n]) if n != name else constant(base) for n in arrays}).value)
            flat[i] = orig
            numeric = (up - dn) / (2.0 * h)
            an = float(np.asarray(analytic).reshape(-1)[i])
            rel = abs(an - numeric) / max(abs(an), abs(numeric), 1e-5)
            worst = max(worst, rel)
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
