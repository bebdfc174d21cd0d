"""Tape-based reverse-mode differentiation over numpy arrays.

Every op accepts ``Var`` or plain ``ndarray`` operands.  If no operand is a
``Var`` the op simply returns an ndarray, so the same model code runs
tape-free (used for the frozen teacher and for finite differences).

    tape = Tape()
    x = tape.leaf(np.random.randn(3, 4))
    loss = sum_(mul(x, x))
    tape.backward(loss)
    x.grad  # == 2 * x.value
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T


class Var:
    __slots__ = ("value", "grad", "tape", "index", "requires_grad", "parents", "backward_fn", "kind", "name")
    __array_priority__ = 100  # make ndarray <op> Var dispatch to Var

    def __init__(self, value, tape, index, requires_grad, parents=(), backward_fn=None, kind="leaf", name=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.kind = kind
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var({self.kind}, shape={self.value.shape}, dtype={self.value.dtype})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Append-only record of differentiable ops; parents always precede children."""

    def __init__(self):
        self.nodes: list[Var] = []

    def leaf(self, value, requires_grad: bool = True, name: str | None = None) -> Var:
        value = np.asarray(value)
        v = Var(value, self, len(self.nodes), requires_grad, name=name)
        self.nodes.append(v)
        return v

    def _append(self, value, parents, backward_fn, kind) -> Var:
        needs = any(isinstance(p, Var) and p.requires_grad for p in parents)
        v = Var(value, self, len(self.nodes), needs, tuple(parents), backward_fn if needs else None, kind)
        self.nodes.append(v)
        return v

    def backward(self, loss: Var) -> None:
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ValueError("loss is not recorded on this tape")
        if loss.value.ndim != 0:
            raise ValueError(f"backward needs a rank-0 loss, got shape {loss.value.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss.index] = np.ones((), dtype=loss.value.dtype)
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None or node.backward_fn is None:
                continue
            needs = tuple(isinstance(p, Var) and p.requires_grad for p in node.parents)
            pgrads = node.backward_fn(g, needs)
            for p, pg, need in zip(node.parents, pgrads, needs):
                if not need or pg is None:
                    continue
                if grads[p.index] is None:
                    grads[p.index] = pg
                else:
                    grads[p.index] = grads[p.index] + pg
        for node in self.nodes:
            if node.requires_grad:
                g = grads[node.index]
                node.grad = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=node.value.dtype).reshape(node.value.shape)


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(inputs) -> Tape | None:
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def record(kind: str, out, inputs: Sequence, backward_fn: Callable):
    """Register ``out`` (already computed) as the result of ``kind`` applied to ``inputs``.

    ``backward_fn(g, needs)`` returns one gradient (or None) per input.
    Without any ``Var`` input, ``out`` is returned unchanged.
    """
    tape = _tape_of(inputs)
    if tape is None:
        return out
    return tape._append(out, inputs, backward_fn, kind)


def detach(x):
    return value(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    va, vb = value(a), value(b)
    if not isinstance(a, Var) and not isinstance(va, np.ndarray):
        a = va = np.asarray(va, dtype=np.asarray(vb).dtype)
    if not isinstance(b, Var) and not isinstance(vb, np.ndarray):
        b = vb = np.asarray(vb, dtype=np.asarray(va).dtype)
    return a, b, va, vb


# --- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b, va, vb = _pair(a, b)
    out = va + vb
    return record("add", out, (a, b), lambda g, n: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))


def sub(a, b):
    a, b, va, vb = _pair(a, b)
    out = va - vb
    return record("sub", out, (a, b), lambda g, n: (_unbroadcast(g, va.shape), -_unbroadcast(g, vb.shape)))


def mul(a, b):
    a, b, va, vb = _pair(a, b)
    out = va * vb

    def bw(g, n):
        return (_unbroadcast(g * vb, va.shape) if n[0] else None,
                _unbroadcast(g * va, vb.shape) if n[1] else None)
    return record("mul", out, (a, b), bw)


def div(a, b):
    a, b, va, vb = _pair(a, b)
    out = va / vb

    def bw(g, n):
        return (_unbroadcast(g / vb, va.shape) if n[0] else None,
                _unbroadcast(-g * out / vb, vb.shape) if n[1] else None)
    return record("div", out, (a, b), bw)


def neg(x):
    return record("neg", -value(x), (x,), lambda g, n: (-g,))


def scale(x, c: float):
    vx = value(x)
    c = vx.dtype.type(c)
    return record("scale", vx * c, (x,), lambda g, n: (g * c,))


def abs_(x):
    vx = value(x)
    return record("abs", np.abs(vx), (x,), lambda g, n: (g * np.sign(vx),))


def exp(x):
    out = np.exp(value(x))
    return record("exp", out, (x,), lambda g, n: (g * out,))


def log(x):
    vx = value(x)
    return record("log", np.log(vx), (x,), lambda g, n: (g / vx,))


def sqrt(x):
    out = np.sqrt(value(x))
    return record("sqrt", out, (x,), lambda g, n: (g / (2 * out),))


def relu(x):
    vx = value(x)
    mask = vx > 0
    return record("relu", np.maximum(vx, 0), (x,), lambda g, n: (g * mask,))


max0 = relu


def clamp_min(x, lo: float):
    vx = value(x)
    mask = vx > lo
    out = np.where(mask, vx, vx.dtype.type(lo))
    return record("clamp_min", out, (x,), lambda g, n: (g * mask,))


def astype(x, dtype):
    vx = value(x)
    src = vx.dtype
    return record("astype", vx.astype(dtype), (x,), lambda g, n: (g.astype(src),))


# --- reductions ------------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims: bool = False):
    vx = value(x)
    out = np.sum(vx, axis=T._axis(vx, axis) if isinstance(axis, int) else axis, keepdims=keepdims)
    return record("sum", np.asarray(out), (x,), lambda g, n: (np.array(_expand(g, vx.shape, axis, keepdims)),))


def mean(x, axis=None, keepdims: bool = False):
    vx = value(x)
    count = vx.size if axis is None else np.prod([vx.shape[a] for a in np.atleast_1d(axis)])
    out = np.mean(vx, axis=axis, keepdims=keepdims)
    inv = vx.dtype.type(1.0 / count)
    return record("mean", np.asarray(out), (x,), lambda g, n: (np.array(_expand(g, vx.shape, axis, keepdims)) * inv,))


def max_(x, axis: int = -1, keepdims: bool = False):
    vx = value(x)
    T._axis(vx, axis)
    idx = np.argmax(vx, axis=axis)
    out = np.take_along_axis(vx, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g, n):
        gx = np.zeros_like(vx)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gk, axis)
        return (gx,)
    return record("max", out, (x,), bw)


# --- shape ------------------------------------------------------------------------

def reshape(x, shape):
    vx = value(x)
    out = T.reshape(vx, shape)
    return record("reshape", out, (x,), lambda g, n: (g.reshape(vx.shape),))


def transpose(x, axes=None):
    vx = value(x)
    axes = tuple(reversed(range(vx.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(vx, axes))
    return record("transpose", out, (x,), lambda g, n: (np.ascontiguousarray(np.transpose(g, inv)),))


# --- linear algebra ----------------------------------------------------------------

def _swap(m):
    return np.swapaxes(m, -1, -2)


def matmul(a, b):
    """Matrix product; rank-3 operands are batched along the leading axis."""
    a, b, va, vb = _pair(a, b)
    if va.ndim < 2 or vb.ndim < 2 or va.shape[-1] != vb.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {va.shape} x {vb.shape}")
    if va.dtype != vb.dtype:
        raise TypeError(f"dtype mismatch: {va.dtype} vs {vb.dtype}")
    out = np.matmul(va, vb)

    def bw(g, n):
        ga = _unbroadcast(np.matmul(g, _swap(vb)), va.shape) if n[0] else None
        gb = _unbroadcast(np.matmul(_swap(va), g), vb.shape) if n[1] else None
        return ga, gb
    return record("matmul", out, (a, b), bw)


def softmax(x, axis: int = -1):
    out = T.softmax(value(x), axis=axis)

    def bw(g, n):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
    return record("softmax", out, (x,), bw)


def softmax_rows(x):
    if value(x).ndim != 2:
        raise ValueError(f"softmax_rows expects [m, n], got {value(x).shape}")
    return softmax(x, axis=1)


def log_softmax(x, axis: int = -1):
    out = T.log_softmax(value(x), axis=axis)

    def bw(g, n):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)
    return record("log_softmax", out, (x,), bw)


# --- gradient checking ------------------------------------------------------------

@dataclass
class InputCheck:
    shape: tuple
    max_rel_err: float
    checked: int


@dataclass
class GradcheckReport:
    name: str
    inputs: list[InputCheck] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.inputs), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def rows(self):
        for i, c in enumerate(self.inputs):
            yield [self.name if len(self.inputs) == 1 else f"{self.name}[{i}]",
                   "x".join(map(str, c.shape)), f"{c.max_rel_err:.3e}", str(c.max_rel_err <= self.tol).lower()]


def reports_to_csv(reports: Sequence[GradcheckReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["op_name", "shape", "max_rel_err", "pass"])
    for r in reports:
        w.writerows(r.rows())
    return buf.getvalue()


def gradcheck(f: Callable, inputs: Sequence[np.ndarray], h: float = 1e-5, tol: float = 1e-4,
              name: str = "f", max_coords: int | None = None, rng=None) -> GradcheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    The error for one coordinate is ``|a - n| / max(|a|, |n|, floor)`` with
    ``floor = 1e-6 * max(1, |f(x)|)``, which keeps round-off on vanishing
    gradients from registering as relative error.  ``max_coords`` samples a
    random subset of coordinates per input.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    tape = Tape()
    vs = [tape.leaf(x.copy()) for x in inputs]
    out = f(*vs)
    if not isinstance(out, Var) or out.value.ndim != 0:
        raise ValueError(f"{name}: gradcheck needs a scalar-valued function")
    tape.backward(out)
    f0 = float(out.value)
    floor = 1e-6 * max(1.0, abs(f0))
    rng = np.random.default_rng(0) if rng is None else rng
    report = GradcheckReport(name, tol=tol)
    for k, x in enumerate(inputs):
        analytic = vs[k].grad.ravel()
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = np.sort(rng.choice(x.size, size=max_coords, replace=False))
        worst = 0.0
        for c in coords:
            xp = x.copy().ravel()
            xm = x.copy().ravel()
            xp[c] += h
            xm[c] -= h
            args_p = [a if j != k else xp.reshape(x.shape) for j, a in enumerate(inputs)]
            args_m = [a if j != k else xm.reshape(x.shape) for j, a in enumerate(inputs)]
            num = (float(value(f(*args_p))) - float(value(f(*args_m)))) / (2 * h)
            a = float(analytic[c])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report.inputs.append(InputCheck(tuple(x.shape), worst, len(coords)))
    return report
