"""Reverse-mode automatic differentiation over flat parameter vectors.

A ``Tape`` records numpy-valued operation nodes as the forward pass runs
(define-by-run), so node ids are topologically ordered by construction and
the backward pass is a single reverse sweep that visits each node exactly
once. Learnable tensors live in one flat float64 vector (``FlatParams``);
``Tape.backward`` returns a gradient buffer aligned index-for-index with
that vector. Frozen parameters stay on the tape (forward values are
unchanged) but are excluded from the gradient commit.

Everything is double precision. The tape is rebuilt every iteration, which
keeps stage-dependent graphs (spiking gate present or absent, color branch
frozen or not) trivial to express.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, InputError

Array = np.ndarray

# Op names whose backward rule is hand-chosen rather than the true
# derivative. grad_check uses this to tell an expected surrogate mismatch
# from a genuine gradient bug.
SURROGATE_OPS = frozenset({"custom_grad", "fif", "fif_full"})


class FlatParams:
    """Named tensors packed into a single flat float64 vector.

    ``view(name)`` returns a reshaped view into the vector, so in-place
    optimizer updates on the vector are visible through every view.
    """

    def __init__(self) -> None:
        self.vector = np.zeros(0, dtype=np.float64)
        self._offsets: dict[str, int] = {}
        self._shapes: dict[str, tuple[int, ...]] = {}
        self._slices: dict[str, slice] = {}

    def add(self, name: str, value) -> None:
        if name in self._offsets:
            raise InputError(f"duplicate parameter name {name!r}")
        value = np.asarray(value, dtype=np.float64)
        self._offsets[name] = self.vector.size
        self._shapes[name] = value.shape
        self._slices[name] = slice(self.vector.size, self.vector.size + value.size)
        self.vector = np.concatenate([self.vector, value.ravel()])

    @property
    def size(self) -> int:
        return self.vector.size

    def names(self) -> list[str]:
        return list(self._offsets)

    def __contains__(self, name: str) -> bool:
        return name in self._offsets

    def shape(self, name: str) -> tuple[int, ...]:
        return self._shapes[name]

    def slice_of(self, name: str) -> slice:
        return self._slices[name]

    def view(self, name: str) -> Array:
        return self.vector[self.slice_of(name)].reshape(self._shapes[name])

    def set(self, name: str, value) -> None:
        self.view(name)[...] = value

    def copy(self) -> "FlatParams":
        out = FlatParams()
        out.vector = self.vector.copy()
        out._offsets = dict(self._offsets)
        out._shapes = dict(self._shapes)
        out._slices = dict(self._slices)
        return out


@dataclass
class Node:
    """One operation record: op kind, parent node ids, cached forward value."""

    op: str
    parents: tuple[int, ...]
    value: Array
    vjp: Callable[[Array], tuple] | None
    requires_grad: bool
    param_name: str | None = None


class Var:
    """Handle to a tape node, with numpy-style arithmetic."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> Array:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tape.nodes[self.idx].value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.idx].requires_grad

    def __repr__(self) -> str:
        node = self.tape.nodes[self.idx]
        return f"Var(op={node.op!r}, shape={node.value.shape})"

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        t = self.tape
        if isinstance(other, Var):
            a, b = self.value, other.value
            return t.record("add", a + b, (self, other),
                            lambda g: (_unbroadcast(g, a.shape),
                                       _unbroadcast(g, b.shape)))
        c = _as_const(other)
        sh = self.value.shape
        return t.record("add", self.value + c, (self,),
                        lambda g: (_unbroadcast(g, sh),))

    __radd__ = __add__

    def __sub__(self, other):
        t = self.tape
        if isinstance(other, Var):
            a, b = self.value, other.value
            return t.record("sub", a - b, (self, other),
                            lambda g: (_unbroadcast(g, a.shape),
                                       _unbroadcast(g, b.shape) * -1.0))
        c = _as_const(other)
        sh = self.value.shape
        return t.record("sub", self.value - c, (self,),
                        lambda g: (_unbroadcast(g, sh),))

    def __rsub__(self, other):
        c = _as_const(other)
        sh = self.value.shape
        return self.tape.record("sub", c - self.value, (self,),
                                lambda g: (-_unbroadcast(g, sh),))

    def __mul__(self, other):
        t = self.tape
        if isinstance(other, Var):
            a, b = self.value, other.value
            return t.record("mul", a * b, (self, other),
                            lambda g: (_unbroadcast(g * b, a.shape),
                                       _unbroadcast(g * a, b.shape)))
        c = _as_const(other)
        sh = self.value.shape
        return t.record("mul", self.value * c, (self,),
                        lambda g: (_unbroadcast(g * c, sh),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        t = self.tape
        if isinstance(other, Var):
            a, b = self.value, other.value
            val = a / b
            return t.record("div", val, (self, other),
                            lambda g: (_unbroadcast(g / b, a.shape),
                                       _unbroadcast(-g * val / b, b.shape)))
        c = _as_const(other)
        sh = self.value.shape
        return t.record("div", self.value / c, (self,),
                        lambda g: (_unbroadcast(g / c, sh),))

    def __rtruediv__(self, other):
        c = _as_const(other)
        a = self.value
        val = c / a
        return self.tape.record("div", val, (self,),
                                lambda g: (_unbroadcast(-g * val / a, a.shape),))

    def __neg__(self):
        sh = self.value.shape
        return self.tape.record("neg", -self.value, (self,), lambda g: (-g,))

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise InputError("only constant exponents are supported")
        a = self.value
        return self.tape.record("pow", a ** n, (self,),
                                lambda g: (g * n * a ** (n - 1),))


class Tape:
    """Define-by-run operation recorder with a single reverse sweep."""

    def __init__(self, params: FlatParams | None = None,
                 frozen: Iterable[str] = ()):
        self.nodes: list[Node] = []
        self.param_slots: dict[str, int] = {}  # parameter name -> leaf node id
        self.params = params
        self.frozen = frozenset(frozen)

    def record(self, op: str, value, parents: tuple[Var, ...],
               vjp, requires_grad: bool | None = None) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.nodes.append(Node(op, tuple(p.idx for p in parents), value,
                               vjp, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node("const", (), value, None, False))
        return Var(self, len(self.nodes) - 1)

    def param(self, name: str) -> Var:
        """Leaf for a named parameter tensor; repeated calls share the node."""
        if name in self.param_slots:
            return Var(self, self.param_slots[name])
        if self.params is None or name not in self.params:
            raise InputError(f"unknown parameter {name!r}")
        trainable = name not in self.frozen
        self.nodes.append(Node("leaf", (), self.params.view(name), None,
                               trainable, param_name=name))
        idx = len(self.nodes) - 1
        self.param_slots[name] = idx
        return Var(self, idx)

    def backward(self, loss: Var) -> Array:
        """Accumulate d(loss)/d(param) into a flat gradient buffer.

        Parameters unreachable from the loss (and frozen leaves) are left
        at zero. Deterministic: accumulation follows fixed node order.
        """
        if loss.tape is not self:
            raise ContractViolation("loss belongs to a different tape")
        if np.ndim(loss.value) != 0:
            raise ContractViolation(
                f"loss node must be scalar, got shape {loss.value.shape}")
        size = self.params.size if self.params is not None else 0
        buf = np.zeros(size, dtype=np.float64)
        grads: list[Array | None] = [None] * (loss.idx + 1)
        grads[loss.idx] = np.asarray(1.0)
        for idx in range(loss.idx, -1, -1):
            g = grads[idx]
            grads[idx] = None
            if g is None:
                continue
            node = self.nodes[idx]
            if not node.requires_grad:
                continue
            if node.vjp is None:
                if node.param_name is not None:
                    buf[self.params.slice_of(node.param_name)] += g.ravel()
                continue
            for pid, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not self.nodes[pid].requires_grad:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        return buf

    def ops(self) -> list[str]:
        """Op kinds in recording order (used by tape-inspection checks)."""
        return [n.op for n in self.nodes]


def _as_const(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ops ----------------------------------------------------

def exp(x: Var) -> Var:
    val = np.exp(x.value)
    return x.tape.record("exp", val, (x,), lambda g: (g * val,))


def log(x: Var) -> Var:
    a = x.value
    return x.tape.record("log", np.log(a), (x,), lambda g: (g / a,))


def sqrt(x: Var) -> Var:
    val = np.sqrt(x.value)
    # subgradient 0 at exactly zero (degenerate field gradients hit this)
    return x.tape.record(
        "sqrt", val, (x,),
        lambda g: (np.where(val > 0.0, g * 0.5 / np.where(val > 0, val, 1.0), 0.0),))


def absolute(x: Var) -> Var:
    a = x.value
    return x.tape.record("abs", np.abs(a), (x,), lambda g: (g * np.sign(a),))


def relu(x: Var) -> Var:
    a = x.value
    return x.tape.record("relu", np.maximum(a, 0.0), (x,),
                         lambda g: (g * (a > 0.0),))


def sigmoid(x: Var) -> Var:
    val = _sigmoid(x.value)
    return x.tape.record("sigmoid", val, (x,), lambda g: (g * val * (1.0 - val),))


def softplus(x: Var) -> Var:
    a = x.value
    return x.tape.record("softplus", _softplus(a), (x,),
                         lambda g: (g * _sigmoid(a),))


def clip(x: Var, lo: float, hi: float) -> Var:
    a = x.value
    inside = (a > lo) & (a < hi)
    return x.tape.record("clip", np.clip(a, lo, hi), (x,),
                         lambda g: (g * inside,))


def _sigmoid(a: Array) -> Array:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _softplus(a: Array) -> Array:
    return np.log1p(np.exp(-np.abs(a))) + np.maximum(a, 0.0)


# -- reductions ----------------------------------------------------------

def sum(x: Var) -> Var:  # noqa: A001 - mirrors numpy naming
    sh = x.value.shape
    return x.tape.record("sum", x.value.sum(), (x,),
                         lambda g: (np.broadcast_to(g, sh),))


def mean(x: Var) -> Var:
    sh = x.value.shape
    n = x.value.size
    return x.tape.record("mean", x.value.mean(), (x,),
                         lambda g: (np.broadcast_to(g / n, sh),))


def dot(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return a.tape.record("dot", np.dot(av.ravel(), bv.ravel()), (a, b),
                         lambda g: (g * bv, g * av))


def norm(x: Var) -> Var:
    a = x.value
    val = np.sqrt((a * a).sum())
    return x.tape.record(
        "norm", val, (x,),
        lambda g: ((g * a / val) if val > 0 else np.zeros_like(a),))


# -- linear algebra -------------------------------------------------------

def matmul(x: Var, w: Var) -> Var:
    xv, wv = x.value, w.value
    need_x, need_w = x.requires_grad, w.requires_grad
    return x.tape.record(
        "matmul", xv @ wv, (x, w),
        lambda g: (g @ wv.T if need_x else None,
                   xv.T @ g if need_w else None))


def affine(x: Var, w: Var, b: Var) -> Var:
    """Fused ``x @ w + b`` (row-broadcast bias)."""
    xv, wv = x.value, w.value
    need_x, need_w, need_b = x.requires_grad, w.requires_grad, b.requires_grad
    return x.tape.record(
        "affine", xv @ wv + b.value, (x, w, b),
        lambda g: (g @ wv.T if need_x else None,
                   xv.T @ g if need_w else None,
                   g.sum(axis=0) if need_b else None))


# -- shape ops -------------------------------------------------------------

def reshape(x: Var, shape) -> Var:
    old = x.value.shape
    return x.tape.record("reshape", x.value.reshape(shape), (x,),
                         lambda g: (g.reshape(old),))


def concat(parts: Sequence[Var]) -> Var:
    """Concatenate along the last axis."""
    widths = [p.value.shape[-1] for p in parts]
    splits = np.cumsum(widths)[:-1]
    val = np.concatenate([p.value for p in parts], axis=-1)

    def vjp(g):
        return tuple(np.split(g, splits, axis=-1))

    return parts[0].tape.record("concat", val, tuple(parts), vjp)


def slice_last(x: Var, start: int, stop: int) -> Var:
    xv = x.value

    def vjp(g):
        out = np.zeros_like(xv)
        out[..., start:stop] = g
        return (out,)

    return x.tape.record("slice", xv[..., start:stop], (x,), vjp)


def slice_rows(x: Var, start: int, stop: int) -> Var:
    xv = x.value

    def vjp(g):
        out = np.zeros_like(xv)
        out[start:stop] = g
        return (out,)

    return x.tape.record("slice", xv[start:stop], (x,), vjp)


def take(x: Var, indices: Array) -> Var:
    """Gather elements of a 1-D Var; backward scatter-adds."""
    xv = x.value
    if xv.ndim != 1:
        raise InputError("take expects a 1-D operand; reshape first")
    idx = np.asarray(indices, dtype=np.int64)
    return x.tape.record(
        "take", xv[idx], (x,),
        lambda g: (np.bincount(idx, weights=g, minlength=xv.size),))


# -- hooks -----------------------------------------------------------------

def custom_grad(x: Var, forward: Callable[[Array], Array],
                grad_fn: Callable[[Array, Array], Array]) -> Var:
    """Elementwise op whose backward multiplies by ``grad_fn(input, output)``
    instead of the true derivative of ``forward``."""
    xv = x.value
    val = np.asarray(forward(xv), dtype=np.float64)
    return x.tape.record("custom_grad", val, (x,),
                         lambda g: (g * grad_fn(xv, val),))


def stop_gradient(x: Var) -> Var:
    return x.tape.constant(x.value)


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    """Reverse-mode vs central-finite-difference comparison for one function.

    ``surrogate`` marks parameters upstream of a surrogate-gradient node
    (custom_grad / spiking gate): a mismatch there is expected behavior,
    not an autodiff failure. ``nan`` marks parameters whose finite
    difference evaluation produced a non-finite value.
    """

    indices: Array
    ad: Array
    fd: Array
    rel_err: Array
    surrogate: Array
    nan: Array
    eps: float

    @property
    def max_rel_err(self) -> float:
        """Worst relative error over clean (non-surrogate, non-NaN) sites."""
        clean = ~(self.surrogate | self.nan)
        return float(self.rel_err[clean].max()) if clean.any() else 0.0

    @property
    def surrogate_sites(self) -> Array:
        return self.indices[self.surrogate]

    @property
    def nan_sites(self) -> Array:
        return self.indices[self.nan]


def grad_check(f: Callable[[FlatParams], Var], params: FlatParams,
               eps: float = 1e-5, indices: Sequence[int] | None = None,
               ) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` must build its loss on a fresh tape each call. ``indices`` limits
    the (expensive) finite-difference probing to a parameter subset.
    """
    loss = f(params)
    tape = loss.tape
    ad_full = tape.backward(loss)
    surr_full = _surrogate_upstream_mask(tape, params)

    if indices is None:
        idx = np.arange(params.size)
    else:
        idx = np.asarray(indices, dtype=np.int64)

    fd = np.zeros(idx.size)
    nan = np.zeros(idx.size, dtype=bool)
    base = params.vector.copy()
    for k, i in enumerate(idx):
        params.vector[i] = base[i] + eps
        fp = float(f(params).value)
        params.vector[i] = base[i] - eps
        fm = float(f(params).value)
        params.vector[i] = base[i]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            nan[k] = True
            continue
        fd[k] = (fp - fm) / (2.0 * eps)
    params.vector[...] = base

    ad = ad_full[idx]
    denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-6)
    rel = np.abs(ad - fd) / denom
    rel[nan] = np.inf
    surrogate = surr_full[idx] & (rel > 1e-4)
    return GradCheckReport(indices=idx, ad=ad, fd=fd, rel_err=rel,
                           surrogate=surrogate, nan=nan, eps=eps)


def _surrogate_upstream_mask(tape: Tape, params: FlatParams) -> Array:
    """Boolean mask over the parameter vector: slots feeding surrogate ops."""
    mask = np.zeros(params.size, dtype=bool)
    seeds = [i for i, n in enumerate(tape.nodes) if n.op in SURROGATE_OPS]
    if not seeds:
        return mask
    seen = set()
    stack = list(seeds)
    while stack:
        i = stack.pop()
        if i in seen:
            continue
        seen.add(i)
        node = tape.nodes[i]
        if node.param_name is not None:
            mask[params.slice_of(node.param_name)] = True
        stack.extend(node.parents)
    return mask
