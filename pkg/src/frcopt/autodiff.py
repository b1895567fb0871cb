"""Reverse-mode automatic differentiation on an explicit run tape.

Every differentiable quantity in the optimization loop (network weights,
field samples, elasticity coefficients, displacements, loss) is a `Var`
holding a float64 numpy array. Primitive operations append one record to
the active `Tape`; `Tape.backward` replays the records in reverse and
accumulates vector-Jacobian products into `Var.grad`.

All primitives also accept plain numpy inputs. When no `Var` is involved
they return a plain array, so the same formulas serve both the recorded
optimization path and untracked evaluation (oracles, field queries).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Var:
    """A tape-tracked value: float64 array plus accumulated gradient."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape: "Tape"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # operator sugar; scalars/arrays on either side are treated as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Var) else -np.asarray(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a tracked Var is not a primitive; "
                            "multiply by a reciprocal instead")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Append-only record of primitive operations, one per optimization step.

    Records are appended in evaluation order, which is a topological order
    of the computation graph by construction. `backward` walks the list
    once, in reverse, so each node is visited exactly once and gradient
    accumulation across fan-out is additive.

    Attributes
    ----------
    ops : list
        Records ``(out_var, input_vars, vjp)`` where ``vjp(g)`` returns one
        gradient array per entry of ``input_vars``.
    adjoint_solves : int
        Number of adjoint linear-system solves triggered by `backward`
        (see `frcopt.fea.diff_solve`); exactly one per forward solve.
    """

    def __init__(self):
        self.ops: list[tuple[Var, tuple[Var, ...], Callable]] = []
        self.adjoint_solves = 0

    def leaf(self, value) -> Var:
        """Wrap an array as a trainable leaf (no producing op)."""
        return Var(value, self)

    def record(self, out_value, inputs: Sequence[Var], vjp: Callable) -> Var:
        """Create a Var for `out_value` produced from `inputs` with rule `vjp`.

        This is the extension point for custom primitives (the sparse solve
        in `frcopt.fea` uses it directly).
        """
        out = Var(out_value, self)
        self.ops.append((out, tuple(inputs), vjp))
        return out

    def backward(self, loss: Var) -> None:
        """Accumulate d(loss)/d(var) into `.grad` of every upstream Var.

        `loss` must be a scalar on this tape. Non-Var inputs receive no
        gradient. Deterministic: identical tapes produce bit-identical
        gradients.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ValueError("loss is not a Var recorded on this tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        loss.grad = np.ones_like(loss.value)
        for out, inputs, vjp in reversed(self.ops):
            g = out.grad
            if g is None:
                continue
            for var, gpart in zip(inputs, vjp(g)):
                if gpart is None:
                    continue
                if var.grad is None:
                    var.grad = gpart
                else:
                    var.grad = var.grad + gpart


def value_of(x) -> np.ndarray:
    """Underlying array of a Var, or the input coerced to float64."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise primitives ---------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    inputs = [x for x in (a, b) if isinstance(x, Var)]

    def vjp(g):
        grads = []
        if isinstance(a, Var):
            grads.append(_unbroadcast(g, av.shape))
        if isinstance(b, Var):
            grads.append(_unbroadcast(g, bv.shape))
        return tuple(grads)

    return tape.record(out, inputs, vjp)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    inputs = [x for x in (a, b) if isinstance(x, Var)]

    def vjp(g):
        grads = []
        if isinstance(a, Var):
            grads.append(_unbroadcast(g * bv, av.shape))
        if isinstance(b, Var):
            grads.append(_unbroadcast(g * av, bv.shape))
        return tuple(grads)

    return tape.record(out, inputs, vjp)


def neg(a):
    av = value_of(a)
    tape = _tape_of(a)
    if tape is None:
        return -av
    return tape.record(-av, [a], lambda g: (-g,))


def power(a, exponent: float):
    """Elementwise a**exponent for a constant exponent."""
    av = value_of(a)
    out = av ** exponent
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        return (g * exponent * av ** (exponent - 1.0),)

    return tape.record(out, [a], vjp)


def sin(a):
    av = value_of(a)
    tape = _tape_of(a)
    if tape is None:
        return np.sin(av)
    return tape.record(np.sin(av), [a], lambda g: (g * np.cos(av),))


def cos(a):
    av = value_of(a)
    tape = _tape_of(a)
    if tape is None:
        return np.cos(av)
    return tape.record(np.cos(av), [a], lambda g: (-g * np.sin(av),))


def sigmoid(a):
    av = value_of(a)
    s = 1.0 / (1.0 + np.exp(-av))
    tape = _tape_of(a)
    if tape is None:
        return s
    return tape.record(s, [a], lambda g: (g * s * (1.0 - s),))


def swish(a):
    """x * sigmoid(x); derivative sigma(x) + x*sigma(x)*(1 - sigma(x))."""
    av = value_of(a)
    s = 1.0 / (1.0 + np.exp(-av))
    out = av * s
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, [a], lambda g: (g * (s + av * s * (1.0 - s)),))


def softmax(a, axis: int = -1):
    av = value_of(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    tape = _tape_of(a)
    if tape is None:
        return s

    def vjp(g):
        # full Jacobian-vector product: s * (g - sum(g*s))
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return tape.record(s, [a], vjp)


# --- shape / reduction primitives ---------------------------------------

def reshape(a, shape):
    av = value_of(a)
    tape = _tape_of(a)
    if tape is None:
        return av.reshape(shape)
    return tape.record(av.reshape(shape), [a],
                       lambda g: (g.reshape(av.shape),))


def concat(parts, axis: int = -1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]
    inputs = [p for p in parts if isinstance(p, Var)]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(pc for p, pc in zip(parts, pieces) if isinstance(p, Var))

    return tape.record(out, inputs, vjp)


def sum_(a):
    av = value_of(a)
    tape = _tape_of(a)
    if tape is None:
        return np.asarray(av.sum())
    return tape.record(np.asarray(av.sum()), [a],
                       lambda g: (np.broadcast_to(g, av.shape).copy(),))


def dot(a, b):
    """Inner product of two flat vectors (either side may be constant)."""
    av, bv = value_of(a), value_of(b)
    out = np.asarray(av @ bv)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    inputs = [x for x in (a, b) if isinstance(x, Var)]

    def vjp(g):
        grads = []
        if isinstance(a, Var):
            grads.append(g * bv)
        if isinstance(b, Var):
            grads.append(g * av)
        return tuple(grads)

    return tape.record(out, inputs, vjp)


def element(a, index: int):
    """Scalar component a[index] of a flat vector."""
    av = value_of(a)
    tape = _tape_of(a)
    if tape is None:
        return np.asarray(av[index])

    def vjp(g):
        ga = np.zeros_like(av)
        ga[index] = g
        return (ga,)

    return tape.record(np.asarray(av[index]), [a], vjp)


def take_columns(a, cols):
    """Column slice a[:, cols] of a 2-D array; cols is a slice or index list."""
    av = value_of(a)
    out = av[:, cols]
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        ga = np.zeros_like(av)
        ga[:, cols] = g
        return (ga,)

    return tape.record(out, [a], vjp)


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    inputs = [x for x in (a, b) if isinstance(x, Var)]

    def vjp(g):
        grads = []
        if isinstance(a, Var):
            grads.append(g @ bv.T)
        if isinstance(b, Var):
            grads.append(av.T @ g)
        return tuple(grads)

    return tape.record(out, inputs, vjp)


# --- small-matrix batch primitives (material model) ----------------------

def stack33(entries):
    """Assemble an (n, 3, 3) stack from nine (n,) entry vectors, row-major.

    Entries may repeat (symmetric tensors share Vars); gradient fan-out
    accumulates automatically through the per-op records.
    """
    vals = [value_of(e) for e in entries]
    n = vals[0].shape[0]
    out = np.empty((n, 3, 3))
    for k, v in enumerate(vals):
        out[:, k // 3, k % 3] = v
    tape = _tape_of(*entries)
    if tape is None:
        return out
    var_slots = [(k, e) for k, e in enumerate(entries) if isinstance(e, Var)]

    def vjp(g):
        return tuple(g[:, k // 3, k % 3] for k, _ in var_slots)

    return tape.record(out, [e for _, e in var_slots], vjp)


def bmm33(a, b):
    """Batched 3x3 product: (n,3,3) @ (n,3,3) or (n,3,3) @ (3,3) constant."""
    av, bv = value_of(a), value_of(b)
    if bv.ndim == 2:
        out = np.einsum("nij,jk->nik", av, bv)
    elif av.ndim == 2:
        out = np.einsum("ij,njk->nik", av, bv)
    else:
        out = np.einsum("nij,njk->nik", av, bv)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    inputs = [x for x in (a, b) if isinstance(x, Var)]

    def vjp(g):
        grads = []
        if isinstance(a, Var):
            if bv.ndim == 2:
                grads.append(np.einsum("nik,jk->nij", g, bv))
            else:
                grads.append(np.einsum("nik,njk->nij", g, bv))
        if isinstance(b, Var):
            if av.ndim == 2:
                grads.append(np.einsum("ij,nik->njk", av, g))
            else:
                grads.append(np.einsum("nij,nik->njk", av, g))
        return tuple(grads)

    return tape.record(out, inputs, vjp)


_VOIGT_UPPER = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


def gather_voigt(d_stack):
    """Extract the six independent entries (11, 22, 33, 12, 13, 23) of a
    symmetric (n, 3, 3) tensor stack as an (n, 6) coefficient array."""
    dv = value_of(d_stack)
    out = np.stack([dv[:, i, j] for i, j in _VOIGT_UPPER], axis=1)
    tape = _tape_of(d_stack)
    if tape is None:
        return out

    def vjp(g):
        gd = np.zeros_like(dv)
        for k, (i, j) in enumerate(_VOIGT_UPPER):
            gd[:, i, j] = g[:, k]
        return (gd,)

    return tape.record(out, [d_stack], vjp)


def scale_rows(a, s):
    """Multiply an (n, ...) stack by a per-row scalar field (n,)."""
    av, sv = value_of(a), value_of(s)
    expand = (slice(None),) + (None,) * (av.ndim - 1)
    out = av * sv[expand]
    tape = _tape_of(a, s)
    if tape is None:
        return out
    inputs = [x for x in (a, s) if isinstance(x, Var)]

    def vjp(g):
        grads = []
        if isinstance(a, Var):
            grads.append(g * sv[expand])
        if isinstance(s, Var):
            grads.append((g * av).sum(axis=tuple(range(1, av.ndim))))
        return tuple(grads)

    return tape.record(out, inputs, vjp)
