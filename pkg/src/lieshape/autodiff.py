"""Small reverse-mode differentiation engine over float64 numpy arrays.

A :class:`Tape` records every node in creation order. ``Tape.backward``
walks that list once in reverse, so fan-out accumulation always happens in
the same order and gradients are bit-reproducible.

Usage::

    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    y = ad.sum(ad.square(x))
    grads = tape.backward(y)      # {x.id: array([2., 4.])}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import linalg

LOG_EPS = 1e-12
SNAP_TOL = 1e-9


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite result in primitive '{op}'")
        self.op = op


class Node:
    __slots__ = ("tape", "id", "value", "grad", "op", "parents", "vjp", "requires_grad", "name")

    def __init__(self, tape, value, op, parents=(), vjp=None, requires_grad=False, name=None):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, id={self.id}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class Tape:
    """Ordered record of nodes. Single-owner; do not share across threads.

    ``frozen`` optionally supplies the values successive stop-gradient nodes
    take, so a finite-difference probe can hold them at a base point.
    """

    def __init__(self, frozen=None):
        self.nodes: list[Node] = []
        self.frozen = frozen
        self.stopped: list[np.ndarray] = []

    def leaf(self, value, name=None) -> Node:
        return Node(self, _as_tensor(value, "leaf"), "leaf", requires_grad=True, name=name)

    def constant(self, value, name=None) -> Node:
        return Node(self, _as_tensor(value, "constant"), "constant", name=name)

    def backward(self, root: Node) -> dict[int, np.ndarray]:
        """Gradients of scalar ``root`` with respect to every leaf on the tape."""
        if root.tape is not self:
            raise ValueError("root node belongs to another tape")
        if root.value.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.id + 1]):
            if node.grad is None or node.vjp is None:
                continue
            parent_grads = node.vjp(node.grad)
            for parent, g in zip(node.parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                g = _sum_to_shape(g, parent.shape)
                parent.grad = g.copy() if parent.grad is None else parent.grad + g
        out = {}
        for node in self.nodes:
            if node.op == "leaf":
                out[node.id] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return out


def _as_tensor(value, op):
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(op)
    return arr


def _lift(tape, x):
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _record(op, value, parents, vjp):
    tape = parents[0].tape
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    needs = any(p.requires_grad for p in parents)
    return Node(tape, value, op, parents, vjp if needs else None, needs)


def _sum_to_shape(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast("add", a, b)
    return _record("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast("sub", a, b)
    return _record("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast("mul", a, b)
    av, bv = a.value, b.value
    return _record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def square(x: Node) -> Node:
    xv = x.value
    return _record("square", xv * xv, (x,), lambda g: (2.0 * xv * g,))


def absolute(x: Node) -> Node:
    xv = x.value
    # np.sign(0) == 0 gives the zero subgradient at the kink
    return _record("abs", np.abs(xv), (x,), lambda g: (np.sign(xv) * g,))


def exp(x: Node) -> Node:
    y = np.exp(x.value)
    return _record("exp", y, (x,), lambda g: (g * y,))


def log(x: Node, eps: float = LOG_EPS) -> Node:
    """log(x + eps)."""
    shifted = x.value + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(shifted)
    return _record("log", y, (x,), lambda g: (g / shifted,))


def stop_gradient(x: Node) -> Node:
    """Identity forward, zero backward."""
    tape = x.tape
    value = x.value.copy()
    if tape.frozen is not None:
        value = np.array(tape.frozen[len(tape.stopped)], dtype=np.float64)
        if value.shape != x.shape:
            raise ShapeError(f"stop_gradient: frozen value {value.shape} vs operand {x.shape}")
    tape.stopped.append(value)
    return _record("stop_gradient", value, (x,), lambda g: (None,))


# -- reductions and shape ----------------------------------------------------


def sum(x: Node, axis=None) -> Node:  # noqa: A001 - mirrors numpy
    shape = x.shape
    value = x.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), shape),)

    return _record("sum", value, (x,), vjp)


def cumsum(x: Node, axis: int) -> Node:
    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _record("cumsum", np.cumsum(x.value, axis=axis), (x,), vjp)


def reshape(x: Node, shape) -> Node:
    old = x.shape
    return _record("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Node) -> Node:
    """Swap the last two axes."""
    if x.value.ndim < 2:
        raise ShapeError(f"transpose: needs at least 2-D, got {x.shape}")
    return _record("transpose", np.swapaxes(x.value, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(x: Node, index) -> Node:
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record("getitem", x.value[index], (x,), vjp)


def concat(xs, axis: int = 0) -> Node:
    tape = _tape_of(*xs)
    xs = [_lift(tape, x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    try:
        value = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    return _record("concat", value, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def softmax(x: Node, axis: int) -> Node:
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (x,), vjp)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    try:
        value = a.value @ b.value
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    av, bv = a.value, b.value

    def vjp(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _record("matmul", value, (a, b), vjp)


def matvec(m, v) -> Node:
    """(..., n, n) matrices times (..., n) vectors."""
    tape = _tape_of(m, v)
    m, v = _lift(tape, m), _lift(tape, v)
    if m.value.ndim < 2 or m.shape[-1] != v.shape[-1]:
        raise ShapeError(f"matvec: incompatible shapes {m.shape} and {v.shape}")
    mv, vv = m.value, v.value
    value = np.einsum("...ij,...j->...i", mv, vv)

    def vjp(g):
        return g[..., :, None] * vv[..., None, :], np.einsum("...ij,...i->...j", mv, g)

    return _record("matvec", value, (m, v), vjp)


def expm(x: Node) -> Node:
    """Matrix exponential of every trailing square matrix."""
    if x.value.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"expm: needs square trailing matrices, got {x.shape}")
    xv = x.value
    return _record("expm", linalg.expm(xv), (x,), lambda g: (linalg.expm_adjoint(xv, g),))


# -- resampling --------------------------------------------------------------


def to_pixel(coord, size):
    """Normalized [-1, 1] coordinate to fractional pixel index.

    Values within SNAP_TOL of an integer are snapped so identity and
    whole-pixel maps resample exactly despite round-off.
    """
    u = (coord + 1.0) * (0.5 * (size - 1))
    nearest = np.rint(u)
    return np.where(np.abs(u - nearest) < SNAP_TOL, nearest, u)


def _bilinear_parts(image, x, y):
    _, h, w = image.shape
    u = to_pixel(x, w)
    v = to_pixel(y, h)
    c0 = np.floor(u)
    r0 = np.floor(v)
    fu = u - c0
    fv = v - r0
    c0 = c0.astype(np.int64)
    r0 = r0.astype(np.int64)
    batch = np.arange(image.shape[0])[:, None]
    corners = {}
    for dr in (0, 1):
        for dc in (0, 1):
            r = r0 + dr
            c = c0 + dc
            inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
            rr = np.where(inside, r, 0)
            cc = np.where(inside, c, 0)
            vals = np.where(inside, image[batch, rr, cc], 0.0)
            corners[dr, dc] = (rr, cc, inside, vals)
    return fu, fv, corners


def bilinear_sample(image: Node, x, y) -> Node:
    """Sample ``image`` (B, H, W) at normalized points ``x``, ``y`` (B, S).

    x runs along columns, y along rows; (-1, -1) is the top-left pixel centre.
    Pixels outside the grid read as zero.
    """
    tape = _tape_of(image, x, y)
    image, x, y = _lift(tape, image), _lift(tape, x), _lift(tape, y)
    if image.value.ndim != 3 or x.shape != y.shape or x.value.ndim != 2 or x.shape[0] != image.shape[0]:
        raise ShapeError(f"bilinear_sample: image {image.shape} with points {x.shape} and {y.shape}")
    img = image.value
    _, h, w = img.shape
    fu, fv, corners = _bilinear_parts(img, x.value, y.value)
    weights = {
        (0, 0): (1 - fv) * (1 - fu),
        (0, 1): (1 - fv) * fu,
        (1, 0): fv * (1 - fu),
        (1, 1): fv * fu,
    }
    out = np.zeros_like(fu)
    for key in ((0, 0), (0, 1), (1, 0), (1, 1)):
        out = out + weights[key] * corners[key][3]

    def vjp(g):
        g_img = None
        if image.requires_grad:
            g_img = np.zeros_like(img)
            batch = np.broadcast_to(np.arange(img.shape[0])[:, None], g.shape)
            for key in ((0, 0), (0, 1), (1, 0), (1, 1)):
                rr, cc, inside, _ = corners[key]
                np.add.at(g_img, (batch[inside], rr[inside], cc[inside]), (g * weights[key])[inside])
        v00, v01, v10, v11 = (corners[k][3] for k in ((0, 0), (0, 1), (1, 0), (1, 1)))
        d_u = (1 - fv) * (v01 - v00) + fv * (v11 - v10)
        d_v = (1 - fu) * (v10 - v00) + fu * (v11 - v01)
        return g_img, g * d_u * (0.5 * (w - 1)), g * d_v * (0.5 * (h - 1))

    return _record("bilinear_sample", out, (image, x, y), vjp)


# -- finite-difference oracle ------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    errors: dict[str, np.ndarray]
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    nonfinite: list[tuple[str, tuple]] = field(default_factory=list)

    @property
    def ok(self):
        return not self.nonfinite

    def worst(self):
        name = max(self.errors, key=lambda k: self.errors[k].max(initial=0.0))
        idx = np.unravel_index(np.argmax(self.errors[name]), self.errors[name].shape)
        return name, idx


def grad_check(
    f: Callable[[Tape, dict[str, Node]], Node],
    point: dict[str, np.ndarray],
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f(tape, leaves)`` builds a scalar node from the leaves named in
    ``point``. Relative error per coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``. Stop-gradient outputs are held at
    their base-point values during the probes, matching the constant they
    represent in the backward pass.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}

    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in point.items()}
    grads = tape.backward(f(tape, leaves))
    analytic = {k: grads[node.id] for k, node in leaves.items()}
    frozen = list(tape.stopped)

    def evaluate(values):
        t = Tape(frozen=frozen)
        return float(f(t, {k: t.leaf(v, name=k) for k, v in values.items()}).value)

    numeric, errors, bad = {}, {}, []
    for name, base in point.items():
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            probes = []
            for sign in (1.0, -1.0):
                shifted = dict(point)
                arr = base.copy()
                arr[idx] += sign * h
                shifted[name] = arr
                try:
                    probes.append(evaluate(shifted))
                except (NonFiniteError, FloatingPointError):
                    probes.append(np.nan)
            if not np.all(np.isfinite(probes)):
                bad.append((name, idx))
                num[idx] = np.nan
            else:
                num[idx] = (probes[0] - probes[1]) / (2 * h)
        numeric[name] = num
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        errors[name] = np.where(np.isfinite(num), np.abs(a - num) / denom, np.inf)
    worst = max((float(e.max(initial=0.0)) for e in errors.values()), default=0.0)
    return GradCheckReport(worst, errors, analytic, numeric, bad)
