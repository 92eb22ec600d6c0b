"""Small differentiation engine.

Two mechanisms live here:

* a reverse-mode tape over numpy arrays (``Tensor``/``Tape``/``backward``)
  used for gradients of a scalar loss with respect to model parameters;
* forward-propagated input Jacobians (``DualBatch``) for per-point networks,
  giving exact derivatives of outputs with respect to the 3 input
  coordinates of each point.

The Jacobian propagation is itself built from taped operations, so a loss
that consumes Jacobians (PDE residuals) is differentiable with respect to
the parameters without nesting reverse mode.

A ``DualBatch`` stores values and tangents in one ``(4, B, W)`` block:
slot 0 holds the values, slots 1..3 hold d(value)/dx, d/dy, d/dz. Affine
layers then act on all four slots with a single matrix product.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_ACTIVE: list["Tape"] = []


class StructuralError(ValueError):
    """Shape or width mismatch between a layer and its input."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up while differentiating."""


class Tape:
    """Ordered record of taped operations.

    Nodes are appended in execution order, which is a topological order of
    the graph; ``backward`` replays them in reverse.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


@contextmanager
def no_tape():
    """Evaluate without recording (forward-only inference)."""
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "op", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward_fn=None,
                 op: str = "leaf", name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        if parents and _ACTIVE:
            _ACTIVE[-1].record(self)

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor<{label}>{self.data.shape}"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __neg__(self):
        return neg(self)

    def __abs__(self):
        return absolute(self)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor(ad * bd, (a, b), bw, "mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def absolute(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    sign = np.sign(a.data)
    return Tensor(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


# --- reductions and structure ----------------------------------------------

def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(a.data.sum(axis=axis), (a,), bw, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


def max_pool(a: Tensor) -> Tensor:
    """Column-wise max over rows; ties go to the lowest row index."""
    idx = np.argmax(a.data, axis=0)
    cols = np.arange(a.shape[1])
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[idx, cols] = g
        return (out,)

    return Tensor(a.data[idx, cols], (a,), bw, "max_pool")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise StructuralError(f"matmul width mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = ad.reshape(-1, bd.shape[0]).T @ g.reshape(-1)
        else:
            ga = g @ bd.T
            gb = np.outer(ad, g) if ad.ndim == 1 else ad.T @ g
        return ga, gb

    return Tensor(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for a batch of row vectors."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise StructuralError(
            f"layer expects width {weight.shape[1]}, got {x.shape[-1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return Tensor(out, (x, weight), lambda g: (g @ wd, g.T @ xd), "linear")
    out += bias.data

    def bw(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return Tensor(out, (x, weight, bias), bw, "linear")


def transpose(a: Tensor) -> Tensor:
    return Tensor(a.data.T, (a,), lambda g: (g.T,), "transpose")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(np.transpose(a.data, axes), (a,),
                  lambda g: (np.transpose(g, inverse),), "permute")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice, type(None), type(Ellipsis)))
               for i in parts)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(index)

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return Tensor(a.data[index], (a,), bw, "getitem")


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), parts, bw, "concat")


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor(np.stack([p.data for p in parts], axis=axis), parts, bw, "stack")


# --- reverse pass ----------------------------------------------------------

def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor]) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each parameter.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    params = list(params)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for pos in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[pos]
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient at node #{pos} ({node.op}, {node.name})")
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for p in params:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {p.name}")
        out[p.name] = g
    return out


# --- forward Jacobians -----------------------------------------------------

class DualBatch:
    """Per-sample values together with their 3-column input Jacobians."""

    __slots__ = ("block",)

    def __init__(self, block: Tensor):
        if block.ndim != 3 or block.shape[0] != 4:
            raise StructuralError(f"dual block must be (4, B, W), got {block.shape}")
        self.block = block

    @classmethod
    def from_points(cls, points) -> "DualBatch":
        """Seed the raw input layer: Jacobian is the identity per sample."""
        pts = as_tensor(points)
        n = pts.shape[0]
        eye = np.zeros((3, n, 3), dtype=DTYPE)
        for k in range(3):
            eye[k, :, k] = 1.0
        return cls(concat([reshape(pts, (1, n, 3)), Tensor(eye)], axis=0))

    @property
    def values(self) -> Tensor:
        return self.block[0]

    @property
    def width(self) -> int:
        return self.block.shape[2]

    @property
    def batch(self) -> int:
        return self.block.shape[1]

    def input_jacobians(self) -> np.ndarray:
        """Jacobian blocks laid out as (batch, width, 3)."""
        return np.transpose(self.block.data[1:], (1, 2, 0))

    def jacobian_tensor(self) -> Tensor:
        """Taped tangent slots, shape (3, B, W): [k, b, i] = d value_i / d x_k."""
        return self.block[1:]


class Affine:
    """Per-point affine map ``h -> W h + b``."""

    def __init__(self, weight, bias=None):
        self.weight = as_tensor(weight)
        self.bias = None if bias is None else as_tensor(bias)


def dual_linear(dual: DualBatch, weight, bias=None) -> DualBatch:
    weight = as_tensor(weight)
    if weight.ndim != 2 or weight.shape[1] != dual.width:
        raise StructuralError(
            f"layer expects width {weight.shape[1] if weight.ndim == 2 else '?'}, "
            f"got {dual.width}")
    x = dual.block
    _, n, w_in = x.shape
    w_out = weight.shape[0]
    xd, wd = x.data.reshape(4 * n, w_in), weight.data
    out = (xd @ wd.T).reshape(4, n, w_out)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out[0] += bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(4 * n, w_out)
        gx = (g2 @ wd).reshape(4, n, w_in)
        gw = g2.T @ xd
        if bias is None:
            return gx, gw
        return gx, gw, g[0].sum(axis=0)

    return DualBatch(Tensor(out, parents, bw, "dual_linear"))


def dual_add_const(dual: DualBatch, value) -> DualBatch:
    """Add a point-independent term: shifts values, leaves Jacobians alone."""
    value = as_tensor(value)
    x = dual.block
    out = x.data.copy()
    out[0] += value.data
    vshape = value.shape

    def bw(g):
        return g, _unbroadcast(g[0], vshape)

    return DualBatch(Tensor(out, (x, value), bw, "dual_add_const"))


def dual_relu(dual: DualBatch) -> DualBatch:
    x = dual.block
    mask = x.data[0] > 0
    return DualBatch(Tensor(x.data * mask, (x,), lambda g: (g * mask,), "dual_relu"))


def dual_tanh(dual: DualBatch) -> DualBatch:
    x = dual.block
    t = np.tanh(x.data[0])
    dt = 1.0 - t * t
    out = x.data * dt
    out[0] = t
    tang = x.data[1:]

    def bw(g):
        gx = g * dt
        # tangents depend on the values through tanh''
        gx[0] = g[0] * dt + (g[1:] * tang).sum(axis=0) * (-2.0 * t * dt)
        return (gx,)

    return DualBatch(Tensor(out, (x,), bw, "dual_tanh"))


_ACTIVATIONS: dict[str, Callable[[DualBatch], DualBatch]] = {
    "relu": dual_relu,
    "tanh": dual_tanh,
}


def forward_with_jacobian(layer, dual: DualBatch) -> DualBatch:
    """Apply an affine layer or a named elementwise activation to a DualBatch."""
    if isinstance(layer, Affine):
        return dual_linear(dual, layer.weight, layer.bias)
    if isinstance(layer, str):
        try:
            return _ACTIVATIONS[layer](dual)
        except KeyError:
            raise StructuralError(f"unknown activation {layer!r}") from None
    raise StructuralError(f"unsupported layer {layer!r}")
