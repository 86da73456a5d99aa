"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a node carrying a global sequence
number, its input tensors and a closure that maps the output gradient to
input gradients.  ``backward`` collects the nodes reachable from a scalar
loss and replays them in decreasing sequence number, i.e. in reverse
recording order, so each node is visited exactly once and gradient
accumulation order is fixed.

Binary elementwise operations require identical shapes.  Broadcasting is
only available through the explicit :func:`broadcast` operation.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_sequence = itertools.count()
_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def default_dtype():
    return getattr(_local, "dtype", np.float64)


@contextmanager
def precision(dtype):
    """Build tensors in ``dtype`` for the enclosed block.

    Only meant for forward-only reference evaluations in ``np.longdouble``
    (finite-difference oracles); training always runs in float64.
    """
    previous = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


@contextmanager
def no_grad():
    """Disable recording for the enclosed block (evaluation passes)."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Partial:
    """Gradient contribution to a sub-region of an input."""

    __slots__ = ("index", "value", "unique")

    def __init__(self, index, value, unique=True):
        self.index = index
        self.value = value
        self.unique = unique


class Node:
    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.seq = next(_sequence)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    def __radd__(self, other):
        return shift(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        if self.ndim != 2:
            raise DimensionError(f".T is defined for 2-d tensors, got shape {self.shape}")
        return transpose(self, (1, 0))

    def sum(self, axis=None, keepdims=False):
        return sum_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_axis(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``; record a node when needed.

    ``backward_fn(g)`` must return one entry per input: an array shaped like
    the input, a :class:`Partial`, or ``None`` for no contribution.
    """
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


# ---------------------------------------------------------------------------
# Graph and backward
# ---------------------------------------------------------------------------


class Graph:
    """Recorded operations reachable from ``output``, in recording order."""

    def __init__(self, output: Tensor):
        self.output = output
        seen = set()
        tensors = []
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            tensors.append(t)
            stack.extend(p for p in t.node.inputs if p.requires_grad)
        tensors.sort(key=lambda t: t.node.seq)
        self.tensors = tensors

    @property
    def ops(self) -> list:
        """(op name, input ids, output id) tuples in recording order."""
        return [(t.node.op, tuple(id(p) for p in t.node.inputs), id(t)) for t in self.tensors]

    def backward(self, seed: np.ndarray | None = None, visit: Callable | None = None) -> None:
        out = self.output
        grads = {id(out): np.ones_like(out.data) if seed is None else np.asarray(seed, dtype=np.float64)}
        owned = set()
        leaves = {}

        def accumulate(t: Tensor, g) -> None:
            key = id(t)
            if t.node is None:
                leaves.setdefault(key, t)
            if isinstance(g, Partial):
                buf = grads.get(key)
                if buf is None:
                    buf = np.zeros_like(t.data)
                    grads[key] = buf
                    owned.add(key)
                elif key not in owned:
                    buf = buf.copy()
                    grads[key] = buf
                    owned.add(key)
                if g.unique:
                    buf[g.index] += g.value
                else:
                    np.add.at(buf, g.index, g.value)
                return
            if g.shape != t.shape:
                raise DimensionError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
            buf = grads.get(key)
            if buf is None:
                grads[key] = g
            elif key in owned:
                buf += g
            else:
                grads[key] = buf + g
                owned.add(key)

        for t in reversed(self.tensors):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if visit is not None:
                visit(t)
            contributions = t.node.backward_fn(g)
            for parent, contrib in zip(t.node.inputs, contributions):
                if contrib is not None and parent.requires_grad:
                    accumulate(parent, contrib)

        if out.node is None and out.requires_grad:
            leaves.setdefault(id(out), out)
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                leaf.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Graph(loss).backward(np.ones_like(loss.data))


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient path back to ``x``."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _same_shape(op, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (use broadcast())")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return make_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_op("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors as a single recorded op."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("add_n needs at least one tensor")
    for t in tensors[1:]:
        _same_shape("add_n", tensors[0], t)
    data = tensors[0].data.copy()
    for t in tensors[1:]:
        data += t.data
    return make_op("add_n", data, tensors, lambda g: (g,) * len(tensors))


def neg(x: Tensor) -> Tensor:
    return make_op("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    return make_op("scale", x.data * c, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return make_op("shift", x.data + c, (x,), lambda g: (g,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_op("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_op("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_op("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_op("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_op("log", np.log(xd), (x,), lambda g: (g / xd,))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` must either carry the same
    leading axes or be a plain matrix shared across the batch.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def grad(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_op("matmul", ad @ bd, (a, b), grad)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` over the last axis of ``x``; ``w`` is out x in."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weights {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match weights {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out += b.data
    inputs = (x, w) if b is None else (x, w, b)

    def grad(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_op("linear", out, inputs, grad)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", y, (x,), grad)


# ---------------------------------------------------------------------------
# Shape manipulation and reductions
# ---------------------------------------------------------------------------


def sum_axis(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op("sum", np.asarray(out), (x,), grad)


def mean_axis(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_axis(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size or any(s <= 0 for s in shape):
        raise DimensionError(f"cannot reshape {x.shape} into {shape}")
    old = x.shape
    return make_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def broadcast(x: Tensor, shape) -> Tensor:
    """Explicit numpy-rule broadcast of ``x`` to ``shape``."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None
    src = x.shape
    lead = len(shape) - len(src)

    def grad(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return make_op("broadcast", out.copy(), (x,), grad)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: shapes {ref.shape} and {t.shape} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_op("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, grad)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("stack needs at least one tensor")
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def grad(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return make_op("stack", out, tensors, grad)


def _check_basic_index(shape, index) -> tuple:
    if not isinstance(index, tuple):
        index = (index,)
    dims = iter(enumerate(shape))
    for item in index:
        if item is Ellipsis:
            # only bounds-check the leading explicit items
            break
        if isinstance(item, (int, np.integer)):
            i, n = next(dims, (None, None))
            if n is None or not -n <= item < n:
                raise IndexError(f"index {item} out of bounds for axis {i} with size {n}")
        elif isinstance(item, slice):
            i, n = next(dims, (None, None))
            if n is None:
                raise IndexError(f"too many indices for shape {shape}")
        else:
            raise IndexError(f"unsupported index {item!r}; use take() for integer arrays")
    return index


def getitem(x: Tensor, index) -> Tensor:
    """Basic (int/slice/Ellipsis) indexing."""
    index = _check_basic_index(x.shape, index)
    out = x.data[index]
    return make_op("slice", np.array(out, copy=True), (x,), lambda g: (Partial(index, g),))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise IndexError(f"slice [{start}:{stop}] out of bounds for axis {axis} with size {n}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return getitem(x, tuple(index))


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along ``axis`` by integer index array."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    n = x.shape[ax]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take: indices out of bounds for axis {axis} with size {n}")
    unique = len(np.unique(idx)) == idx.size
    index = (slice(None),) * ax + (idx,)
    out = x.data[index]
    return make_op("take", out, (x,), lambda g: (Partial(index, g, unique),))


def pick(x: Tensor, labels) -> Tensor:
    """``x[..., labels]`` elementwise: one entry per row of the last axis."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != x.shape[:-1]:
        raise DimensionError(f"pick: labels shape {labels.shape} vs rows {x.shape[:-1]}")
    n = x.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise IndexError(f"pick: label out of range for {n} classes")
    index = tuple(np.indices(labels.shape)) + (labels,)
    return make_op("pick", x.data[index], (x,), lambda g: (Partial(index, g),))


def parameters_size(params: Iterable[Tensor]) -> int:
    return int(sum(p.data.size for p in params))
