"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float32/float64 ndarray and records the operation graph
as values are computed.  Calling ``backward()`` on a scalar result fills
the ``.grad`` buffer of every tensor on the reachable graph that has
``requires_grad=True``.  Gradients accumulate across uses of a tensor and
are cleared explicitly between optimizer steps.

float64 is the default dtype and is what every gradient check runs in;
float32 is accepted for cheaper training runs.  Data buffers are treated
as immutable once an op has consumed them; only ``.grad`` is mutated.

Ops are module-level functions so call sites resolve them dynamically
(``T.gelu(x)``), which the gradient-check suite relies on for fault
injection.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, op={self._op})"

    def backward(self, grad=None):
        """Reverse accumulation from this tensor.

        Without an explicit seed gradient the tensor must be scalar-sized.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise DimensionError(
                    f"seed gradient shape {grad.shape} does not match tensor shape {self.data.shape}"
                )
        _accumulate(self, grad)
        for node in reversed(_toposort(self)):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


class Parameter:
    """A named tensor with a trainable flag.

    Names are dot-separated paths, unique within a model.  Frozen
    parameters never receive gradients and must stay bit-identical across
    optimizer steps.
    """

    def __init__(self, name, data, trainable=True, dtype=None):
        self.name = name
        self.tensor = Tensor(data, requires_grad=trainable, dtype=dtype)

    @property
    def trainable(self):
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.tensor.requires_grad = bool(flag)

    @property
    def data(self):
        return self.tensor.data

    @property
    def size(self):
        return self.tensor.data.size

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, trainable={self.trainable})"


# -- graph plumbing ---------------------------------------------------------


def _as_tensor(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(data, parents, op, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _accumulate(tensor, grad):
    # Grads are combined functionally (never +=), so sharing buffers is safe.
    if grad.dtype != tensor.data.dtype:
        grad = grad.astype(tensor.data.dtype)
    tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def _toposort(root):
    order = []
    seen = set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _unbroadcast(grad, shape):
    """Sum a gradient down to ``shape`` to undo numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# -- arithmetic ---------------------------------------------------------------


def add(a, b):
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b):
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b):
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), "mul", backward)


def div(a, b):
    _check_broadcast(a, b, "div")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), "div", backward)


def neg(a):
    def backward(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _make(-a.data, (a,), "neg", backward)


def power(a, exponent):
    exponent = float(exponent)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * exponent * np.power(a.data, exponent - 1.0))

    return _make(np.power(a.data, exponent), (a,), "power", backward)


def matmul(a, b):
    """Batched matrix product ``a[..,m,k] @ b[..,k,n]``.

    Leading (batch) extents broadcast; the inner extents must match.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul: operands must have rank >= 2, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    try:
        np.broadcast_shapes(a.data.shape[:-2], b.data.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul: batch extents of {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(np.matmul(a.data, b.data), (a, b), "matmul", backward)


# -- nonlinearities -----------------------------------------------------------

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_K = 0.044715


def gelu(a):
    """GELU in the tanh approximation; gelu(0) == 0 exactly."""
    x = a.data
    inner = _GELU_C * (x + _GELU_K * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * x**2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner
            _accumulate(a, g * local)

    return _make(out, (a,), "gelu", backward)


def sigmoid(a):
    x = a.data
    z = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * s * (1.0 - s))

    return _make(s, (a,), "sigmoid", backward)


def relu(a):
    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0))

    return _make(np.maximum(a.data, 0.0), (a,), "relu", backward)


def softplus(a):
    """log(1 + exp(x)) in the stable log-sum-exp form."""
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        if a.requires_grad:
            z = np.exp(-np.abs(a.data))
            s = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
            _accumulate(a, g * s)

    return _make(out, (a,), "softplus", backward)


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance (no affine).

    A constant vector maps to zeros: the epsilon keeps the division finite.
    """
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def backward(g):
        if a.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            _accumulate(a, (g - gm - y * gym) * inv)

    return _make(y, (a,), "layer_norm", backward)


def softmax(a, axis=-1):
    x = a.data
    _check_axis(x.ndim, axis, "softmax")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accumulate(a, y * (g - dot))

    return _make(y, (a,), "softmax", backward)


# -- reductions and shape ops -------------------------------------------------


def _check_axis(ndim, axis, op):
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if ax is None:
            continue
        if not -ndim <= ax < ndim:
            raise DimensionError(f"{op}: axis {ax} out of range for rank {ndim}")


def _spread_grad(g, in_shape, axis, keepdims):
    """Broadcast a reduced gradient back over the reduced axes."""
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(in_shape)), in_shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(in_shape) for ax in axes)
    if not keepdims:
        hold = list(g.shape)
        for ax in sorted(axes):
            hold.insert(ax, 1)
        g = g.reshape(hold)
    return np.broadcast_to(g, in_shape)


def sum_(a, axis=None, keepdims=False):
    _check_axis(a.data.ndim, axis, "sum")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _spread_grad(g, a.data.shape, axis, keepdims))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", backward)


def mean(a, axis=None, keepdims=False):
    _check_axis(a.data.ndim, axis, "mean")
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _spread_grad(g, a.data.shape, axis, keepdims) / count)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean", backward)


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(
            f"reshape: cannot view shape {a.data.shape} as {shape}"
        ) from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.data.shape))

    return _make(out, (a,), "reshape", backward)


def transpose(a, axes=None):
    if axes is not None:
        axes = tuple(axes)
        if sorted(ax % a.data.ndim for ax in axes) != list(range(a.data.ndim)):
            raise DimensionError(
                f"transpose: axes {axes} is not a permutation for rank {a.data.ndim}"
            )
        inverse = np.argsort([ax % a.data.ndim for ax in axes])
    else:
        inverse = None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.transpose(inverse) if inverse is not None else g.transpose())

    return _make(a.data.transpose(axes), (a,), "transpose", backward)


def broadcast_to(a, shape):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(
            f"broadcast_to: shape {a.data.shape} does not broadcast to {shape}"
        ) from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))

    return _make(out.copy(), (a,), "broadcast_to", backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: need at least one tensor")
    _check_axis(tensors[0].data.ndim, axis, "concat")
    base = list(tensors[0].data.shape)
    for t in tensors[1:]:
        other = list(t.data.shape)
        if len(other) != len(base):
            raise DimensionError(
                f"concat: rank mismatch {tensors[0].data.shape} vs {t.data.shape}"
            )
        ax = axis % len(base)
        if other[:ax] + other[ax + 1 :] != base[:ax] + base[ax + 1 :]:
            raise DimensionError(
                f"concat: shapes {tensors[0].data.shape} and {t.data.shape} differ off axis {axis}"
            )
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accumulate(t, piece)

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", backward
    )


def embedding_lookup(table, ids):
    """Gather rows of a [vocab, dim] table; gradients scatter-add back."""
    if table.data.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be rank 2, got {table.data.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise DimensionError(
            f"embedding_lookup: ids outside [0, {table.data.shape[0]}) "
            f"(min {ids.min()}, max {ids.max()})"
        )

    def backward(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            _accumulate(table, buf)

    return _make(table.data[ids], (table,), "embedding_lookup", backward)


def getitem(a, index):
    """Basic or advanced indexing; the backward pass scatter-adds."""
    try:
        out = a.data[index]
    except IndexError as exc:
        raise DimensionError(f"getitem: {exc}") from None

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, index, g)
            _accumulate(a, buf)

    return _make(np.array(out, copy=True), (a,), "getitem", backward)
