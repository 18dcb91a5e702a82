"""Small dense-tensor engine with reverse-mode differentiation.

Tensors are float64 numpy arrays plus a backward record. Binary ops accept
either equal shapes or a scalar operand; nothing else broadcasts. The graph
is built on every forward call and released by :func:`backward`.
"""

import numpy as np

from . import kernels


class GraphError(RuntimeError):
    pass


def _shape_error(op, a, b):
    return ValueError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: scale(self, -1.0)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tsum(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, op, parents, backward):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    # only scalar broadcasting exists, so a shape mismatch means "sum to scalar"
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def _binary_shapes(op, a, b):
    if a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise _shape_error(op, a.shape, b.shape)


# --------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, "add", (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, "sub", (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, "mul", (a, b), bw)


def scale(x, c):
    """Multiply by a constant python scalar."""
    c = float(c)
    return _node(x.data * c, "scale", (x,), lambda g: _accumulate(x, g * c))


def relu(x):
    on = x.data > 0
    return _node(np.where(on, x.data, 0.0), "relu", (x,), lambda g: _accumulate(x, g * on))


def leaky_relu(x, slope=0.1):
    factor = np.where(x.data > 0, 1.0, slope)
    return _node(x.data * factor, "leaky_relu", (x,), lambda g: _accumulate(x, g * factor))


def tanh(x):
    y = np.tanh(x.data)
    return _node(y, "tanh", (x,), lambda g: _accumulate(x, g * (1.0 - y * y)))


# --------------------------------------------------------------------------
# shape and indexing


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise _shape_error("reshape", x.shape, shape)
    return _node(x.data.reshape(shape), "reshape", (x,),
                 lambda g: _accumulate(x, g.reshape(x.shape)))


def index(x, key):
    """Basic (slice) indexing; use :func:`gather` for index arrays."""
    out = x.data[key]

    def bw(g):
        full = np.zeros(x.shape)
        full[key] += g
        _accumulate(x, full)

    return _node(out, "index", (x,), bw)


def gather(x, flat_idx):
    """Pick ``x.ravel()[flat_idx]``; repeated indices accumulate in backward."""
    flat_idx = np.asarray(flat_idx, dtype=np.intp)
    out = x.data.reshape(-1)[flat_idx]

    def bw(g):
        full = np.bincount(flat_idx, weights=g.reshape(-1), minlength=x.size)
        _accumulate(x, full.reshape(x.shape))

    return _node(out, "gather", (x,), bw)


# --------------------------------------------------------------------------
# reductions and products


def tsum(x):
    return _node(np.sum(x.data), "sum", (x,), lambda g: _accumulate(x, np.full(x.shape, float(g))))


def dot(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise _shape_error("dot", a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _node(np.dot(a.data, b.data), "dot", (a, b), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, np.outer(g, b.data) if b.data.ndim == 1 else g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, "matmul", (a, b), bw)


def linear(x, weight, bias=None):
    """``weight @ x + bias`` for a single (unbatched) vector ``x``."""
    out = matmul(weight, x)
    return out if bias is None else add(out, bias)


# --------------------------------------------------------------------------
# volumetric ops, layout (C, X, Y, Z)


def upsample3d_nearest(x, factor=2):
    if x.data.ndim != 4:
        raise ValueError(f"upsample3d_nearest: expected (C, X, Y, Z), got {x.shape}")
    f = int(factor)
    out = x.data
    for axis in (1, 2, 3):
        out = np.repeat(out, f, axis=axis)
    c, nx, ny, nz = x.shape

    def bw(g):
        _accumulate(x, g.reshape(c, nx, f, ny, f, nz, f).sum(axis=(2, 4, 6)))

    return _node(out, "upsample3d", (x,), bw)


def conv3d(x, weight, bias):
    """Stride-1 zero-padded convolution (cross-correlation), odd cubic kernel."""
    if x.data.ndim != 4 or weight.data.ndim != 5:
        raise _shape_error("conv3d", x.shape, weight.shape)
    k = weight.shape[2]
    if weight.shape[1] != x.shape[0] or k % 2 == 0 or weight.shape[2:] != (k, k, k):
        raise _shape_error("conv3d", x.shape, weight.shape)
    if bias.shape != (weight.shape[0],):
        raise _shape_error("conv3d", weight.shape, bias.shape)
    out = kernels.conv3d_forward(x.data, weight.data, bias.data)

    def bw(g):
        gx, gw, gb = kernels.conv3d_backward(x.data, weight.data, np.ascontiguousarray(g))
        _accumulate(x, gx)
        _accumulate(weight, gw)
        _accumulate(bias, gb)

    return _node(out, "conv3d", (x, weight, bias), bw)


# --------------------------------------------------------------------------


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


def backward(loss):
    """Populate ``.grad`` of every differentiable tensor reachable from ``loss``.

    Raises if ``loss`` is not scalar, was already back-propagated, or if a
    leaf still holds a gradient from an earlier pass (call ``zero_grad``).
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise GraphError("backward already called on this graph; rebuild it after zero_grad")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    order = _topological(loss)
    for node in order:
        if node._backward is None and node.grad is not None:
            raise GraphError("leaf gradient not reset before backward; call zero_grad")
    loss.grad = np.ones(loss.shape)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        node._parents = ()
        node._backward = None
    loss._done = True
