"""Minimal reverse-mode automatic differentiation over float64 ndarrays.

A Tensor wraps an array plus the closure that maps its output gradient to
parent gradients. Ops record onto the implicit graph only when some input
requires gradients, so constant subexpressions stay out of the tape.
``backward()`` runs one reverse sweep from a scalar and then marks the
interior of the graph consumed; a second sweep through any of those nodes is
rejected rather than silently double-counting.

Only what the model needs is implemented: broadcasting elementwise
arithmetic, batched matmul, reductions, shape ops, a handful of pointwise
nonlinearities, softmax, layer normalization, and the straight-through
threshold whose backward is the identity.
"""

import numpy as np

from .errors import GraphConsumedError


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "_consumed")

    # make ndarray <op> Tensor defer to the reflected Tensor ops instead of
    # broadcasting the Tensor as an object scalar
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self):
        """A view of the value that blocks gradient flow."""
        return Tensor(self.data)

    def backward(self):
        """Reverse sweep from a scalar; consumes the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        if self._consumed:
            raise GraphConsumedError("graph already consumed by a backward pass")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.backward_fn is None:
                continue
            if node._consumed:
                raise GraphConsumedError(
                    "graph already consumed by a backward pass"
                )
            node._consumed = True
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if not parent.requires_grad or g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data
        if not (self.requires_grad or other.requires_grad):
            return Tensor(out_data)
        sa, sb = self.data.shape, other.data.shape
        return Tensor(
            out_data,
            requires_grad=True,
            parents=(self, other),
            backward_fn=lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    __radd__ = __add__

    def __neg__(self):
        if not self.requires_grad:
            return Tensor(-self.data)
        return Tensor(
            -self.data,
            requires_grad=True,
            parents=(self,),
            backward_fn=lambda g: (-g,),
        )

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out_data = self.data * other.data
        if not (self.requires_grad or other.requires_grad):
            return Tensor(out_data)
        a, b = self, other
        return Tensor(
            out_data,
            requires_grad=True,
            parents=(a, b),
            backward_fn=lambda g: (
                _unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_data = self.data / other.data
        if not (self.requires_grad or other.requires_grad):
            return Tensor(out_data)
        a, b = self, other
        return Tensor(
            out_data,
            requires_grad=True,
            parents=(a, b),
            backward_fn=lambda g: (
                _unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
            ),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data**exponent
        if not self.requires_grad:
            return Tensor(out_data)
        a = self
        return Tensor(
            out_data,
            requires_grad=True,
            parents=(a,),
            backward_fn=lambda g: (g * exponent * a.data ** (exponent - 1),),
        )

    # -- pointwise nonlinearities ----------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        if not self.requires_grad:
            return Tensor(out_data)
        return Tensor(
            out_data,
            requires_grad=True,
            parents=(self,),
            backward_fn=lambda g: (g * out_data,),
        )

    def log(self):
        if not self.requires_grad:
            return Tensor(np.log(self.data))
        a = self
        return Tensor(
            np.log(self.data),
            requires_grad=True,
            parents=(a,),
            backward_fn=lambda g: (g / a.data,),
        )

    def log1p(self):
        if not self.requires_grad:
            return Tensor(np.log1p(self.data))
        a = self
        return Tensor(
            np.log1p(self.data),
            requires_grad=True,
            parents=(a,),
            backward_fn=lambda g: (g / (1.0 + a.data),),
        )

    def sqrt(self):
        out_data = np.sqrt(self.data)
        if not self.requires_grad:
            return Tensor(out_data)
        return Tensor(
            out_data,
            requires_grad=True,
            parents=(self,),
            backward_fn=lambda g: (g * 0.5 / out_data,),
        )

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))
        if not self.requires_grad:
            return Tensor(out_data)
        return Tensor(
            out_data,
            requires_grad=True,
            parents=(self,),
            backward_fn=lambda g: (g * out_data * (1.0 - out_data),),
        )

    def relu(self):
        out_data = np.maximum(self.data, 0.0)
        if not self.requires_grad:
            return Tensor(out_data)
        a = self
        return Tensor(
            out_data,
            requires_grad=True,
            parents=(a,),
            backward_fn=lambda g: (g * (a.data > 0.0),),
        )

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        if not self.requires_grad:
            return Tensor(out_data)
        a = self

        def bw(g):
            if axis is None:
                return (np.broadcast_to(g, a.data.shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.data.shape).copy(),)

        return Tensor(out_data, requires_grad=True, parents=(a,), backward_fn=bw)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.data.shape[i] for i in axis]))
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        out_data = self.data.reshape(shape)
        if not self.requires_grad:
            return Tensor(out_data)
        a = self
        return Tensor(
            out_data,
            requires_grad=True,
            parents=(a,),
            backward_fn=lambda g: (g.reshape(a.data.shape),),
        )

    def swapaxes(self, ax1, ax2):
        out_data = self.data.swapaxes(ax1, ax2)
        if not self.requires_grad:
            return Tensor(out_data)
        return Tensor(
            out_data,
            requires_grad=True,
            parents=(self,),
            backward_fn=lambda g: (g.swapaxes(ax1, ax2),),
        )

    def __getitem__(self, key):
        out_data = self.data[key]
        if not self.requires_grad:
            return Tensor(out_data)
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            full[key] = g
            return (full,)

        return Tensor(out_data, requires_grad=True, parents=(a,), backward_fn=bw)

    # -- linear algebra ----------------------------------------------------

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")
        out_data = self.data @ other.data
        if not (self.requires_grad or other.requires_grad):
            return Tensor(out_data)
        a, b = self, other
        return Tensor(
            out_data,
            requires_grad=True,
            parents=(a, b),
            backward_fn=lambda g: (
                _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape),
                _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape),
            ),
        )

    def softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)
        if not self.requires_grad:
            return Tensor(out_data)

        def bw(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            return ((g - dot) * out_data,)

        return Tensor(out_data, requires_grad=True, parents=(self,), backward_fn=bw)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=0):
    """Concatenate along an axis; backward slices the gradient back apart."""
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    if not any(t.requires_grad for t in tensors):
        return Tensor(out_data)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(
        out_data, requires_grad=True, parents=tuple(tensors), backward_fn=bw
    )


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply a learned affine map."""
    x = as_tensor(x)
    gain = as_tensor(gain)
    bias = as_tensor(bias)
    n = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = gain.data * xhat + bias.data
    if not (x.requires_grad or gain.requires_grad or bias.requires_grad):
        return Tensor(out_data)

    def bw(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes) if gain.requires_grad else None
        dbias = g.sum(axis=reduce_axes) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gain.data
            # closed-form layer-norm backward over the last axis
            dx = (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            ) * inv_std
        return (dx, dgain, dbias)

    return Tensor(
        out_data, requires_grad=True, parents=(x, gain, bias), backward_fn=bw
    )


def straight_through(x, threshold=0.5):
    """Binarize at the threshold; ties go to 1. Backward passes gradients
    through unchanged, so composed with a sigmoid the gradient is the
    sigmoid's derivative."""
    x = as_tensor(x)
    out_data = (x.data >= threshold).astype(np.float64)
    if not x.requires_grad:
        return Tensor(out_data)
    return Tensor(
        out_data,
        requires_grad=True,
        parents=(x,),
        backward_fn=lambda g: (g,),
    )
