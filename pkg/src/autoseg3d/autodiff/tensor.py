"""Dense tensors that record a reverse-mode differentiation graph."""
import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, e.g. for inference."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled():
    return _grad_enabled


class GraphError(RuntimeError):
    pass


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype)
    if dtype is None and arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    return Tensor(arr)


class Tensor:
    """An array plus the closure that maps its gradient onto its parents."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self._backward = backward
        self.name = name

    @classmethod
    def from_op(cls, data, parents, backward):
        """Result of an operation; records the graph only when needed."""
        if _grad_enabled and any(p.requires_grad for p in parents):
            return cls(data, True, tuple(parents), backward)
        return cls(data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, retain_graph=False):
        """Propagate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            if not retain_graph:
                node._backward = None
                node.parents = ()

    # arithmetic ------------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.from_op(
            self.data + other.data, (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return Tensor.from_op(
            a * b, (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return Tensor.from_op(
            a / b, (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __pow__(self, exponent):
        a = self.data
        return Tensor.from_op(
            a ** exponent, (self,),
            lambda g: (g * exponent * a ** (exponent - 1),))

    def sum(self, axis=None, keepdims=False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.from_op(out, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def __getitem__(self, index):
        shape, dtype = self.shape, self.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor.from_op(self.data[index], (self,), backward)

    def reshape(self, *shape):
        old = self.shape
        return Tensor.from_op(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))


class Parameter(Tensor):
    """A trainable tensor with Adam moment slots and a step counter."""

    __slots__ = ("m", "v", "step", "init")

    def __init__(self, data, name, init=""):
        super().__init__(np.ascontiguousarray(data), requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0
        self.init = init

    def zero_grad(self):
        self.grad = None


def _topological_order(root):
    """Iterative DFS post-order; raises on a cycle."""
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        if state.get(key) == 1:
            raise GraphError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for parent in node.parents:
            s = state.get(id(parent))
            if s == 1:
                raise GraphError("cycle detected in computation graph")
            if s is None:
                stack.append((parent, False))
    return order
