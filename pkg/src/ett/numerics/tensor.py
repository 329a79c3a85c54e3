"""Dense float64 tensors with a small reverse-mode autodiff engine.

Every differentiable primitive is a :class:`Function` subclass with a
``forward`` on raw numpy arrays and a ``backward`` that maps the output
gradient to one gradient per input.  Graphs are recorded only while grad
mode is on and at least one input requires a gradient.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
from scipy import special

DEFAULT_DTYPE = np.float64
LN_EPS = 1e-5

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


def get_default_dtype():
    return getattr(_state, "dtype", DEFAULT_DTYPE)


@contextlib.contextmanager
def default_dtype(dtype):
    """Dtype for tensors built inside the block (float32 only for speed runs)."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _check_finite(arr, where):
    # the sum is finite whenever every element is (barring overflow near 1e308)
    if not np.isfinite(np.sum(arr)) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name", "__weakref__")

    # numpy defers binary ops with ndarray on the left to us
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.array(data, dtype=dtype or get_default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._ctx = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor upstream."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            # intermediate tensors keep their gradient too
            node.grad = g
            fn, parents = node._ctx
            in_grads = fn.backward(g)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for parent, pg in zip(parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype)
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"{type(fn).__name__}.backward returned shape {pg.shape}, "
                        f"expected {parent.shape}"
                    )
                _check_finite(pg, f"{type(fn).__name__}.backward")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators -----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return Neg()(self)

    def __pow__(self, exponent):
        return Pow(exponent)(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return GetItem(index)(self)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _topo_order(root):
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
        if node._ctx is not None:
            for parent in node._ctx[1]:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """One differentiable primitive.  Subclasses fill ``forward``/``backward``.

    ``self.needs`` flags which inputs require a gradient; ``backward`` may
    return ``None`` for the others.
    """

    needs = ()

    def __call__(self, *inputs):
        tensors = tuple(as_tensor(x) for x in inputs)
        out = self.forward(*(t.data for t in tensors))
        _check_finite(out, type(self).__name__)
        result = Tensor.__new__(Tensor)
        result.data = out
        result.grad = None
        result.name = None
        result._ctx = None
        result.requires_grad = False
        if is_grad_enabled() and any(t.requires_grad for t in tensors):
            result.requires_grad = True
            result._ctx = (self, tensors)
            self.needs = tuple(t.requires_grad for t in tensors)
        return result

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise --------------------------------------------------------
class Add(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, grad):
        sa, sb = self.shapes
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Sub(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, grad):
        sa, sb = self.shapes
        return _unbroadcast(grad, sa), _unbroadcast(-grad, sb)


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (_unbroadcast(grad * self.b, self.a.shape),
                _unbroadcast(grad * self.a, self.b.shape))


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return -grad


class Pow(Function):
    def __init__(self, exponent):
        self.exponent = float(exponent)

    def forward(self, a):
        self.a = a
        return a ** self.exponent

    def backward(self, grad):
        return grad * self.exponent * self.a ** (self.exponent - 1.0)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return grad * self.out


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return grad / self.a


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return grad / (2.0 * self.out)


class GELU(Function):
    """Exact erf-based GELU."""

    def forward(self, a):
        self.a = a
        self.cdf = 0.5 * (1.0 + special.erf(a / np.sqrt(2.0)))
        return a * self.cdf

    def backward(self, grad):
        pdf = np.exp(-0.5 * self.a * self.a) / np.sqrt(2.0 * np.pi)
        return grad * (self.cdf + self.a * pdf)


# -- linear algebra / reductions ----------------------------------------
class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul needs operands with at least 2 dims")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        if b.ndim == 2 and a.ndim > 2:
            # one large GEMM instead of a stack of small ones
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + b.shape[-1:])
        return np.matmul(a, b)

    def backward(self, grad):
        need_a, need_b = self.needs or (True, True)
        a, b = self.a, self.b
        ga = gb = None
        if b.ndim == 2 and a.ndim > 2:
            g2 = grad.reshape(-1, grad.shape[-1])
            if need_a:
                ga = (g2 @ b.T).reshape(a.shape)
            if need_b:
                gb = a.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if need_a:
            ga = _unbroadcast(np.matmul(grad, np.swapaxes(b, -1, -2)), a.shape)
        if need_b:
            gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), grad), b.shape)
        return ga, gb


class Sum(Function):
    def __init__(self, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        self.shape = a.shape
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return np.broadcast_to(grad, self.shape).copy()


class BroadcastTo(Function):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        self.in_shape = a.shape
        return np.broadcast_to(a, self.shape).copy()

    def backward(self, grad):
        return _unbroadcast(grad, self.in_shape)


class Reshape(Function):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        self.in_shape = a.shape
        return a.reshape(self.shape)

    def backward(self, grad):
        return grad.reshape(self.in_shape)


class Transpose(Function):
    def __init__(self, axes=None):
        self.axes = None if axes is None else tuple(axes)

    def forward(self, a):
        if self.axes is None:
            self.axes = tuple(range(a.ndim))[::-1]
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return np.transpose(grad, np.argsort(self.axes))


class GetItem(Function):
    def __init__(self, index):
        self.index = index

    def forward(self, a):
        self.shape = a.shape
        return np.array(a[self.index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        idx = self.index if isinstance(self.index, tuple) else (self.index,)
        if all(isinstance(i, (slice, int, type(Ellipsis))) for i in idx):
            out[self.index] = grad  # basic indexing never repeats an element
        else:
            np.add.at(out, self.index, grad)
        return out


class Concat(Function):
    def __init__(self, axis=0):
        self.axis = axis

    def forward(self, *arrays):
        self.sizes = [a.shape[self.axis] for a in arrays]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


# -- normalisation ------------------------------------------------------
class Softmax(Function):
    def __init__(self, axis=-1):
        self.axis = axis

    def forward(self, a):
        z = a - a.max(axis=self.axis, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=self.axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return s * (grad - (grad * s).sum(axis=self.axis, keepdims=True))


class LogSoftmax(Function):
    def __init__(self, axis=-1):
        self.axis = axis

    def forward(self, a):
        z = a - a.max(axis=self.axis, keepdims=True)
        self.out = z - np.log(np.exp(z).sum(axis=self.axis, keepdims=True))
        return self.out

    def backward(self, grad):
        soft = np.exp(self.out)
        return grad - soft * grad.sum(axis=self.axis, keepdims=True)


class LayerNorm(Function):
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""

    def __init__(self, eps=LN_EPS):
        self.eps = eps

    def forward(self, x, gain, bias):
        if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
            raise ValueError("layer_norm gain/bias must match the last axis")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + self.eps)
        self.xhat = xc * self.rstd
        self.gain = gain
        self.shape = x.shape
        return self.xhat * gain + bias

    def backward(self, grad):
        lead = tuple(range(grad.ndim - 1))
        needs = self.needs or (True, True, True)
        g_gain = (grad * self.xhat).sum(axis=lead) if needs[1] else None
        g_bias = grad.sum(axis=lead) if needs[2] else None
        if not needs[0]:
            return None, g_gain, g_bias
        gx_hat = grad * self.gain
        gx = self.rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - self.xhat * (gx_hat * self.xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias


# -- functional wrappers ------------------------------------------------
def add(a, b):
    return Add()(a, b)


def sub(a, b):
    return Sub()(a, b)


def mul(a, b):
    return Mul()(a, b)


def div(a, b):
    return Div()(a, b)


def exp(x):
    return Exp()(x)


def log(x):
    return Log()(x)


def sqrt(x):
    return Sqrt()(x)


def gelu(x):
    return GELU()(x)


def matmul(a, b):
    return MatMul()(a, b)


def tsum(x, axis=None, keepdims=False):
    return Sum(axis, keepdims)(x)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) / float(n)


def reshape(x, shape):
    return Reshape(shape)(x)


def transpose(x, axes=None):
    return Transpose(axes)(x)


def broadcast_to(x, shape):
    return BroadcastTo(shape)(x)


def concat(tensors, axis=0):
    return Concat(axis)(*tensors)


def softmax(x, axis=-1):
    return Softmax(axis)(x)


def log_softmax(x, axis=-1):
    return LogSoftmax(axis)(x)


def layer_norm(x, gain, bias, eps=LN_EPS):
    return LayerNorm(eps)(x, gain, bias)


def l2_normalize(x, axis=-1):
    """Scale vectors along ``axis`` to unit norm; zero vectors are an error."""
    x = as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=axis))
    if np.any(norms == 0.0):
        raise ValueError("cannot normalise a zero-norm vector")
    return x / sqrt(tsum(x * x, axis=axis, keepdims=True))


def cosine_similarity(a, b):
    """Cosine similarity of two d-vectors, as a scalar tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("cosine_similarity expects two vectors of equal length")
    return tsum(l2_normalize(a) * l2_normalize(b))


def cosine_matrix(x, y):
    """Pairwise cosine similarities between rows of ``x`` (n×d) and ``y`` (m×d)."""
    return matmul(l2_normalize(x), transpose(l2_normalize(y)))
