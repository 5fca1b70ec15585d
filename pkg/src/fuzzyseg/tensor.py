"""Dense tensors with graph-based reverse-mode automatic differentiation.

Each :class:`Tensor` produced by an operation keeps references to its
parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` walks the graph in reverse topological order.

Only the operations needed by the segmentation network are provided:
elementwise arithmetic (with numpy broadcasting), a handful of unary
functions, reductions, 2-D convolution, 2x2 max pooling, nearest-neighbour
upsampling, channel concatenation, channel softmax and cross-entropy.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "NonFiniteError",
    "as_tensor",
    "make_op",
    "conv2d",
    "max_pool2d",
    "upsample2x",
    "concat",
    "relu",
    "softmax_channels",
    "cross_entropy",
    "CE_CLAMP",
]

CE_CLAMP = 1e-12

# per thread, so concurrent inference cannot switch recording off elsewhere
_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording the graph (current thread only)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense array with an optional gradient.

    Parameters
    ----------
    data : array_like
        Values. Floating arrays keep their dtype; anything else becomes
        float64.
    requires_grad : bool
        Whether gradients should be accumulated into :attr:`grad`.
    name : str, optional
        Label used in error messages and checkpoints.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{tag})"

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match {self.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                _check_finite(g, f"backward into {node!r}")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = _unbroadcast(pg, p.shape)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        return make_op(self.data + other.data, (self, other), lambda g: (g, g), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other, self.dtype)
        return make_op(self.data - other.data, (self, other), lambda g: (g, -g), "sub")

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return make_op(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return make_op(a / b, (self, other), lambda g: (g / b, -g * a / (b * b)), "div")

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __neg__(self):
        return make_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self.data
        p = float(exponent)
        return make_op(a**p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    # -- unary functions ----------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return make_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self.data
        return make_op(np.log(a), (self,), lambda g: (g / a,), "log")

    def sigmoid(self):
        out = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return make_op(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def relu(self):
        return relu(self)

    # -- reductions and reshapes -------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return make_op(np.asarray(out), (self,), vjp, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return make_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype if dtype is not None else None)
    return Tensor(arr)


def make_op(data, parents, vjp, op="op"):
    """Wrap ``data`` as the output of a differentiable operation.

    ``vjp`` receives the output gradient and returns one gradient (or None)
    per parent, in order. Parent gradients may be broadcast shapes; they
    are summed back to the parent's shape.
    """
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    out._op = op
    return out


def relu(x):
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def conv2d(x, weight, bias=None, padding=0):
    """Cross-correlation of an ``[N, C, H, W]`` batch with ``[F, C, k, k]`` filters.

    ``padding`` zero-pads both spatial axes; ``padding = k // 2`` keeps the
    spatial extent for odd ``k``.

    The batch is laid out channel-major on the padded grid and flattened,
    so each kernel tap is a contiguous column shift and the whole
    convolution is ``k*k`` matrix products with no im2col copy. Positions
    that wrap across rows or images only land in the cropped margin.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, weight expects {cw}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d bias must have shape ({f},), got {bias.shape}")
    k = kh
    p = int(padding)
    hp, wp = h + 2 * p, w + 2 * p
    ho, wo = hp - k + 1, wp - k + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d kernel {k}x{k} larger than padded input {h}x{w}")
    dtype = np.result_type(x.dtype, weight.dtype)

    xc = np.zeros((c, n, hp, wp), dtype=dtype)
    xc[:, :, p:p + h, p:p + w] = x.data.transpose(1, 0, 2, 3)
    xc = xc.reshape(c, n * hp * wp)
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1)).reshape(k * k, f, c)
    offsets = [i * wp + j for i in range(k) for j in range(k)]
    m = n * hp * wp - offsets[-1]

    acc = np.zeros((f, n * hp * wp), dtype=dtype)
    for t, off in enumerate(offsets):
        acc[:, :m] += taps[t] @ xc[:, off:off + m]
    out = acc.reshape(f, n, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    out = np.ascontiguousarray(out, dtype=dtype)

    def vjp(g):
        gc = np.zeros((f, n, hp, wp), dtype=dtype)
        gc[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gm = gc.reshape(f, -1)[:, :m]
        gx = gw = gb = None
        if weight.requires_grad:
            gt = np.empty((k * k, f, c), dtype=dtype)
            for t, off in enumerate(offsets):
                gt[t] = gm @ xc[:, off:off + m].T
            gw = gt.reshape(k, k, f, c).transpose(2, 3, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxc = np.zeros((c, n * hp * wp), dtype=dtype)
            for t, off in enumerate(offsets):
                gxc[:, off:off + m] += taps[t].T @ gm
            gxc = gxc.reshape(c, n, hp, wp)[:, :, p:p + h, p:p + w]
            gx = gxc.transpose(1, 0, 2, 3)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, parents, vjp, "conv2d")


def max_pool2d(x):
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2d needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_op(np.ascontiguousarray(out), (x,), vjp, "max_pool2d")


def upsample2x(x):
    """Nearest-neighbour upsampling by a factor of two on both spatial axes."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_op(out, (x,), vjp, "upsample2x")


def concat(tensors, axis=1):
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op(out, tuple(tensors), vjp, "concat")


def softmax_channels(a):
    """Per-pixel softmax over axis 1 of an ``[N, R, H, W]`` tensor."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_op(p, (a,), vjp, "softmax_channels")


def cross_entropy(p, q):
    """Mean-over-pixels cross-entropy ``-sum_r q log p``.

    ``p`` and ``q`` are ``[N, R, H, W]``; ``q`` is one-hot per pixel and is
    treated as a constant. ``p`` is clamped below at :data:`CE_CLAMP`.
    """
    if p.shape != q.shape:
        raise ValueError(f"cross_entropy shape mismatch: {p.shape} vs {q.shape}")
    qd = q.data if isinstance(q, Tensor) else np.asarray(q)
    npix = p.shape[0] * p.shape[2] * p.shape[3]
    pc = np.maximum(p.data, CE_CLAMP)
    loss = -(qd * np.log(pc)).sum() / npix
    live = p.data >= CE_CLAMP

    def vjp(g):
        return (g * np.where(live, -qd / pc, 0.0).astype(p.dtype) / npix,)

    return make_op(np.asarray(loss, dtype=p.dtype), (p,), vjp, "cross_entropy")
