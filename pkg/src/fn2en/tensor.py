"""Dense NCHW tensors with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor`; when gradient recording is enabled
and at least one input requires a gradient, the output remembers its
parents and a closure mapping the upstream gradient to one gradient per
parent.  :func:`backward` walks that implicit DAG once in reverse
topological order and accumulates ``.grad`` on leaf tensors only.

Training runs in float32; pass float64 arrays to get the verification
precision used by :mod:`fn2en.gradcheck`.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}{flag})"

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def backward(self):
        return backward(self)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or np.float32))


def apply_op(data, parents, grad_fn, op):
    """Wrap ``data`` as the output of ``op``.

    ``grad_fn(g)`` must return one gradient (or ``None``) per parent.
    """
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
        out._op = op
    return out


# -- graph ------------------------------------------------------------------
@dataclass(frozen=True)
class OpRecord:
    op: str
    inputs: tuple
    output: int


@dataclass
class ComputeGraph:
    records: list
    parameters: list


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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def trace(root):
    """Op records reachable from ``root`` in topological order."""
    order = _topological(root)
    records = [
        OpRecord(n._op, tuple(id(p) for p in n._parents), id(n)) for n in order if not n.is_leaf
    ]
    params = [n for n in order if n.is_leaf and n.requires_grad]
    return ComputeGraph(records, params)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every leaf that requires a gradient.

    Returns a dict mapping each such leaf to its accumulated gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    store = {}
    if not loss.requires_grad:
        return store
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            store[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return store


# -- elementwise ------------------------------------------------------------
def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    return apply_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    return apply_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        "sub",
    )


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        scale = a.dtype.type(b)
        return apply_op(a.data * scale, (a,), lambda g: (g * scale,), "scale")
    return apply_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def relu(x):
    mask = x.data > 0
    return apply_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def abs_pow(x, p):
    """Elementwise ``|x|**p``; the derivative at ``x == 0`` is taken as 0."""
    if not p > 0:
        raise ConfigError(f"power must be positive, got {p}")
    a = np.abs(x.data)
    out = a if p == 1 else a**p

    def grad_fn(g):
        d = np.zeros_like(a)
        nz = a > 0
        d[nz] = p * a[nz] ** (p - 1) * np.sign(x.data[nz])
        return (g * d,)

    return apply_op(out.astype(x.dtype, copy=False), (x,), grad_fn, "abs_pow")


# -- reductions and reshapes ---------------------------------------------------
def sum_(x, axis=None):
    out = np.sum(x.data, axis=axis)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return apply_op(np.asarray(out, dtype=x.dtype), (x,), grad_fn, "sum")


def mean(x, axis=None):
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis), 1.0 / count)


def reshape(x, shape):
    return apply_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x):
    return reshape(x, (x.shape[0], -1))


# -- layers -----------------------------------------------------------------
def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents = parents + (bias,)

    def grad_fn(g):
        grads = (g @ weight.data, g.T @ x.data)
        if bias is not None:
            grads = grads + (g.sum(axis=0),)
        return grads

    return apply_op(out, parents, grad_fn, "linear")


def dropout(x, rate, rng=None, train=False):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an explicit RNG stream")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return apply_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def _im2col(xp, kh, kw, stride):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(dcols, padded_shape, kh, kw, stride, ho, wo):
    n, c = padded_shape[:2]
    d = dcols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros(padded_shape, dtype=dcols.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + hs : stride, j : j + ws : stride] += d[..., i, j].transpose(0, 3, 1, 2)
    return out


def _check_nchw(x, what):
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected an NCHW tensor, got shape {x.shape}")
    if 0 in x.shape:
        raise ShapeError(f"{what}: zero-extent dimension in input shape {x.shape}")


def conv_output_size(n, k, stride=1, padding=0):
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of NCHW ``x`` with an (O, I, kh, kw) kernel."""
    _check_nchw(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be OIkk, got {weight.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: bad stride={stride} / padding={padding}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {i}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wm = weight.data.reshape(o, -1)
    out = (cols @ wm.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = None
        if x.requires_grad:
            gxp = _col2im(gm @ wm, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        gw = (gm.T @ cols).reshape(weight.shape)
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return apply_op(out, parents, grad_fn, "conv2d")


def deconv2d(x, weight, bias=None, stride=1):
    """Fractionally strided convolution: the adjoint of :func:`conv2d`.

    ``weight`` has the layout of the forward convolution it transposes,
    (O, I, kh, kw), so an (N, O, H, W) input becomes
    (N, I, (H-1)*stride + kh, (W-1)*stride + kw).
    """
    _check_nchw(x, "deconv2d")
    if weight.ndim != 4:
        raise ShapeError(f"deconv2d: weight must be OIkk, got {weight.shape}")
    if stride < 1:
        raise ConfigError(f"deconv2d: stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != o:
        raise ShapeError(f"deconv2d: input has {c} channels but kernel expects {o}")
    if bias is not None and bias.shape != (i,):
        raise ShapeError(f"deconv2d: bias {bias.shape} does not match {i} output channels")
    out_shape = (n, i, (h - 1) * stride + kh, (w - 1) * stride + kw)
    wm = weight.data.reshape(o, -1)
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, o)
    out = _col2im(xm @ wm, out_shape, kh, kw, stride, h, w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        cols, _, _ = _im2col(g, kh, kw, stride)
        gx = (cols @ wm.T).reshape(n, h, w, o).transpose(0, 3, 1, 2)
        gw = (xm.T @ cols).reshape(weight.shape)
        grads = (np.ascontiguousarray(gx), gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return apply_op(out, parents, grad_fn, "deconv2d")


def pool_output_size(n, k=3, stride=2):
    """Ceil-mode pooled extent; the last window must start inside the input."""
    out = max(-(-(n - k) // stride), 0) + 1
    if (out - 1) * stride >= n:
        out -= 1
    return out


def maxpool2d(x, k=3, stride=2):
    """Ceil-mode max pooling; windows hanging off the edge are clipped."""
    _check_nchw(x, "maxpool2d")
    if k < 1 or stride < 1:
        raise ConfigError(f"maxpool2d: bad window {k} / stride {stride}")
    n, c, h, w = x.shape
    ho, wo = pool_output_size(h, k, stride), pool_output_size(w, k, stride)
    # a stride wider than the window can leave trailing rows that no window reaches
    hp, wp = max((ho - 1) * stride + k, h), max((wo - 1) * stride + k, w)
    xp = np.full((n, c, hp, wp), -np.inf, dtype=x.dtype)
    xp[:, :, :h, :w] = x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                if hit.any():
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += g * hit
        return (gxp[:, :, :h, :w],)

    return apply_op(out, (x,), grad_fn, "maxpool2d")
