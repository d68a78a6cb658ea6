"""A small dense tensor with reverse-mode differentiation.

Only the primitives the segmentor and the losses need are provided. Every
value is a float64 numpy array; image and feature tensors use NCHW layout.

Binary elementwise ops require identical shapes, with one exception: a
per-channel tensor of shape ``(N, C, 1, 1)`` is broadcast over the spatial
dims of an ``(N, C, H, W)`` partner. Anything else raises ``ShapeError``.

A graph can be differentiated once. Calling ``backward`` a second time on
the same graph, or on a graph whose leaves still hold gradients from an
earlier pass, raises ``RuntimeError``; clear leaf gradients with
``zero_grad`` between optimisation steps.
"""

from __future__ import annotations

import contextlib
from numbers import Real

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "zero_grad",
    "conv2d",
    "relu",
    "add",
    "sub",
    "mul",
    "div",
    "channel_mean",
    "channel_std",
    "expand_channels",
    "softmax",
    "log",
    "clip_min",
    "tsum",
    "tmean",
    "reshape",
    "upsample_nearest",
    "catalog",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them for differentiation."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    # ---- basic accessors -------------------------------------------------
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
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # ---- operators -------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Real):
            return _affine_scalar(self, 1.0, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Real):
            return _affine_scalar(self, 1.0, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, Real):
            return _affine_scalar(self, -1.0, float(other))
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, Real):
            return _affine_scalar(self, float(other), 0.0)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Real):
            return _affine_scalar(self, 1.0 / float(other), 0.0)
        return div(self, other)

    def __rtruediv__(self, other):
        if isinstance(other, Real):
            return _scalar_over(float(other), self)
        return div(other, self)

    def __neg__(self):
        return _affine_scalar(self, -1.0, 0.0)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    # ---- differentiation -------------------------------------------------
    def backward(self):
        """Populate ``.grad`` on every leaf ancestor that requires it."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if self._consumed:
            raise RuntimeError("graph already differentiated; build a new graph")

        order = _topological_order(self)
        for node in order:
            if node.is_leaf and node.grad is not None:
                raise RuntimeError(
                    f"leaf {node.name or node.shape} still holds a gradient; call zero_grad first"
                )

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        for node in order:
            if not node.is_leaf:
                node._consumed = True
                node._parents = ()
                node._backward = _consumed_backward


def _consumed_backward(g):
    raise RuntimeError("graph already differentiated; build a new graph")


def zero_grad(params):
    for p in params:
        p.grad = None


def _topological_order(root):
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
        if node._consumed:
            raise RuntimeError("graph already differentiated; build a new graph")
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---- elementwise ---------------------------------------------------------

def _is_channel_vector(small, big):
    return (
        len(small) == 4
        and len(big) == 4
        and small[2:] == (1, 1)
        and small[:2] == big[:2]
        and big[2:] != (1, 1)
    )


def _binary_shapes(a, b, opname):
    """Return 'same', 'b_channel' or 'a_channel'; raise on anything else."""
    if a.shape == b.shape:
        return "same"
    if _is_channel_vector(b.shape, a.shape):
        return "b_channel"
    if _is_channel_vector(a.shape, b.shape):
        return "a_channel"
    raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=(2, 3), keepdims=True)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _reduce_to(ga, ad.shape), _reduce_to(-ga * out, bd.shape)

    return _result(out, (a, b), backward)


def _affine_scalar(x, scale, shift):
    def backward(g):
        return (g * scale,)

    return _result(x.data * scale + shift, (x,), backward)


def _scalar_over(s, x):
    out = s / x.data

    def backward(g):
        return (-g * out / x.data,)

    return _result(out, (x,), backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), backward)


def log(x):
    xd = x.data

    def backward(g):
        return (g / xd,)

    return _result(np.log(xd), (x,), backward)


def clip_min(x, lo):
    """max(x, lo) elementwise; zero gradient where clipped."""
    keep = x.data > lo

    def backward(g):
        return (g * keep,)

    return _result(np.where(keep, x.data, lo), (x,), backward)


# ---- reductions ----------------------------------------------------------

def tsum(x):
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.array(x.data.sum()), (x,), backward)


def tmean(x):
    shape, n = x.shape, x.size

    def backward(g):
        return (np.full(shape, float(g) / n),)

    return _result(np.array(x.data.mean()), (x,), backward)


def _check_nchw(x, opname):
    if x.ndim != 4:
        raise ShapeError(f"{opname}: expected NCHW tensor, got shape {x.shape}")
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError(f"{opname}: empty spatial extent in shape {x.shape}")


def channel_mean(x):
    """Per-sample, per-channel spatial mean, shape ``(N, C, 1, 1)``."""
    _check_nchw(x, "channel_mean")
    shape = x.shape
    hw = shape[2] * shape[3]

    def backward(g):
        return (np.broadcast_to(g / hw, shape).copy(),)

    return _result(x.data.mean(axis=(2, 3), keepdims=True), (x,), backward)


def channel_std(x, eps=1e-30):
    """Per-channel spatial standard deviation ``sqrt(var + eps)`` (population variance)."""
    _check_nchw(x, "channel_std")
    hw = x.shape[2] * x.shape[3]
    centered = x.data - x.data.mean(axis=(2, 3), keepdims=True)
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    sigma = np.sqrt(var + eps)

    def backward(g):
        return (g * centered / (hw * sigma),)

    return _result(sigma, (x,), backward)


def expand_channels(v, spatial):
    """Broadcast an ``(N, C, 1, 1)`` tensor to ``(N, C, H, W)``."""
    h, w = spatial
    if v.ndim != 4 or v.shape[2:] != (1, 1):
        raise ShapeError(f"expand_channels: expected (N, C, 1, 1), got {v.shape}")
    shape = v.shape[:2] + (h, w)

    def backward(g):
        return (g.sum(axis=(2, 3), keepdims=True),)

    return _result(np.broadcast_to(v.data, shape).copy(), (v,), backward)


def softmax(x, axis=1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


# ---- shape ops -----------------------------------------------------------

def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(old),)

    return _result(out, (x,), backward)


def _getitem(x, index):
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), (x,), backward)


def upsample_nearest(x, factor):
    """Nearest-neighbour spatial upsampling. Forward only: the result never requires grad."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim < 2:
        raise ShapeError(f"upsample_nearest: need at least 2 dims, got {data.shape}")
    out = np.repeat(np.repeat(data, factor, axis=-2), factor, axis=-1)
    return Tensor(out)


# ---- convolution ---------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation, NCHW input, ``(O, C, k, k)`` weight, zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels, weight {weight.shape} expects {cw}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match weight {weight.shape}")
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    # (N, Ho, Wo, C, kh, kw) -> rows of the im2col matrix
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(np.ascontiguousarray(out), parents, backward)


def catalog():
    """Names of the differentiable primitives this module provides."""
    return (
        "conv2d", "relu", "add", "sub", "mul", "div", "scalar_affine", "scalar_over",
        "channel_mean", "channel_std", "expand_channels", "softmax", "log", "clip_min",
        "sum", "mean", "reshape", "getitem",
    )
