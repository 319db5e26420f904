"""Small reverse-mode differentiation engine over dense floating-point arrays.

Only the operations needed by the velocity network, the ODE flow and the
registration objective are provided. Every op builds a node holding the
forward result, its parents and a closure mapping the output gradient to
parent gradients.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

DTYPE = np.float64
_active_dtype = DTYPE


def get_default_dtype():
    return _active_dtype


class default_dtype:
    """Context manager selecting the float type of newly created tensors.

    Float64 is the default and is what gradient checks use; float32 roughly
    halves the cost of the convolutions during fitting.
    """

    def __init__(self, dtype):
        dtype = np.dtype(dtype)
        if dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported dtype {dtype}")
        self.dtype = dtype.type

    def __enter__(self):
        global _active_dtype
        self._prev = _active_dtype
        _active_dtype = self.dtype
        return self

    def __exit__(self, *exc):
        global _active_dtype
        _active_dtype = self._prev

ArrayLike = Union["Tensor", np.ndarray, float, int]


class GraphError(RuntimeError):
    """Raised when a graph is used in an unsupported way."""


class Tensor:
    """Dense array that records the operations applied to it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_active_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False
        self.name = name

    # ----------------------------------------------------------- properties
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ------------------------------------------------------------ operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    # ------------------------------------------------------------- backward
    def backward(self) -> None:
        """Back-propagate from this scalar through the recorded graph.

        Leaf gradients accumulate into ``.grad``; the graph is released
        afterwards, so a second call on the same root is rejected.
        """
        if self.data.size != 1 or self.data.ndim > 1:
            raise GraphError(f"backward needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward pass")
        if not self.requires_grad:
            raise GraphError("root does not depend on any tensor requiring grad")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    if pg.dtype != parent.data.dtype:
                        pg = pg.astype(parent.data.dtype)
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = None
            node._parents = ()
            node._consumed = True


def _topological_order(root: Tensor) -> list:
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


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


class no_grad:
    """Context manager that stops graph recording (evaluation only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ------------------------------------------------------------- elementwise
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _node(a.data * factor, (a,), lambda g: (g * factor,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _node(out, (a,), backward)


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def absolute(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    positive = a.data > 0
    out = np.where(positive, a.data, a.data * slope)
    return _node(out, (a,), lambda g: (np.where(positive, g, g * slope),))


# --------------------------------------------------------------- reductions
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _node(out, (a,), backward)


def instance_stats(a: Tensor) -> tuple:
    """Per-channel mean and population variance over the last two axes."""
    mu = a.data.mean(axis=(-2, -1), keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=(-2, -1), keepdims=True)
    count = a.shape[-1] * a.shape[-2]
    mean_t = _node(mu, (a,), lambda g: (np.broadcast_to(g / count, a.shape).copy(),))
    var_t = _node(var, (a,), lambda g: (g * (2.0 / count) * centered,))
    return mean_t, var_t


def modulated_instance_norm(f: Tensor, modulation: Tensor, index: np.ndarray, eps: float = 1e-5) -> Tensor:
    """``gamma * instance_norm(f) + beta`` with scale/shift looked up per pixel.

    ``f`` is ``[N,C,H,W]``; ``modulation`` is ``[N,2C,U]`` holding ``U``
    distinct (gamma, beta) columns, the first ``C`` rows being gamma;
    ``index`` maps each of the ``H*W`` pixels to one of those columns.
    """
    f, modulation = as_tensor(f), as_tensor(modulation)
    n, c, h, w = f.shape
    u = modulation.shape[-1]
    if modulation.shape != (n, 2 * c, u):
        raise ValueError(f"modulation must be [{n}, {2 * c}, U], got {modulation.shape}")
    index = np.asarray(index, dtype=np.intp).reshape(-1)
    if index.shape != (h * w,):
        raise ValueError(f"index must list {h * w} pixels, got {index.shape}")
    x = f.data.reshape(n, c, h * w)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    pixel_mod = np.take(modulation.data, index, axis=-1)  # [N, 2C, HW]
    gamma = pixel_mod[:, :c]
    out = gamma * xhat + pixel_mod[:, c:]
    order = np.argsort(index, kind="stable")
    sorted_idx = index[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    targets = sorted_idx[starts]

    def backward(g):
        g = g.reshape(n, c, h * w)
        gm = None
        if modulation.requires_grad:
            per_pixel = np.empty((n, 2 * c, h * w), dtype=g.dtype)
            np.multiply(g, xhat, out=per_pixel[:, :c])
            per_pixel[:, c:] = g
            gm = np.zeros(modulation.shape, dtype=g.dtype)
            gm[..., targets] = np.add.reduceat(np.take(per_pixel, order, axis=-1), starts, axis=-1)
        gf = None
        if f.requires_grad:
            gx = g * gamma
            mean_g = gx.mean(axis=-1, keepdims=True)
            mean_gx = np.einsum("ncp,ncp->nc", gx, xhat)[..., None] / (h * w)
            gx -= mean_g
            gx -= xhat * mean_gx
            gx *= rstd
            gf = gx.reshape(f.shape)
        return gf, gm

    return _node(out.reshape(n, c, h, w), (f, modulation), backward)


# ------------------------------------------------------------ shape changes
def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _node(np.array(out, copy=True), (a,), backward)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    lead = (slice(None),) * (axis % out.ndim)

    def backward(g):
        return tuple(g[lead + (slice(bounds[i], bounds[i + 1]),)] for i in range(len(tensors)))

    return _node(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in map(as_tensor, tensors)]
    return concat(expanded, axis=axis)


def take(a: Tensor, indices: np.ndarray, axis: int = -1) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)
    order = np.argsort(indices, kind="stable")
    sorted_idx = indices[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    targets = sorted_idx[starts]

    def backward(g):
        full = np.zeros_like(a.data)
        summed = np.add.reduceat(np.take(g, order, axis=axis), starts, axis=axis)
        index = [slice(None)] * a.ndim
        index[axis] = targets
        full[tuple(index)] = summed
        return (full,)

    return _node(out, (a,), backward)


# ---------------------------------------------------------------- imaging
def _batched(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 3 else x


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``[C,H,W]`` or ``[N,C,H,W]`` input with ``[O,C,k,k]`` weights."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"weight must be [C_out, C_in, k, k], got {weight.shape}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ValueError("padding must be non-negative")
    squeeze = x.ndim == 3
    xd = _batched(x.data)
    n, c, h, w = xd.shape
    if c != weight.shape[1]:
        raise ValueError(f"input has {c} channels but weight expects {weight.shape[1]}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for kernel {k} with padding {padding}")
    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    kernel = _conv_shifted if stride == 1 else _conv_im2col
    out, grads = kernel(xd, weight.data, None if bias is None else as_tensor(bias).data, stride, padding, ho, wo)
    if squeeze:
        out = out[0]

    def backward(g):
        gx, gw, gb = grads(_batched(g), x.requires_grad, weight.requires_grad)
        if gx is not None and squeeze:
            gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _node(out, parents, backward)


# columns per cache-resident tile of the flat spatial axis
_CONV_TILE = 8192
# layers with at least this many C_in*C_out weight pairs use gathered tiles
_GATHER_MIN_WORK = 1024
_GATHER_TILE = 512


def _conv_shifted(xd, wd, bd, stride, padding, ho, wo):
    """Stride-1 convolution as one small GEMM per kernel tap.

    The padded input is laid out as ``[C, N*Hp*Wp]``; shifting by a tap is
    then a contiguous offset along the flat axis, so every tap multiplies a
    strided view without copying. Outputs land on the padded grid and the
    ``k-1`` spill-over rows/columns are cropped.
    """
    n, c, h, w = xd.shape
    cout, _, k, _ = wd.shape
    dt = xd.dtype
    hp, wp = h + 2 * padding, w + 2 * padding
    flat = np.zeros((c, n, hp, wp), dtype=dt)
    flat[:, :, padding : padding + h, padding : padding + w] = xd.transpose(1, 0, 2, 3)
    flat = flat.reshape(c, n * hp * wp)
    total = flat.shape[1]
    span = total - ((k - 1) * wp + (k - 1))
    taps = [(i * wp + j, np.ascontiguousarray(wd[:, :, i, j])) for i in range(k) for j in range(k)]

    # wide layers: gather the taps of a short tile and run one K = C*k*k GEMM
    gather = c * cout >= _GATHER_MIN_WORK
    wmat = np.ascontiguousarray(wd.transpose(0, 2, 3, 1).reshape(cout, k * k * c)) if gather else None

    def tiles(size):
        for s0 in range(0, span, size):
            yield s0, min(s0 + size, span)

    def gather_cols(cols, s0, s1):
        view = cols[:, :, : s1 - s0]
        for t, (off, _) in enumerate(taps):
            view[t] = flat[:, s0 + off : s1 + off]
        return view.reshape(k * k * c, s1 - s0)

    acc = np.zeros((cout, total), dtype=dt)
    if gather:
        cols = np.empty((k * k, c, min(span, _GATHER_TILE)), dtype=dt)
        for s0, s1 in tiles(_GATHER_TILE):
            np.matmul(wmat, gather_cols(cols, s0, s1), out=acc[:, s0:s1])
    else:
        buf = np.empty((cout, min(span, _CONV_TILE)), dtype=dt)
        for s0, s1 in tiles(_CONV_TILE):
            view, b = acc[:, s0:s1], buf[:, : s1 - s0]
            for off, wt in taps:
                np.matmul(wt, flat[:, s0 + off : s1 + off], out=b)
                view += b
    out = acc.reshape(cout, n, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    if bd is not None:
        out = out + bd.astype(dt)[:, None, None]
    else:
        out = np.ascontiguousarray(out)

    def grads(g, need_x, need_w):
        gpad = np.zeros((cout, n, hp, wp), dtype=dt)
        gpad[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gv = gpad.reshape(cout, total)[:, :span]
        if gather:
            return _gathered_grads(gv, need_x, need_w) + (g.sum(axis=(0, 2, 3)),)
        gw = None
        if need_w:
            gw = np.empty(wd.shape, dtype=dt)
            for t, (off, _) in enumerate(taps):
                gw[:, :, t // k, t % k] = gv @ flat[:, off : off + span].T
        gx = None
        if need_x:
            gflat = np.zeros((c, total), dtype=dt)
            gbuf = np.empty((c, min(span, _CONV_TILE)), dtype=dt)
            wts = [np.ascontiguousarray(wt.T) for _, wt in taps]
            for s0 in range(0, span, _CONV_TILE):
                s1 = min(s0 + _CONV_TILE, span)
                gt, b = gv[:, s0:s1], gbuf[:, : s1 - s0]
                for (off, _), wt in zip(taps, wts):
                    np.matmul(wt, gt, out=b)
                    gflat[:, s0 + off : s1 + off] += b
            gx = gflat.reshape(c, n, hp, wp)[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        return gx, gw, g.sum(axis=(0, 2, 3))

    def _gathered_grads(gv, need_x, need_w):
        gwm = np.zeros((cout, k * k * c), dtype=dt) if need_w else None
        gflat = np.zeros((c, total), dtype=dt) if need_x else None
        wmat_t = np.ascontiguousarray(wmat.T)
        cols = np.empty((k * k, c, min(span, _GATHER_TILE)), dtype=dt)
        gcols = np.empty((k * k * c, min(span, _GATHER_TILE)), dtype=dt)
        part = np.empty((cout, k * k * c), dtype=dt)
        for s0, s1 in tiles(_GATHER_TILE):
            gt = gv[:, s0:s1]
            if need_w:
                np.matmul(gt, gather_cols(cols, s0, s1).T, out=part)
                gwm += part
            if need_x:
                gc = gcols[:, : s1 - s0]
                np.matmul(wmat_t, gt, out=gc)
                gc = gc.reshape(k * k, c, s1 - s0)
                for t, (off, _) in enumerate(taps):
                    gflat[:, s0 + off : s1 + off] += gc[t]
        gw = gwm.reshape(cout, k, k, c).transpose(0, 3, 1, 2).copy() if need_w else None
        gx = None
        if need_x:
            gx = gflat.reshape(c, n, hp, wp)[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        return gx, gw

    return out, grads


def _conv_im2col(xd, wd, bd, stride, padding, ho, wo):
    n, c, h, w = xd.shape
    cout, _, k, _ = wd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.empty((n, c, k, k, ho, wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + span_h : stride, j : j + span_w : stride]
    cols = cols.reshape(n, c * k * k, ho * wo)
    wmat = wd.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bd is not None:
        out += bd[:, None]
    out = out.reshape(n, cout, ho, wo)

    def grads(g, need_x, need_w):
        gm = g.reshape(n, cout, ho * wo)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape) if need_w else None
        gx = None
        if need_x:
            gcols = np.matmul(wmat.T, gm).reshape(n, c, k, k, ho, wo)
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + span_h : stride, j : j + span_w : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gm.sum(axis=(0, 2))

    return out, grads


def _tap_indices(coords: np.ndarray):
    cx, cy = coords[..., 0], coords[..., 1]
    x0 = np.floor(cx)
    y0 = np.floor(cy)
    return x0.astype(np.intp), y0.astype(np.intp), cx - x0, cy - y0


def grid_sample_bilinear(x: Tensor, coords: Tensor, padding: Union[float, str, Sequence[float]] = 0.0) -> Tensor:
    """Bilinear lookup of ``x`` at absolute pixel coordinates ``(col, row)``.

    ``x`` is ``[C,H,W]`` or ``[N,C,H,W]``; ``coords`` is ``[Ho,Wo,2]`` or
    ``[N,Ho,Wo,2]``. An unbatched ``x`` with batched coords is shared across
    the batch. ``padding`` is a constant (or one constant per channel) used
    for taps outside the image, or ``"border"`` to repeat edge values.
    """
    x, coords = as_tensor(x), as_tensor(coords)
    xd = x.data
    cd = coords.data
    if cd.shape[-1] != 2:
        raise ValueError(f"coords must end with a (col, row) axis, got {cd.shape}")
    shared = xd.ndim == 3
    c, h, w = xd.shape[-3:]
    batch_coords = cd.ndim == 4
    cb = cd if batch_coords else cd[None]
    n = cb.shape[0]
    if not shared and xd.shape[0] != n:
        raise ValueError(f"batch mismatch between input {xd.shape} and coords {cd.shape}")
    border = isinstance(padding, str)
    if border and padding != "border":
        raise ValueError(f"unknown padding mode {padding!r}")
    pad = None if border else np.broadcast_to(np.asarray(padding, dtype=xd.dtype), (c,))

    x0, y0, fx, fy = _tap_indices(cb)
    flat = xd.reshape(-1, c, h * w) if not shared else xd.reshape(1, c, h * w)
    taps = []
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        lin = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
        if shared:
            vals = flat[0][:, lin]  # [C, N, Ho, Wo]
            vals = np.moveaxis(vals, 0, 1)
        else:
            vals = np.take_along_axis(flat, lin.reshape(n, 1, -1), axis=2).reshape((n, c) + lin.shape[1:])
        if not border:
            vals = np.where(inside[:, None], vals, pad[None, :, None, None])
        taps.append((lin, inside, vals))

    wx = (1.0 - fx, fx, 1.0 - fx, fx)
    wy = (1.0 - fy, 1.0 - fy, fy, fy)
    out = taps[0][2] * (wx[0] * wy[0])[:, None]
    for t in range(1, 4):
        out = out + taps[t][2] * (wx[t] * wy[t])[:, None]
    if shared and not batch_coords:
        out = out[0]
    out_shape = out.shape

    def backward(g):
        gb = g.reshape((n, c) + cb.shape[1:3])
        gx = None
        if x.requires_grad:
            gflat = np.zeros((1 if shared else n, c, h * w), dtype=xd.dtype)
            for t, (lin, inside, _) in enumerate(taps):
                contrib = gb * (wx[t] * wy[t])[:, None]
                if not border:
                    contrib = contrib * inside[:, None]
                if shared:
                    idx = np.broadcast_to(lin[:, None], contrib.shape)
                    for ch in range(c):
                        gflat[0, ch] += np.bincount(idx[:, ch].ravel(), contrib[:, ch].ravel(), minlength=h * w)
                else:
                    offsets = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
                    idx = lin[:, None] + offsets
                    gflat += np.bincount(idx.ravel(), contrib.ravel(), minlength=n * c * h * w).reshape(n, c, h * w)
            gx = gflat.reshape(xd.shape)
        gc = None
        if coords.requires_grad:
            v00, v10, v01, v11 = (tp[2] for tp in taps)
            dfx = (v10 - v00) * (1.0 - fy)[:, None] + (v11 - v01) * fy[:, None]
            dfy = (v01 - v00) * (1.0 - fx)[:, None] + (v11 - v10) * fx[:, None]
            gcx = (gb * dfx).sum(axis=1)
            gcy = (gb * dfy).sum(axis=1)
            gc = np.stack([gcx, gcy], axis=-1).reshape(cd.shape)
        return gx, gc

    return _node(out.reshape(out_shape), (x, coords), backward)


def gaussian_kernel(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=DTYPE)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def blur_matrix(n: int, sigma: float) -> np.ndarray:
    """Dense ``n x n`` operator of a reflect-padded 1-D Gaussian filter."""
    kernel = gaussian_kernel(sigma)
    radius = len(kernel) // 2
    eye = np.pad(np.eye(n), ((radius, radius), (0, 0)), mode="reflect") if n > 1 else np.ones((1 + 2 * radius, 1))
    windows = sliding_window_view(eye, len(kernel), axis=0)  # [n, n, taps]
    return windows @ kernel


def gaussian_blur(x: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian filter over the last two axes (reflect padding)."""
    x = as_tensor(x)
    bh = blur_matrix(x.shape[-2], sigma).astype(x.data.dtype)
    bw = blur_matrix(x.shape[-1], sigma).astype(x.data.dtype)
    out = bh @ x.data @ bw.T
    return _node(out, (x,), lambda g: (bh.T @ g @ bw,))


def _bilinear_upsample_matrix(n: int) -> np.ndarray:
    centers = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    centers = np.clip(centers, 0.0, n - 1)
    lo = np.floor(centers).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = centers - lo
    mat = np.zeros((2 * n, n))
    np.add.at(mat, (np.arange(2 * n), lo), 1.0 - frac)
    np.add.at(mat, (np.arange(2 * n), hi), frac)
    return mat


def upsample2x(x: Tensor, mode: str = "bilinear") -> Tensor:
    """Double the size of the last two axes."""
    x = as_tensor(x)
    if mode == "nearest":
        out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

        def backward(g):
            s = g.shape
            return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

        return _node(out, (x,), backward)
    if mode != "bilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")
    ah = _bilinear_upsample_matrix(x.shape[-2]).astype(x.data.dtype)
    aw = _bilinear_upsample_matrix(x.shape[-1]).astype(x.data.dtype)
    out = ah @ x.data @ aw.T
    return _node(out, (x,), lambda g: (ah.T @ g @ aw,))


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward)


def conv2d_sampled(x: Tensor, weight: Tensor, bias: Optional[Tensor], rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """``conv2d`` with same-padding evaluated only at the listed output pixels.

    ``x`` is ``[N,C,H,W]``; returns ``[N,C_out,U]`` for ``U`` positions.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    n, c, h, w = x.shape
    cout, cin, k, _ = weight.shape
    if cin != c:
        raise ValueError(f"input has {c} channels but weight expects {cin}")
    dt = x.data.dtype
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    rows, cols = np.asarray(rows), np.asarray(cols)
    u = len(rows)
    taps = np.stack([(rows + i) * wp + (cols + j) for i in range(k) for j in range(k)]).ravel()
    # batch innermost so gathered patches form the [C*k*k, U*N] column matrix directly
    xp = np.zeros((c, hp, wp, n), dtype=dt)
    xp[:, p : p + h, p : p + w, :] = x.data.transpose(1, 2, 3, 0)
    colmat = xp.reshape(c, hp * wp, n)[:, taps, :].reshape(c * k * k, u * n)
    wmat = weight.data.reshape(cout, c * k * k)
    out = (wmat @ colmat).reshape(cout, u, n).transpose(2, 0, 1)
    if bias is not None:
        out = out + bias.data[:, None]
    else:
        out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(1, 2, 0)).reshape(cout, u * n)
        gw = (gm @ colmat.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(c, k * k * u, n)
            # one-nonzero-per-column scatter from patch entries to padded pixels
            scatter = sparse.csr_matrix(
                (np.ones(taps.size, dtype=dt), (taps, np.arange(taps.size))), shape=(hp * wp, taps.size)
            )
            gxp = np.empty((c, hp * wp, n), dtype=dt)
            for ch in range(c):
                gxp[ch] = scatter @ gcols[ch]
            gx = gxp.reshape(c, hp, wp, n)[:, p : p + h, p : p + w, :].transpose(3, 0, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _node(out, parents, backward)
