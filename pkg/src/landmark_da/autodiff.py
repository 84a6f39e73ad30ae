"""Minimal reverse-mode differentiation over float64 numpy arrays.

Only the operations the landmark networks need are provided. Every op
records a node holding its parents and a closure computing the
vector-Jacobian product; :func:`backward` replays the nodes reachable from
a scalar loss in reverse execution order and then discards them.
"""
from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64

# Upper bound on the number of float64 entries in one im2col buffer (64 MB).
_IM2COL_BUDGET = 1 << 23
# im2col buffers up to this many entries (1 GB) are kept for the backward pass
# instead of being rebuilt.
_CACHE_BUDGET = 1 << 27

_sequence = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


class GraphError(RuntimeError):
    """Backward called on something that has no recorded graph."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class _Node:
    __slots__ = ("seq", "op", "parents", "vjp")

    def __init__(self, op: str, parents: tuple["Tensor", ...], vjp: Callable):
        self.seq = next(_sequence)
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """An n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    _check_finite(out, op)
    t = Tensor._wrap(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._node = _Node(op, tuple(parents), vjp)
    return t


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires gradients.

    Gradients accumulate into existing ``.grad`` arrays. The recorded graph
    is released afterwards, so a second call on the same loss raises.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise GraphError("loss has no recorded graph (already consumed or never tracked)")

    # Collect reachable nodes and their output tensors.
    order: dict[int, tuple[_Node, Tensor]] = {}
    stack = [loss]
    seen = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        node = t._node
        if node is None:
            continue
        order[node.seq] = (node, t)
        stack.extend(p for p in node.parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for seq in sorted(order, reverse=True):
        node, out = order[seq]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # released intermediates become constants
    for node, out in order.values():
        out._node = None
        out.requires_grad = False
        node.parents = ()


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _record("reshape", out, (x,), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------------------
# layers


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weights + bias`` with weights stored as [D, K]."""
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise ShapeError(f"dense expects 2-D input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[1]} != weight rows {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weights.shape[1]},)")
    xd, wd = x.data, weights.data

    def vjp(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weights.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _record("dense", xd @ wd + bias.data, (x, weights, bias), vjp)


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # xp: channels-last padded (n, h+2, w+2, C) -> (n*h*w, 9*C), columns ordered (ky, kx, C)
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, h, w, 9, c), dtype=DTYPE)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, 3 * i + j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _chunks(n: int, per_sample: int):
    step = max(1, _IM2COL_BUDGET // max(per_sample, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (cross-correlation form)."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W] input, got {x.shape}")
    if kernels.data.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects [F,C,3,3] kernels, got {kernels.shape}")
    n, c, h, w = x.shape
    f = kernels.shape[0]
    if kernels.shape[1] != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernels expect {kernels.shape[1]}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")

    # work channels-last so every copy moves contiguous channel runs
    xp = np.zeros((n, h + 2, w + 2, c), dtype=DTYPE)
    xp[:, 1:-1, 1:-1, :] = x.data.transpose(0, 2, 3, 1)
    if f < c:
        out, vjp = _conv_narrow(x, kernels, bias, xp)
    else:
        out, vjp = _conv_im2col(x, kernels, bias, xp)
    return _record("conv2d", out, (x, kernels, bias), vjp)


def _conv_im2col(x, kernels, bias, xp):
    n, c, h, w = x.shape
    f = kernels.shape[0]
    kmat = kernels.data.transpose(0, 2, 3, 1).reshape(f, 9 * c)
    out = np.empty((n, f, h, w), dtype=DTYPE)
    per_sample = h * w * c * 9
    keep = kernels.requires_grad and n * per_sample <= _CACHE_BUDGET
    cache = []
    for sl in _chunks(n, per_sample):
        cols = _im2col(xp[sl], h, w)
        res = cols @ kmat.T
        res += bias.data
        out[sl] = res.reshape(-1, h, w, f).transpose(0, 3, 1, 2)
        if keep:
            cache.append(cols)

    def vjp(g):
        need_x = x.requires_grad
        gk = np.zeros((f, 9 * c), dtype=DTYPE) if kernels.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = np.zeros((n, h + 2, w + 2, c), dtype=DTYPE) if need_x else None
        for idx, sl in enumerate(_chunks(n, per_sample)):
            g2 = np.ascontiguousarray(g[sl].transpose(0, 2, 3, 1)).reshape(-1, f)
            if gk is not None:
                gk += g2.T @ (cache[idx] if cache else _im2col(xp[sl], h, w))
            if need_x:
                dcols = (g2 @ kmat).reshape(-1, h, w, 9, c)
                dst = gx[sl]
                for i in range(3):
                    for j in range(3):
                        dst[:, i:i + h, j:j + w, :] += dcols[:, :, :, 3 * i + j, :]
        return (
            gx[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2).copy() if need_x else None,
            gk.reshape(f, 3, 3, c).transpose(0, 3, 1, 2).copy() if gk is not None else None,
            gb,
        )

    return out, vjp


def _conv_narrow(x, kernels, bias, xp):
    # Fewer output than input channels: project every padded pixel onto all
    # 9*F tap outputs with one matmul, then sum shifted slices. Traffic scales
    # with F instead of with the 9x im2col expansion of C.
    n, c, h, w = x.shape
    f = kernels.shape[0]
    hp, wp = h + 2, w + 2
    kall = kernels.data.transpose(1, 2, 3, 0).reshape(c, 9 * f)  # [c, (ky, kx, f)]
    per_sample = hp * wp * 9 * f
    out = np.empty((n, f, h, w), dtype=DTYPE)
    for sl in _chunks(n, per_sample):
        m = sl.stop - sl.start
        taps = (xp[sl].reshape(-1, c) @ kall).reshape(m, hp, wp, 9, f)
        acc = np.zeros((m, h, w, f), dtype=DTYPE)
        for i in range(3):
            for j in range(3):
                acc += taps[:, i:i + h, j:j + w, 3 * i + j, :]
        acc += bias.data
        out[sl] = acc.transpose(0, 3, 1, 2)

    def vjp(g):
        gk = np.zeros((c, 9 * f), dtype=DTYPE) if kernels.requires_grad else None
        gx = np.empty((n, c, h, w), dtype=DTYPE) if x.requires_grad else None
        for sl in _chunks(n, per_sample):
            m = sl.stop - sl.start
            gl = g[sl].transpose(0, 2, 3, 1)
            spread = np.zeros((m, hp, wp, 9, f), dtype=DTYPE)
            for i in range(3):
                for j in range(3):
                    spread[:, i:i + h, j:j + w, 3 * i + j, :] = gl
            spread = spread.reshape(-1, 9 * f)
            if gk is not None:
                gk += xp[sl].reshape(-1, c).T @ spread
            if gx is not None:
                gxp = (spread @ kall.T).reshape(m, hp, wp, c)
                gx[sl] = gxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)
        if gk is not None:
            gk = gk.reshape(c, 3, 3, f).transpose(3, 0, 1, 2).copy()
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gk, gb

    return out, vjp

def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.

    Ties send the gradient to the first window element in row-major order.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 expects [N,C,H,W] input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _record("maxpool2", out, (x,), vjp)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2 expects [N,C,H,W] input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record("upsample2", out, (x,), vjp)


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: Tensor, target) -> Tensor:
    """Squared error summed within each batch member, averaged over the batch."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    if pred.data.ndim == 0:
        raise ShapeError("mse_loss needs a leading batch axis")
    n = pred.shape[0]
    diff = pred.data - target
    value = np.array(np.sum(diff * diff) / n)
    return _record("mse_loss", value, (pred,), lambda g: (g * (2.0 / n) * diff,))


def mae(a: Tensor, b) -> Tensor:
    """Mean absolute error of two length-k vectors; sign(0) is taken as 0."""
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=DTYPE)
    if a.data.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"mae expects vectors, got {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise ShapeError(f"mae: lengths {a.shape[0]} and {b.shape[0]} differ")
    k = a.shape[0]
    if k == 0:
        raise ShapeError("mae of empty vectors is undefined")
    diff = a.data - b
    return _record("mae", np.array(np.abs(diff).sum() / k), (a,), lambda g: (g * np.sign(diff) / k,))


def mae_loss(pred: Tensor, target) -> Tensor:
    """Batch mean of per-row MAE between [N, k] predictions and targets."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if pred.data.ndim != 2 or pred.shape != target.shape:
        raise ShapeError(f"mae_loss: pred {pred.shape} vs target {target.shape}")
    n, k = pred.shape
    if k == 0 or n == 0:
        raise ShapeError("mae_loss needs non-empty [N, k] inputs")
    diff = pred.data - target
    value = np.array(np.abs(diff).sum(axis=1).mean() / k)
    return _record("mae_loss", value, (pred,), lambda g: (g * np.sign(diff) / (n * k),))
