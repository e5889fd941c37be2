"""Rank-4 tensors with reverse-mode automatic differentiation.

Feature maps are ``(batch, channels, height, width)`` arrays. Parameters
(kernels, biases, dense matrices) may have other ranks; they are leaves of
the graph and only ever enter through the ops below.

Every op returns a new :class:`Tensor`. When any input requires a gradient
(and grad mode is on) the output records its parents and a backward rule
mapping the output gradient to one gradient per parent.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "conv2d",
    "conv2d_adjoint",
    "conv_transpose2d",
    "maxpool2d",
    "pool_spatial",
    "pool_channel",
    "activation",
    "dense",
    "ew",
    "concat",
    "channels",
    "reshape",
    "flatten",
    "total",
    "scale",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible.

    ``dim`` names the offending dimension (``"channels"``, ``"height"``, ...).
    """

    def __init__(self, message: str, dim: str | None = None):
        super().__init__(message)
        self.dim = dim


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A numeric array plus optional gradient state."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; the named functions are the canonical API
    def __add__(self, other: Tensor) -> Tensor:
        return ew(self, other, "add")

    def __sub__(self, other: Tensor) -> Tensor:
        return ew(self, other, "sub")

    def __mul__(self, other: Tensor) -> Tensor:
        return ew(self, other, "mul")

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable tensor that requires one.

        Repeated calls accumulate into existing ``.grad`` buffers.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}", dim="size")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")

        # iterative post-order DFS; deep U-nets overflow the recursion limit otherwise
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _require_rank4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected (B, C, H, W) input, got shape {x.shape}", dim="rank")


# --------------------------------------------------------------------------
# convolutions


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    B, C, H, W = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C, H, W, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * k * k)


def conv2d_adjoint(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of the same-padded convolution w.r.t. its input.

    ``<conv2d(x, K), g> == <x, conv2d_adjoint(g, K)>`` for bias-free ``conv2d``.
    """
    B, O, H, W = g.shape
    _, C, k, _ = kernel.shape
    p = k // 2
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
    dcols = (g2 @ kernel.reshape(O, -1)).reshape(B, H, W, C, k, k)
    dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + H, j : j + W] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p : p + H, p : p + W]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero padding ``k // 2`` (spatial size kept).

    ``kernel`` is ``(C_out, C_in, k, k)`` with odd ``k``; ``bias`` is ``(C_out,)``.
    """
    _require_rank4(x, "conv2d")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (C_out, C_in, k, k), got {kernel.shape}", dim="rank")
    O, C, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}", dim="kernel")
    if x.shape[1] != C:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {C}", dim="channels")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)", dim="bias")

    B, _, H, W = x.shape
    cols = _im2col(x.data, kh)
    wmat = kernel.data.reshape(O, -1)
    out = (cols @ wmat.T).reshape(B, H, W, O).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g: np.ndarray):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        dx = conv2d_adjoint(g, kernel.data) if x.requires_grad else None
        dk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return dx, dk, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, backward)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """2x2, stride-2 up-convolution; doubles H and W.

    ``kernel`` is ``(C_in, C_out, 2, 2)``. Output tiles do not overlap.
    """
    _require_rank4(x, "conv_transpose2d")
    if stride != 2:
        raise ShapeError(f"conv_transpose2d: only stride 2 is supported, got {stride}", dim="stride")
    if kernel.data.ndim != 4 or kernel.shape[2:] != (2, 2):
        raise ShapeError(f"conv_transpose2d: kernel must be (C_in, C_out, 2, 2), got {kernel.shape}", dim="kernel")
    C, O = kernel.shape[:2]
    if x.shape[1] != C:
        raise ShapeError(f"conv_transpose2d: input has {x.shape[1]} channels, kernel expects {C}", dim="channels")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({O},)", dim="bias")

    B, _, H, W = x.shape
    xr = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    wmat = kernel.data.reshape(C, O * 4)
    y = (xr @ wmat).reshape(B, H, W, O, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(B, O, 2 * H, 2 * W)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    y = np.ascontiguousarray(y)

    def backward(g: np.ndarray):
        gt = g.reshape(B, O, H, 2, W, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, O * 4)
        dx = (gt @ wmat.T).reshape(B, H, W, C).transpose(0, 3, 1, 2) if x.requires_grad else None
        dk = (xr.T @ gt).reshape(kernel.shape) if kernel.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return dx, dk, db

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(y, parents, backward)


# --------------------------------------------------------------------------
# pooling


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties go to the first element in row-major order."""
    _require_rank4(x, "maxpool2d")
    B, C, H, W = x.shape
    if H % 2:
        raise ShapeError(f"maxpool2d: height {H} is odd", dim="height")
    if W % 2:
        raise ShapeError(f"maxpool2d: width {W} is odd", dim="width")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        onehot = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        dx = onehot.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (dx,)

    return _result(out, (x,), backward)


def _reduce(x: Tensor, axes: tuple[int, ...], mode: str) -> Tensor:
    data = x.data
    if mode == "avg":
        count = int(np.prod([data.shape[a] for a in axes]))
        out = data.mean(axis=axes, keepdims=True)

        def backward(g: np.ndarray):
            return (np.broadcast_to(g / count, data.shape).copy(),)

        return _result(out, (x,), backward)
    if mode == "max":
        moved = np.moveaxis(data, axes, tuple(range(data.ndim - len(axes), data.ndim)))
        lead = moved.shape[: data.ndim - len(axes)]
        flat = moved.reshape(*lead, -1)
        idx = flat.argmax(axis=-1)
        vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        out = np.expand_dims(vals, axes)

        def backward(g: np.ndarray):
            gflat = np.zeros(flat.shape, dtype=g.dtype)
            np.put_along_axis(gflat, idx[..., None], g.reshape(lead)[..., None], axis=-1)
            back = gflat.reshape(moved.shape)
            return (np.moveaxis(back, tuple(range(data.ndim - len(axes), data.ndim)), axes),)

        return _result(out, (x,), backward)
    raise ValueError(f"unknown pooling mode {mode!r}; expected 'avg' or 'max'")


def pool_spatial(x: Tensor, mode: str = "avg") -> Tensor:
    """Global per-channel reduction over H and W -> ``(B, C, 1, 1)``."""
    _require_rank4(x, "pool_spatial")
    return _reduce(x, (2, 3), mode)


def pool_channel(x: Tensor, mode: str = "avg") -> Tensor:
    """Per-pixel reduction over channels -> ``(B, 1, H, W)``."""
    _require_rank4(x, "pool_channel")
    return _reduce(x, (1,), mode)


# --------------------------------------------------------------------------
# elementwise


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "tanh":
        y = np.tanh(x.data)
        return _result(y, (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        # split form avoids exp overflow for large |x|
        z = np.exp(-np.abs(x.data))
        y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        return _result(y, (x,), lambda g: (g * y * (1.0 - y),))
    if kind == "relu":
        pos = x.data > 0
        return _result(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,))
    raise ValueError(f"unknown activation {kind!r}; expected tanh, sigmoid or relu")


def ew(x: Tensor, y: Tensor, op: str = "add") -> Tensor:
    """Elementwise ``add``, ``sub`` or ``mul`` with ``y`` broadcast onto ``x``.

    ``y`` must have ``x``'s rank and each of its dims must equal ``x``'s or be 1
    (e.g. ``(B, C, 1, 1)`` channel maps, ``(B, 1, H, W)`` spatial maps,
    ``(1, C, H, W)`` weight grids).
    """
    x, y = _as_tensor(x), _as_tensor(y)
    if x.data.ndim != y.data.ndim:
        raise ShapeError(f"ew: rank mismatch {x.shape} vs {y.shape}", dim="rank")
    for d, (a, b) in enumerate(zip(x.shape, y.shape)):
        if b != a and b != 1:
            raise ShapeError(f"ew: {y.shape} does not broadcast onto {x.shape}", dim=_DIM_NAMES.get(d, str(d)))
    xs, ys = x.shape, y.shape
    if op == "add":
        return _result(x.data + y.data, (x, y), lambda g: (g, _unbroadcast(g, ys)))
    if op == "sub":
        return _result(x.data - y.data, (x, y), lambda g: (g, _unbroadcast(-g, ys)))
    if op == "mul":
        xd, yd = x.data, y.data

        def backward(g: np.ndarray):
            gx = g * yd if x.requires_grad else None
            gy = _unbroadcast(g * xd, ys) if y.requires_grad else None
            if gx is not None and gx.shape != xs:
                gx = np.broadcast_to(gx, xs).copy()
            return gx, gy

        return _result(xd * yd, (x, y), backward)
    raise ValueError(f"unknown elementwise op {op!r}; expected add, sub or mul")


_DIM_NAMES = {0: "batch", 1: "channels", 2: "height", 3: "width"}


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


# --------------------------------------------------------------------------
# structural


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on flattened features.

    ``x`` is ``(B, N, 1, 1)`` (or any rank-4 tensor, flattened per sample);
    ``weight`` is ``(M, N)``. Returns ``(B, M, 1, 1)``.
    """
    _require_rank4(x, "dense")
    B = x.shape[0]
    flat = x.data.reshape(B, -1)
    M, N = weight.shape
    if flat.shape[1] != N:
        raise ShapeError(f"dense: input length {flat.shape[1]} != weight columns {N}", dim="features")
    if bias is not None and bias.shape != (M,):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({M},)", dim="bias")
    out = flat @ weight.data.T
    if bias is not None:
        out = out + bias.data
    xs = x.shape

    def backward(g: np.ndarray):
        g2 = g.reshape(B, M)
        dx = (g2 @ weight.data).reshape(xs) if x.requires_grad else None
        dw = g2.T @ flat if weight.requires_grad else None
        db = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out.reshape(B, M, 1, 1), parents, backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}", dim=_DIM_NAMES.get(axis)) from None
    bounds = np.cumsum([0] + sizes)

    def backward(g: np.ndarray):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _result(out, tuple(tensors), backward)


def channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channel slice ``x[:, start:stop]``."""
    _require_rank4(x, "channels")
    xs = x.shape

    def backward(g: np.ndarray):
        full = np.zeros(xs, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    xs = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(xs),))


def flatten(x: Tensor) -> Tensor:
    """``(B, C, H, W)`` -> ``(B, C*H*W, 1, 1)``."""
    return reshape(x, (x.shape[0], -1, 1, 1))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a ``(1, 1, 1, 1)`` tensor."""
    xs = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    return _result(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), xs).copy(),))


# --------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between autograd and central finite differences.

    ``f`` maps a tensor to a scalar tensor. The error per element is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    f(xt).backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(x)).data.reshape(()))
            flat[i] = orig - eps
            fm = float(f(Tensor(x)).data.reshape(()))
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
