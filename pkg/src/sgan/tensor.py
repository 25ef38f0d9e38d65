"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations needed by the networks and losses in this package are
provided. Every operation records a closure that maps the upstream gradient
to one gradient per parent; :meth:`Tensor.backward` walks the recorded graph
in reverse topological order.

Repeated calls to ``backward`` accumulate into leaf ``grad`` buffers. Use
:func:`zero_grad` (or set ``grad = None``) between optimizer steps.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "sum",
    "mean",
    "abs",
    "square",
    "log",
    "softplus",
    "huber",
    "concat_channels",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "activation",
    "conv2d",
    "conv_transpose2d",
    "BatchNormStats",
    "batch_norm",
]

MAX_RANK = 4

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-d array (rank <= 4) plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"tensor rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf that requires it."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor with requires_grad=True")

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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if not math.isfinite(float(g.sum())):
                    raise FloatingPointError("non-finite gradient reached a leaf tensor")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not math.isfinite(float(data.sum())):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar-vs-tensor broadcasting is supported
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is a scalar")


def _out_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    return a.shape if b.size == 1 else b.shape


# -- pointwise and reductions ------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    shape = _out_shape(a, b)
    data = (a.data.reshape(()) if a.size == 1 and a.shape != shape else a.data) + (
        b.data.reshape(()) if b.size == 1 and b.shape != shape else b.data
    )

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    return add(a, neg(_as_tensor(b)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    shape = _out_shape(a, b)
    ad = a.data.reshape(()) if a.size == 1 and a.shape != shape else a.data
    bd = b.data.reshape(()) if b.size == 1 and b.shape != shape else b.data

    def backward(g):
        ga = _reduce_to(g * bd, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def abs(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log of a non-positive value")
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = a.data
    return _result(np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),), "softplus")


def huber(a: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber function of a residual tensor."""
    x = a.data
    ax = np.abs(x)
    quad = ax <= delta
    data = np.where(quad, 0.5 * x * x, delta * (ax - 0.5 * delta))

    def backward(g):
        return (g * np.where(quad, x, delta * np.sign(x)),)

    return _result(data, (a,), backward, "huber")


def concat_channels(*tensors: Tensor) -> Tensor:
    if len(tensors) < 2:
        raise ValueError("concat_channels needs at least two tensors")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: shape {t.shape} is not compatible with {ref}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return _result(np.concatenate([t.data for t in tensors], axis=1), tensors, backward, "concat")


# -- activations --------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def activation(a: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind == "tanh":
        return tanh(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation {kind!r}")


# -- convolutions -------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N,C,H,W) -> (C,kh,kw,N,Ho,Wo) copy of every receptive field."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, hp, wp = x.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xt = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo))
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + hspan : stride, j : j + wspan : stride]
    return cols


def _col2im(cols: np.ndarray, h: int, w: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add (C,kh,kw,N,Ho,Wo) patches into an (N,C,h,w) image.

    ``h``/``w`` are the unpadded extents; the padding border is dropped.
    """
    c, kh, kw, n, ho, wo = cols.shape
    out = np.zeros((c, n, h + 2 * padding, w + 2 * padding))
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + hspan : stride, j : j + wspan : stride] += cols[:, i, j]
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _to_cm(x: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> (C, N*H*W)."""
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(x.shape[1], -1)


def _from_cm(m: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """(C, N*H*W) -> (N,C,H,W)."""
    return np.ascontiguousarray(m.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def _check_conv_args(stride: int, padding: int) -> None:
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    if int(padding) != padding or padding < 0:
        raise ValueError(f"padding must be a non-negative integer, got {padding}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an (N,Cin,H,W) batch with a (Cout,Cin,kh,kw) kernel."""
    _check_conv_args(stride, padding)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be rank 4 (N,C,H,W), got shape {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d kernel must be rank 4 (Cout,Cin,kh,kw), got shape {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d: kernel in-channels {kcin} != input channels {cin}")
    if h + 2 * padding < kh:
        raise ValueError(f"conv2d: padded height {h + 2 * padding} is smaller than kernel height {kh}")
    if w + 2 * padding < kw:
        raise ValueError(f"conv2d: padded width {w + 2 * padding} is smaller than kernel width {kw}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    if cout * 4 <= cin:
        return _conv2d_narrow(x, kernel, bias, stride, padding)

    cols = _im2col(x.data, kh, kw, stride, padding)
    ho, wo = cols.shape[4], cols.shape[5]
    cmat = cols.reshape(cin * kh * kw, n * ho * wo)
    wmat = kernel.data.reshape(cout, -1)
    out = wmat @ cmat
    if bias is not None:
        out += bias.data[:, None]
    data = _from_cm(out, n, ho, wo)

    def backward(g):
        gm = _to_cm(g)
        gx = gk = gb = None
        if x.requires_grad:
            gx = _col2im((wmat.T @ gm).reshape(cin, kh, kw, n, ho, wo), h, w, stride, padding)
        if kernel.requires_grad:
            gk = (gm @ cmat.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=1)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(data, parents, backward, "conv2d")


def _conv2d_narrow(x: Tensor, kernel: Tensor, bias: Tensor | None, stride: int, padding: int) -> Tensor:
    # few output channels: accumulate one kernel tap at a time instead of
    # materialising the (much larger) patch matrix
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xt = xp.transpose(1, 0, 2, 3)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    kd = kernel.data
    # contiguous per-tap (cout, cin) blocks; strided operands push matmul off BLAS
    kt = np.ascontiguousarray(kd.transpose(2, 3, 0, 1))

    def tap(i, j):
        return np.ascontiguousarray(xt[:, :, i : i + hspan : stride, j : j + wspan : stride]).reshape(cin, -1)

    out = np.zeros((cout, n * ho * wo))
    for i in range(kh):
        for j in range(kw):
            out += kt[i, j] @ tap(i, j)
    if bias is not None:
        out += bias.data[:, None]
    data = _from_cm(out, n, ho, wo)

    def backward(g):
        gm = _to_cm(g)
        gx = gk = gb = None
        if x.requires_grad and stride == 1 and kh == kw and padding <= kh - 1:
            # input gradient = correlation of g with the flipped, channel-swapped kernel
            flipped = np.ascontiguousarray(kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(cin, -1)
            gcols = _im2col(g, kh, kw, 1, kh - 1 - padding).reshape(cout * kh * kw, -1)
            gx = _from_cm(flipped @ gcols, n, h, w)
        elif x.requires_grad:
            gxt = np.zeros((cin, n) + xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i : i + hspan : stride, j : j + wspan : stride] += (kt[i, j].T @ gm).reshape(
                        cin, n, ho, wo
                    )
            if padding:
                gxt = gxt[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(gxt.transpose(1, 0, 2, 3))
        if kernel.requires_grad:
            gk = np.empty(kernel.shape)
            for i in range(kh):
                for j in range(kw):
                    gk[:, :, i, j] = gm @ tap(i, j).T
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=1)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(data, parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of :func:`conv2d`; kernel layout is (Cin,Cout,kh,kw)."""
    _check_conv_args(stride, padding)
    if x.ndim != 4:
        raise ValueError(f"conv_transpose2d input must be rank 4 (N,C,H,W), got shape {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"conv_transpose2d kernel must be rank 4 (Cin,Cout,kh,kw), got shape {kernel.shape}")
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv_transpose2d: kernel in-channels {kcin} != input channels {cin}")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ValueError(f"conv_transpose2d: output size {ho}x{wo} is empty")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv_transpose2d: bias shape {bias.shape} != ({cout},)")

    xm = _to_cm(x.data)
    kmat = kernel.data.reshape(cin, -1)
    cols = (kmat.T @ xm).reshape(cout, kh, kw, n, h, w)
    data = _col2im(cols, ho, wo, stride, padding)
    if bias is not None:
        data += bias.data[None, :, None, None]

    def backward(g):
        gcols = _im2col(g, kh, kw, stride, padding).reshape(cout * kh * kw, n * h * w)
        gx = gk = gb = None
        if x.requires_grad:
            gx = _from_cm(kmat @ gcols, n, h, w)
        if kernel.requires_grad:
            gk = (xm @ gcols.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(data, parents, backward, "conv_transpose2d")


# -- batch normalization ------------------------------------------------


class BatchNormStats:
    """Per-channel running mean/variance; empty until the first train-mode call."""

    def __init__(self, channels: int):
        self.channels = channels
        self.mean: np.ndarray | None = None
        self.var: np.ndarray | None = None

    @property
    def initialized(self) -> bool:
        return self.mean is not None

    def update(self, mean: np.ndarray, var: np.ndarray, momentum: float) -> None:
        if self.mean is None:
            # start from the usual (0, 1) prior so the first update matches the momentum rule
            self.mean = np.zeros(self.channels)
            self.var = np.ones(self.channels)
        self.mean = (1.0 - momentum) * self.mean + momentum * mean
        self.var = (1.0 - momentum) * self.var + momentum * var


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: BatchNormStats,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Training mode uses batch statistics and folds them into ``stats`` (the
    running variance uses the unbiased estimate). Eval mode treats the
    running statistics as constants.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.ndim != 4:
        raise ValueError(f"batch_norm input must be rank 4 (N,C,H,W), got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or stats.channels != c:
        raise ValueError(f"batch_norm: channel count {c} does not match gamma/beta/stats")
    gd = gamma.data[None, :, None, None]

    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv[None, :, None, None]
        unbiased = var * m / (m - 1) if m > 1 else var
        stats.update(mu, unbiased, momentum)

        def backward(g):
            gg = gb = gx = None
            if gamma.requires_grad:
                gg = (g * xhat).sum(axis=(0, 2, 3))
            if beta.requires_grad:
                gb = g.sum(axis=(0, 2, 3))
            if x.requires_grad:
                dxhat = g * gd
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            return gx, gg, gb

    else:
        if not stats.initialized:
            raise RuntimeError("batch_norm in eval mode before running statistics were initialized")
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x.data - stats.mean[None, :, None, None]) * inv[None, :, None, None]

        def backward(g):
            gx = g * gd * inv[None, :, None, None] if x.requires_grad else None
            gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            return gx, gg, gb

    data = xhat * gd + beta.data[None, :, None, None]
    return _result(data, (x, gamma, beta), backward, "batch_norm")
