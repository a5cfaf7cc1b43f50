"""Minimal reverse-mode autodiff over numpy arrays.

Only the operators needed by the detector are provided: convolution, 2x2
average pooling, nearest 2x upsampling, batch normalization, relu, affine
maps, softmax / cross-entropy and a handful of elementwise reductions.

Arrays are float32 by default; ``float64_mode()`` switches newly created
tensors to float64 for finite-difference gradient checks.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = {"dtype": np.float32, "grad_enabled": True}


class NonFiniteError(FloatingPointError):
    """Raised when an operator produces NaN or Inf."""


class ShapeError(ValueError):
    pass


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def float64_mode():
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    """Dense array with an optional gradient accumulator.

    ``grad`` has the same shape as ``data`` and is only written by
    :func:`backward`, which always accumulates into it.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _state["dtype"]
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} tensors are not supported (max 4)")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self._requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Named trainable tensor.

    A frozen parameter (``trainable = False``) is treated as a constant by
    :func:`backward`, so its gradient stays zero.
    """

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.trainable = trainable

    @property
    def requires_grad(self) -> bool:
        return self.trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    out._requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        s = b

        def bw_s(g):
            return (g * s,)

        return _result(a.data * np.asarray(s, dtype=a.dtype), (a,), bw_s, "scale")
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), bw, "mul")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), bw, "reshape")


def take(x: Tensor, idx) -> Tensor:
    """Index along the leading axis (or any numpy basic/advanced index)."""
    out = np.ascontiguousarray(x.data[idx])

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (x,), bw, "take")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, xs, bw, "concat")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def bw(g):
        return (g * mask,)

    return _result(out, (x,), bw, "relu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# convolution family


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    n, c = xp.shape[:2]
    # (N, C, Ho, Wo, kh, kw) -> (N, C*kh*kw, Ho*Wo)
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``x`` is [C_in, H, W] or [N, C_in, H, W]; ``w`` is [C_out, C_in, kH, kW].
    """
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d expects rank 3 or 4 input, got shape {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be rank 4, got shape {w.shape}")
    xd = x.data[None] if unbatched else x.data
    n, c, h, wd = xd.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input C_in={c}, weight C_in={ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel dims must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride} / pad={pad}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"padded input {h + 2 * pad}x{wd + 2 * pad} smaller than kernel {kh}x{kw}")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({co},)")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    w2 = w.data.reshape(co, ci * kh * kw)

    if kh == 1 and kw == 1 and pad == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = xs.reshape(n, c, ho * wo)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, co, ho, wo)
    if unbatched:
        out = out[0]

    def bw(g):
        g3 = (g[None] if unbatched else g).reshape(n, co, ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)
            if kh == 1 and kw == 1 and pad == 0:
                gx = np.zeros_like(xd)
                gx[:, :, ::stride, ::stride] = gcols.reshape(n, c, ho, wo)
            else:
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
                gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
            if unbatched:
                gx = gx[0]
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bw, "conv2d")


def _block_sum(a: np.ndarray) -> np.ndarray:
    return a[..., ::2, ::2] + a[..., 1::2, ::2] + a[..., ::2, 1::2] + a[..., 1::2, 1::2]


def _replicate(a: np.ndarray) -> np.ndarray:
    out = np.empty(a.shape[:-2] + (2 * a.shape[-2], 2 * a.shape[-1]), dtype=a.dtype)
    out[..., ::2, ::2] = a
    out[..., 1::2, ::2] = a
    out[..., ::2, 1::2] = a
    out[..., 1::2, 1::2] = a
    return out


def _channel_sum(a: np.ndarray) -> np.ndarray:
    """Sum of [N, C, H, W] over N, H, W."""
    return np.einsum("nchw->c", a)


def avg_pool2x2(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2 needs even spatial dims, got {h}x{w}")
    out = _block_sum(x.data) * np.asarray(0.25, dtype=x.dtype)

    def bw(g):
        return (_replicate(g * np.asarray(0.25, dtype=g.dtype)),)

    return _result(out, (x,), bw, "avg_pool2x2")


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = _replicate(x.data)

    def bw(g):
        return (_block_sum(g),)

    return _result(out, (x,), bw, "upsample_nearest2x")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]"""
    return mean(x, axis=(2, 3))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, H, W) of an [N, C, H, W] input.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [N, C, H, W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine shape mismatch for {c} channels")
    xd = x.data
    if training:
        m = xd.size // c
        mu = _channel_sum(xd) / m
        centered = xd - mu[None, :, None, None]
        var = _channel_sum(centered * centered) / m
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        ggamma = _channel_sum(g * xhat) if gamma.requires_grad else None
        gbeta = _channel_sum(g) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                m = xd.size // c
                s1 = _channel_sum(gxhat)[None, :, None, None]
                s2 = _channel_sum(gxhat * xhat)[None, :, None, None]
                gx = (inv / m)[None, :, None, None] * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return _result(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "batch_norm")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w.T + b`` for x of shape [N, D_in] (or [D_in])."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear dim mismatch: x has {x.shape[-1]} features, w expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear bias shape {b.shape} != ({w.shape[0]},)")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ w.data if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.outer(g, x.data) if x.ndim == 1 else g.T @ x.data
        gb = None
        if b is not None and b.requires_grad:
            gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bw, "linear")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],) or logits.shape[0] < 1:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.tolist()}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), labels]
    out = np.asarray(nll.mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _result(out, (logits,), bw, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    h: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    Returns max |analytic - numeric| / max(1, |analytic| + |numeric|) over the
    checked elements. ``max_elements`` caps the number of elements probed per
    input (chosen with ``seed``); ``None`` probes every element.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 tensors")
        t.zero_grad()
    loss = fn(*inputs)
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*inputs).data)
            flat[i] = orig - h
            fm = float(fn(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - num) / max(1.0, abs(a) + abs(num))
            worst = max(worst, err)
    return worst


def kink_free_uniform(rng: np.random.Generator, shape, margin: float = 1e-3) -> np.ndarray:
    """Uniform(-1, 1) draws with |x| >= margin, as float64."""
    x = rng.uniform(-1.0, 1.0, size=shape)
    bad = np.abs(x) < margin
    while bad.any():
        x[bad] = rng.uniform(-1.0, 1.0, size=int(bad.sum()))
        bad = np.abs(x) < margin
    return x
