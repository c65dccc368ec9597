"""A small reverse-mode differentiation engine over numpy arrays.

Only the primitives the denoising supernet needs are provided: convolution
(plain, strided, dilated, grouped), transposed convolution, fixed-factor
interpolation, ReLU, sigmoid, softmax over logit vectors, weighted mixing,
per-channel scaling, concatenation and the MSE loss.

Every op records a closure on the output tensor; :func:`backward` walks the
graph in reverse topological order and then releases it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "conv2d",
    "transposed_conv2d",
    "interpolate",
    "relu",
    "sigmoid",
    "softmax_vec",
    "mse_loss",
    "add",
    "mix",
    "channel_scale",
    "blend",
    "concat",
    "adjust_channels",
]

_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Array value plus an optional gradient slot.

    Activations are rank-4 ``(batch, channels, height, width)``; architecture
    logits and relaxation scalars are rank-1.  Floating dtype is preserved
    from the input array; Python sequences default to float32.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` slots, so callers clear the
    parameters they optimize between steps.  The recorded graph is released
    afterwards; calling this twice on the same loss raises ``RuntimeError``.
    """
    if loss._consumed:
        raise RuntimeError("backward() called on a graph that was already consumed")
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------------------------
# convolution


def _same_pad(k: int, dilation: int) -> int:
    return dilation * (k - 1) // 2


def _check_conv_args(k: int, stride: int, dilation: int) -> None:
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if stride < 1 or dilation < 1:
        raise ValueError(f"stride and dilation must be >= 1, got {stride}, {dilation}")


class _Grid:
    """Flattened zero-padded layout ``(N * Hp * Wp, C)`` used by the conv kernels.

    With "same" padding, the window of output pixel ``(n, r, c)`` starts at
    flat row ``q = n*Hp*Wp + r*Wp + c`` and tap ``(i, j)`` reads row
    ``q + (i*Wp + j) * dilation``.  Each tap is therefore one contiguous row
    block and the convolution becomes ``k*k`` small matmuls.
    """

    def __init__(self, n: int, h: int, w: int, k: int, dilation: int):
        self.n, self.h, self.w, self.k, self.d = n, h, w, k, dilation
        self.pad = _same_pad(k, dilation)
        self.hp, self.wp = h + 2 * self.pad, w + 2 * self.pad
        self.total = n * self.hp * self.wp
        self.length = self.total - (k - 1) * dilation * (self.wp + 1)

    def offsets(self):
        for i in range(self.k):
            for j in range(self.k):
                yield i, j, (i * self.wp + j) * self.d

    def flatten_input(self, x: np.ndarray) -> np.ndarray:
        p = self.pad
        buf = np.zeros((self.n, self.hp, self.wp, x.shape[1]), dtype=x.dtype)
        buf[:, p : p + self.h, p : p + self.w] = x.transpose(0, 2, 3, 1)
        return buf.reshape(self.total, -1)

    def crop_input(self, flat: np.ndarray) -> np.ndarray:
        p = self.pad
        buf = flat.reshape(self.n, self.hp, self.wp, -1)[:, p : p + self.h, p : p + self.w]
        return np.ascontiguousarray(buf.transpose(0, 3, 1, 2))

    def flatten_output(self, g: np.ndarray, stride: int) -> np.ndarray:
        buf = np.zeros((self.n, self.hp, self.wp, g.shape[1]), dtype=g.dtype)
        buf[:, : self.h : stride, : self.w : stride] = g.transpose(0, 2, 3, 1)
        return buf.reshape(self.total, -1)[: self.length]

    def crop_output(self, flat: np.ndarray, stride: int) -> np.ndarray:
        buf = np.zeros((self.total, flat.shape[1]), dtype=flat.dtype)
        buf[: self.length] = flat
        buf = buf.reshape(self.n, self.hp, self.wp, -1)[:, : self.h : stride, : self.w : stride]
        return np.ascontiguousarray(buf.transpose(0, 3, 1, 2))


def _expand_groups(w: np.ndarray, groups: int) -> np.ndarray:
    """Block-diagonal dense kernel equivalent to a grouped one (BLAS beats per-group loops here)."""
    c_out, cg, k, _ = w.shape
    og = c_out // groups
    dense = np.zeros((c_out, cg * groups, k, k), dtype=w.dtype)
    for g in range(groups):
        dense[g * og : (g + 1) * og, g * cg : (g + 1) * cg] = w[g * og : (g + 1) * og]
    return dense


def _collapse_groups(dense: np.ndarray, groups: int) -> np.ndarray:
    c_out, c_in, k, _ = dense.shape
    og, cg = c_out // groups, c_in // groups
    out = np.empty((c_out, cg, k, k), dtype=dense.dtype)
    for g in range(groups):
        out[g * og : (g + 1) * og] = dense[g * og : (g + 1) * og, g * cg : (g + 1) * cg]
    return out


def _corr_forward(xf: np.ndarray, w: np.ndarray, grid: _Grid) -> np.ndarray:
    L = grid.length
    out = np.zeros((L, w.shape[0]), dtype=xf.dtype)
    taps = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    for i, j, off in grid.offsets():
        out += xf[off : off + L] @ taps[i, j]
    return out


def _corr_input_grad(gf: np.ndarray, w: np.ndarray, grid: _Grid) -> np.ndarray:
    L = grid.length
    gx = np.zeros((grid.total, w.shape[1]), dtype=gf.dtype)
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    for i, j, off in grid.offsets():
        gx[off : off + L] += gf @ taps[i, j]
    return gx


def _corr_weight_grad(gf: np.ndarray, xf: np.ndarray, w_shape, grid: _Grid) -> np.ndarray:
    L = grid.length
    gw = np.zeros(w_shape, dtype=gf.dtype)
    gt = np.ascontiguousarray(gf.T)
    for i, j, off in grid.offsets():
        gw[:, :, i, j] = gt @ xf[off : off + L]
    return gw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero "same" padding.

    ``weight`` has shape ``(C_out, C_in/groups, k, k)`` with odd ``k``; the
    output is ``(N, C_out, ceil(H/stride), ceil(W/stride))``.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    n, c, h, w = x.shape
    c_out, cg, k, k2 = weight.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    _check_conv_args(k, stride, dilation)
    if groups < 1 or c % groups or c_out % groups:
        raise ValueError(f"channels ({c} in, {c_out} out) not divisible by groups={groups}")
    if cg * groups != c:
        raise ValueError(f"input has {c} channels but weight expects {cg * groups}")

    grid = _Grid(n, h, w, k, dilation)
    xf = grid.flatten_input(x.data)
    wd = weight.data if groups == 1 else _expand_groups(weight.data, groups)
    y = grid.crop_output(_corr_forward(xf, wd, grid), stride)
    if bias is not None:
        y += bias.data[None, :, None, None]

    def _bw(g):
        gf = grid.flatten_output(g, stride)
        gx = gw = gb = None
        if x.requires_grad:
            gx = grid.crop_input(_corr_input_grad(gf, wd, grid))
        if weight.requires_grad:
            gw = _corr_weight_grad(gf, xf, wd.shape, grid)
            if groups > 1:
                gw = _collapse_groups(gw, groups)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = [x, weight] + ([bias] if bias is not None else [])
    return _result(y, parents, _bw)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution, the exact adjoint of a same-padded :func:`conv2d`.

    ``weight`` has shape ``(C_in, C_out, k, k)``.  Output is
    ``(N, C_out, stride*H, stride*W)``.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    n, c, h, w = x.shape
    c_in, c_out, k, _ = weight.shape
    _check_conv_args(k, stride, 1)
    if stride not in (1, 2):
        raise ValueError(f"transposed_conv2d supports stride 1 or 2, got {stride}")
    if c != c_in:
        raise ValueError(f"input has {c} channels but weight expects {c_in}")

    # conv2d with weight (c_in, c_out, k, k) maps (stride*H) -> H; this is its adjoint
    grid = _Grid(n, stride * h, stride * w, k, 1)
    wd = weight.data
    xf = grid.flatten_output(x.data, stride)
    y = grid.crop_input(_corr_input_grad(xf, wd, grid))
    if bias is not None:
        y += bias.data[None, :, None, None]

    def _bw(g):
        gx = gw = gb = None
        gf = grid.flatten_input(g)
        if x.requires_grad:
            gx = grid.crop_output(_corr_forward(gf, wd, grid), stride)
        if weight.requires_grad:
            gw = _corr_weight_grad(xf, gf, wd.shape, grid)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = [x, weight] + ([bias] if bias is not None else [])
    return _result(y, parents, _bw)


# ---------------------------------------------------------------------------
# resampling

_INTERP_MODES = ("nearest", "bilinear", "area")


def _interp_matrix(n_in: int, n_out: int, mode: str, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    if mode == "area" and n_out > n_in:
        mode = "nearest"
    if mode == "nearest":
        src = np.minimum(np.floor(np.arange(n_out) * ratio).astype(int), n_in - 1)
        m[np.arange(n_out), src] = 1.0
    elif mode == "bilinear":
        src = np.maximum((np.arange(n_out) + 0.5) * ratio - 0.5, 0.0)
        i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        lam = src - i0
        np.add.at(m, (np.arange(n_out), i0), 1.0 - lam)
        np.add.at(m, (np.arange(n_out), i1), lam)
    else:
        for i in range(n_out):
            lo = int(np.floor(i * ratio))
            hi = int(np.ceil((i + 1) * ratio))
            m[i, lo:hi] = 1.0 / (hi - lo)
    return m.astype(dtype)


def interpolate(x: Tensor, mode: str, scale: float) -> Tensor:
    """Resample by a factor of 2 or 1/2.

    ``bilinear`` follows the align-corners-false convention; ``area`` is a
    2x2 mean when downscaling and falls back to nearest when upscaling.
    """
    if mode not in _INTERP_MODES:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if scale not in (0.5, 2, 2.0):
        raise ValueError(f"scale must be 1/2 or 2, got {scale}")
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if scale == 0.5:
        if h % 2 or w % 2:
            raise ValueError(f"cannot halve odd spatial size {h}x{w}")
        ho, wo = h // 2, w // 2
    else:
        ho, wo = 2 * h, 2 * w
    mh = _interp_matrix(h, ho, mode, x.dtype)
    mw = _interp_matrix(w, wo, mode, x.dtype)
    y = np.matmul(mh, np.matmul(x.data, mw.T))

    def _bw(g):
        return (np.matmul(mh.T, np.matmul(g, mw)),)

    return _result(y, [x], _bw)


# ---------------------------------------------------------------------------
# pointwise and reductions


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _result(x.data * mask, [x], lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _result(s, [x], lambda g: (g * s * (1 - s),))


def softmax_vec(v: Tensor) -> Tensor:
    """Softmax over a non-empty 1-D logit vector."""
    v = _as_tensor(v)
    if v.data.ndim != 1 or v.data.size == 0:
        raise ValueError(f"softmax_vec expects a non-empty vector, got shape {v.shape}")
    e = np.exp(v.data - v.data.max())
    s = e / e.sum()

    def _bw(g):
        return (s * (g - np.dot(g, s)),)

    return _result(s, [v], _bw)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over every element (batch included)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    val = np.asarray(np.mean(diff * diff), dtype=diff.dtype)

    def _bw(g):
        ga = (2.0 / n) * g * diff
        return ga.astype(diff.dtype), (-ga).astype(diff.dtype)

    return _result(val, [a, b], _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, [a, b], lambda g: (g, g))


def mix(tensors: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Weighted sum ``sum_i weights[i] * tensors[i]`` of same-shape tensors."""
    tensors = [_as_tensor(t) for t in tensors]
    weights = _as_tensor(weights)
    if len(tensors) != weights.data.size:
        raise ValueError(f"{len(tensors)} tensors but {weights.data.size} weights")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"mix shape mismatch: {t.shape} vs {shape}")
    wv = weights.data
    y = wv[0] * tensors[0].data
    for wi, t in zip(wv[1:], tensors[1:]):
        y = y + wi * t.data

    def _bw(g):
        gts = [wi * g if t.requires_grad else None for wi, t in zip(wv, tensors)]
        gw = None
        if weights.requires_grad:
            gw = np.array([np.vdot(g, t.data) for t in tensors], dtype=wv.dtype)
        return (*gts, gw)

    return _result(y, [*tensors, weights], _bw)


def channel_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply channel ``c`` of ``x`` by ``scale[c]``."""
    x, scale = _as_tensor(x), _as_tensor(scale)
    if scale.data.shape != (x.shape[1],):
        raise ValueError(f"scale shape {scale.shape} does not match {x.shape[1]} channels")
    s4 = scale.data[None, :, None, None]

    def _bw(g):
        gs = (g * x.data).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        return g * s4, gs

    return _result(x.data * s4, [x, scale], _bw)


def blend(y: Tensor, v: Tensor, delta: Tensor) -> Tensor:
    """Convex combination ``delta * y + (1 - delta) * v`` with scalar ``delta``."""
    y, v, delta = _as_tensor(y), _as_tensor(v), _as_tensor(delta)
    if y.shape != v.shape:
        raise ValueError(f"blend shape mismatch: {y.shape} vs {v.shape}")
    if delta.data.size != 1:
        raise ValueError("delta must hold a single value")
    d = delta.data.reshape(())

    def _bw(g):
        gd = np.asarray(np.vdot(g, y.data - v.data), dtype=delta.dtype).reshape(delta.shape)
        return g * d, g * (1 - d), gd

    return _result(d * y.data + (1 - d) * v.data, [y, v, delta], _bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(y, tensors, _bw)


def adjust_channels(x: Tensor, channels: int) -> Tensor:
    """Keep the first ``channels`` channels, zero-padding when ``x`` has fewer."""
    x = _as_tensor(x)
    c = x.shape[1]
    if c == channels:
        return x
    if c > channels:
        return _result(x.data[:, :channels], [x], lambda g: (np.pad(g, ((0, 0), (0, c - channels), (0, 0), (0, 0))),))
    pad = np.zeros((x.shape[0], channels - c, *x.shape[2:]), dtype=x.dtype)
    return _result(np.concatenate([x.data, pad], axis=1), [x], lambda g: (g[:, :c],))

