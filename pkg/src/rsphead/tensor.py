"""Dense float tensors with reverse-mode automatic differentiation.

Every operation here builds the forward value eagerly with numpy and, when
any operand participates in differentiation, records a tape node holding the
operand references and a closure that maps the output gradient to operand
gradients.  ``backward`` walks the recorded graph once in reverse topological
order and accumulates gradients additively, so calling it twice without
zeroing doubles every gradient.

Conventions used throughout the package:

* feature maps are laid out ``[batch, channels, height, width]``,
* storage is float64 unless a tensor is explicitly created as float32,
* shapes never contain zero extents,
* elementwise ops broadcast only between equal-rank shapes whose extents
  match or are 1 on either side.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "TapeNode",
    "no_grad",
    "set_debug_checks",
    "elementwise",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "reshape",
    "reduce_sum",
    "softmax",
    "softmax_last",
    "log_softmax",
    "conv2d",
    "unfold_windows",
    "bilinear_resize",
    "bilinear_upsample",
    "backward",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_DEBUG_CHECKS = False
_GRAD_ENABLED = True


def set_debug_checks(enabled: bool) -> None:
    """Toggle screening of every op output for NaN/Inf (slow; used by tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class no_grad:
    """Context manager that suspends tape recording for forward-only work."""

    def __enter__(self) -> "no_grad":
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc) -> None:
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev


class TapeNode:
    """One recorded operation.

    ``grad_fn`` receives the gradient of the loss w.r.t. the op output and
    returns a tuple of gradients aligned with ``inputs`` (``None`` for inputs
    that do not need one).
    """

    __slots__ = ("op", "inputs", "grad_fn")

    def __init__(self, op: str, inputs: tuple, grad_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tensor:
    """A dense float array plus the bookkeeping needed for backprop.

    ``grad`` is allocated (zero-filled) at construction for leaf tensors with
    ``requires_grad=True`` so that parameters untouched by a forward pass
    report zero gradients rather than missing ones.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if any(extent < 1 for extent in arr.shape):
            raise ShapeError(f"zero-size extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node: TapeNode | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)

    @staticmethod
    def ones(shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=np.float64), requires_grad=requires_grad)

    # -- inspection ------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """The raw value, detached from the tape (copy)."""
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0
        elif self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flags})"

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensor division is supported by scalars only")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)


def _const_like(value, ref: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full_like(ref.data, float(value)))


def _record(data: np.ndarray, inputs: tuple, op: str, grad_fn: Callable) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out.requires_grad = needs_grad
    out.node = TapeNode(op, inputs, grad_fn) if needs_grad else None
    return out


# -- broadcasting helpers --------------------------------------------------------


def _broadcast_shape(sa: tuple, sb: tuple, op: str) -> tuple:
    if sa == sb:
        return sa
    if len(sa) != len(sb):
        raise ShapeError(f"{op}: rank mismatch between shapes {sa} and {sb}")
    out = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: cannot broadcast shapes {sa} and {sb}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    axes = tuple(i for i, (go, si) in enumerate(zip(g.shape, shape)) if si == 1 and go != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise ops --------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        if isinstance(b, (int, float)):
            t, s = a, float(b)
        elif isinstance(a, (int, float)):
            t, s = b, float(a)
        else:
            raise TypeError("add expects tensors or a tensor and a scalar")
        return _record(t.data + s, (t,), "add", lambda g: (g,))
    _broadcast_shape(a.shape, b.shape, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), "add", grad_fn)


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    if isinstance(a, (int, float)):
        return add(neg(b), float(a))
    _broadcast_shape(a.shape, b.shape, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), "sub", grad_fn)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        if isinstance(b, (int, float)):
            t, s = a, float(b)
        elif isinstance(a, (int, float)):
            t, s = b, float(a)
        else:
            raise TypeError("mul expects tensors or a tensor and a scalar")
        return _record(t.data * s, (t,), "mul", lambda g: (g * s,))
    _broadcast_shape(a.shape, b.shape, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), "mul", grad_fn)


def neg(t: Tensor) -> Tensor:
    return _record(-t.data, (t,), "neg", lambda g: (-g,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Broadcasting elementwise arithmetic; ``kind`` is add, sub, or mul."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind '{kind}'") from None
    return fn(a, b)


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _record(np.where(mask, t.data, 0.0), (t,), "relu", grad_fn)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} values) to {shape}")
    old = t.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _record(t.data.reshape(shape), (t,), "reshape", grad_fn)


def reduce_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over ``axis`` (int, tuple, or None for all axes)."""
    if axis is None:
        axes = tuple(range(t.ndim))
    elif isinstance(axis, int):
        axes = (axis % t.ndim,)
    else:
        axes = tuple(a % t.ndim for a in axis)
    out = t.data.sum(axis=axes, keepdims=keepdims)
    in_shape = t.shape

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _record(out, (t,), "sum", grad_fn)


# -- matmul ------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``[M,K] @ [K,N] -> [M,N]``."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner-dimension mismatch: {a.shape} @ {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), "matmul", grad_fn)


# -- softmax family -----------------------------------------------------------------


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    ax = axis % t.ndim
    shifted = t.data - t.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)

    def grad_fn(g):
        inner = (g * s).sum(axis=ax, keepdims=True)
        return ((g - inner) * s,)

    return _record(s, (t,), "softmax", grad_fn)


def softmax_last(t: Tensor) -> Tensor:
    """Softmax over the final axis."""
    return softmax(t, axis=-1)


def log_softmax(t: Tensor, axis: int = 1) -> Tensor:
    ax = axis % t.ndim
    shifted = t.data - t.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=ax, keepdims=True),)

    return _record(out, (t,), "log_softmax", grad_fn)


# -- convolution ----------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Lower padded input [B,C,H,W] to columns [B, C*kh*kw, out_h*out_w]."""
    b, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, out_h * out_w)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``[B,Cin,H,W]``, ``w`` is ``[Cout,Cin,kh,kw]``, ``bias`` is
    ``[Cout]`` or None.  Output extent per side is
    ``(extent + 2*pad - k) // stride + 1``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {cout} output channels")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d stride must be >=1 and pad >=0, got {stride}, {pad}")
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (wd + 2 * pad - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}, pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    wm = w.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wm, cols).reshape(bsz, cout, out_h, out_w)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def grad_fn(g):
        gm = g.reshape(bsz, cout, out_h * out_w)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(wm.T, gm)
        gcols = gcols.reshape(bsz, cin, kh, kw, out_h, out_w)
        gxp = np.zeros((bsz, cin, h + 2 * pad, wd + 2 * pad))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if bias is None:
            return gx, gw, None
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record(out, inputs, "conv2d", grad_fn)


def unfold_windows(z: Tensor, k: int, dilation: int = 1) -> Tensor:
    """Gather the k*k dilated neighborhood of every pixel.

    Input ``[B,C,H,W]`` maps to ``[B, k*k, C, H, W]`` where entry ``a*k+b``
    holds the neighbor at row offset ``(a - k//2) * dilation`` and column
    offset ``(b - k//2) * dilation``; out-of-bounds samples are zero.
    """
    if z.ndim != 4:
        raise ShapeError(f"unfold_windows expects [B,C,H,W], got {z.shape}")
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window size must be odd and positive, got {k}")
    if dilation < 1:
        raise ValueError(f"dilation must be >=1, got {dilation}")
    bsz, c, h, w = z.shape
    pad = (k - 1) // 2 * dilation
    extent = (k - 1) * dilation + 1
    zp = np.pad(z.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else z.data
    win = np.lib.stride_tricks.sliding_window_view(zp, (extent, extent), axis=(2, 3))
    win = win[..., ::dilation, ::dilation]  # [B,C,H,W,k,k]
    out = win.transpose(0, 4, 5, 1, 2, 3).reshape(bsz, k * k, c, h, w).copy()

    def grad_fn(g):
        gzp = np.zeros((bsz, c, h + 2 * pad, w + 2 * pad))
        gg = g.reshape(bsz, k, k, c, h, w)
        for a in range(k):
            for b in range(k):
                gzp[:, :, a * dilation : a * dilation + h, b * dilation : b * dilation + w] += gg[:, a, b]
        return (gzp[:, :, pad : pad + h, pad : pad + w] if pad else gzp,)

    return _record(out, (z,), "unfold_windows", grad_fn)


# -- bilinear interpolation --------------------------------------------------------------


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bilinear resampling as a dense [n_out, n_in] tap matrix.

    Source positions follow the half-pixel convention
    ``src = (dst + 0.5) * (n_in / n_out) - 0.5`` with edge clamping; each row
    carries the two interpolation weights (merged when clamping makes both
    taps hit the same sample).
    """
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(src).astype(np.int64)
    frac = src - lo
    lo_c = np.clip(lo, 0, n_in - 1)
    hi_c = np.clip(lo + 1, 0, n_in - 1)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo_c), 1.0 - frac)
    np.add.at(m, (rows, hi_c), frac)
    return m


_RESAMPLE_CACHE: dict = {}


def _resample_matrix_cached(n_in: int, n_out: int) -> np.ndarray:
    key = (n_in, n_out)
    m = _RESAMPLE_CACHE.get(key)
    if m is None:
        m = _resample_matrix(n_in, n_out)
        _RESAMPLE_CACHE[key] = m
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resample ``[B,C,H,W]`` to ``[B,C,out_h,out_w]`` bilinearly.

    Sample centers follow the half-pixel convention
    ``src = (dst + 0.5) * (in / out) - 0.5`` with edge clamping, applied
    separably to rows then columns.
    """
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects [B,C,H,W], got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extents must be positive, got {out_h}x{out_w}")
    bsz, c, h, w = x.shape
    mh = _resample_matrix_cached(h, out_h)
    mw_t = _resample_matrix_cached(w, out_w).T
    out = np.matmul(np.matmul(mh, x.data), mw_t)

    def grad_fn(g):
        return (np.matmul(np.matmul(mh.T, g), mw_t.T),)

    return _record(out, (x,), "bilinear_resize", grad_fn)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample ``[B,C,H,W]`` by an integer ``factor`` (2 or 4)."""
    if factor not in (2, 4):
        raise ValueError(f"upsample factor must be 2 or 4, got {factor}")
    return bilinear_resize(x, x.shape[2] * factor, x.shape[3] * factor)


# -- reverse pass --------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Propagate gradients from a scalar ``loss`` to every reachable leaf.

    Leaf gradients accumulate into ``.grad`` (call ``zero_grad`` between
    steps); intermediate tensors get their most recent flow stored on
    ``.grad`` for inspection.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad and loss.grad is not None:
            loss.grad += np.ones_like(loss.data)
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))

    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = flows.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
            continue
        t.grad = g
        in_grads = t.node.grad_fn(g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            acc = flows.get(id(inp))
            flows[id(inp)] = ig if acc is None else acc + ig


# -- gradient verification ----------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Worst-case relative error between backprop and central differences.

    ``f`` must map ``x`` to a scalar tensor.  For each coordinate the error is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`` and the max
    over coordinates is returned.  ``x`` is restored afterwards.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if not x.requires_grad:
        raise ValueError("finite_diff_check needs x.requires_grad=True")
    saved_data = x.data.copy()
    saved_grad = None if x.grad is None else x.grad.copy()

    x.grad = np.zeros_like(x.data)
    out = f(x)
    if out.data.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar-valued f, got shape {out.shape}")
    backward(out)
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(x).data.reshape(-1)[0])
            flat[i] = orig - eps
            f_minus = float(f(x).data.reshape(-1)[0])
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2.0 * eps)

    x.data[...] = saved_data
    x.grad = saved_grad if saved_grad is not None else np.zeros_like(x.data)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
