"""Window relation operator between a feature map and an aligned context map.

Each pixel of the input map ``x`` emits a query; the operator scores that
query against keys drawn from a ``k x k`` dilated window of a context map
``z`` at the same resolution (in this package ``z`` is an upsampled
higher-level feature map), adds a learned relative-position score per window
slot, normalizes the scores with a softmax, and returns the weighted sum of
value vectors from the same window.

Keys and values are produced by 1x1 transforms of ``z`` *before* window
extraction, so out-of-bounds window slots contribute zero key and value
vectors and their scores reduce to the positional term alone.  Queries and
keys are reduced to ``C/d`` channels; values keep ``cv`` channels
(default ``C`` so the result can be added residually onto ``x``).
"""

from __future__ import annotations

import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from rsphead.params import conv_param, matrix_param, zeros_param
from rsphead.tensor import (
    ShapeError,
    Tensor,
    add,
    conv2d,
    matmul,
    mul,
    reduce_sum,
    reshape,
    softmax,
    unfold_windows,
)

__all__ = [
    "PositionMap",
    "RseParams",
    "relative_position_map",
    "extract_window",
    "relation_logits",
    "rse_forward",
    "rse_forward_reference",
    "attention_window",
]


@dataclass(frozen=True)
class PositionMap:
    """Relative-position features for every slot of a k x k dilated window.

    ``p[a, b, :C/2]`` holds the normalized row offset of slot ``(a, b)`` and
    ``p[a, b, C/2:]`` the normalized column offset, each replicated across
    half the channels.
    """

    k: int
    dilation: int
    channels: int
    p: np.ndarray


def relative_position_map(k: int, dilation: int, channels: int) -> PositionMap:
    """Build the position features for a window.

    Raw offsets run over ``{-(k//2), ..., k//2} * dilation`` and are divided
    by ``(k//2) * dilation`` so the extremes land on -1 and 1.  A 1x1 window
    has no offsets and gets all zeros.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window size must be odd and positive, got {k}")
    if dilation < 1:
        raise ValueError(f"dilation must be >=1, got {dilation}")
    if channels < 2 or channels % 2:
        raise ValueError(f"position channels must be even and >=2, got {channels}")
    half = k // 2
    if half == 0:
        norm = np.zeros(1)
    else:
        norm = (np.arange(k) - half) * dilation / float(half * dilation)
    p = np.zeros((k, k, channels))
    p[:, :, : channels // 2] = norm[:, None, None]
    p[:, :, channels // 2 :] = norm[None, :, None]
    return PositionMap(k=k, dilation=dilation, channels=channels, p=p)


@dataclass
class RseParams:
    """Weights and hyperparameters of one relation operator instance.

    ``wq``/``wk`` map C -> C/d with 1x1 kernels, ``wv`` maps C -> cv, and
    ``wp``/``bp`` score the position features down to one logit per window
    slot.  ``normalize`` applies the softmax over window scores (on by
    default); ``scale_logits`` optionally multiplies scores by
    ``1/sqrt(C/d)`` before normalization.
    """

    c: int
    d: int
    k: int
    dilation: int
    cv: int
    normalize: bool
    scale_logits: bool
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wp: Tensor
    bp: Tensor

    @classmethod
    def create(cls, c: int, d: int = 2, k: int = 7, dilation: int = 1,
               cv: int | None = None, normalize: bool = True,
               scale_logits: bool = False, seed: int = 0,
               name: str = "rse") -> "RseParams":
        if c < 2 or c % 2:
            raise ValueError(f"channel count must be even and >=2, got {c}")
        if d < 1 or c % d:
            raise ValueError(f"reduction d must divide the {c} channels, got {d}")
        if k < 1 or k % 2 == 0:
            raise ValueError(f"window size must be odd and positive, got {k}")
        if dilation < 1:
            raise ValueError(f"dilation must be >=1, got {dilation}")
        cv = c if cv is None else cv
        if cv < 1:
            raise ValueError(f"value channels must be >=1, got {cv}")
        cd = c // d
        return cls(
            c=c, d=d, k=k, dilation=dilation, cv=cv,
            normalize=normalize, scale_logits=scale_logits,
            wq=conv_param(f"{name}.wq", seed, cd, c),
            bq=zeros_param((cd,)),
            wk=conv_param(f"{name}.wk", seed, cd, c),
            bk=zeros_param((cd,)),
            wv=conv_param(f"{name}.wv", seed, cv, c),
            bv=zeros_param((cv,)),
            wp=matrix_param(f"{name}.wp", seed, c, 1),
            bp=zeros_param((1, 1)),
        )

    def tensors(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(
            [("wq", self.wq), ("bq", self.bq), ("wk", self.wk), ("bk", self.bk),
             ("wv", self.wv), ("bv", self.bv), ("wp", self.wp), ("bp", self.bp)]
        )


def _validate_pair(x: Tensor, z: Tensor, params: RseParams) -> None:
    if x.ndim != 4 or z.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W] maps, got {x.shape} and {z.shape}")
    if x.shape != z.shape:
        raise ShapeError(f"input map {x.shape} and context map {z.shape} must match")
    if x.shape[1] != params.c:
        raise ShapeError(f"maps have {x.shape[1]} channels but operator expects {params.c}")
    extent = (params.k - 1) * params.dilation + 1
    if extent > min(x.shape[2], x.shape[3]):
        warnings.warn(
            f"window extent {extent} exceeds feature map {x.shape[2]}x{x.shape[3]}; "
            "most slots will be out of bounds",
            RuntimeWarning,
            stacklevel=3,
        )


def rse_forward(x: Tensor, z: Tensor, params: RseParams) -> Tensor:
    """Relate every pixel of ``x`` to its window in ``z``; returns [B,cv,H,W]."""
    _validate_pair(x, z, params)
    bsz, c, h, w = x.shape
    k, dil = params.k, params.dilation
    cd = c // params.d
    kk = k * k

    q = conv2d(x, params.wq, params.bq)
    keys = unfold_windows(conv2d(z, params.wk, params.bk), k, dil)
    vals = unfold_windows(conv2d(z, params.wv, params.bv), k, dil)

    q_b = reshape(q, (bsz, 1, cd, h, w))
    logits = reduce_sum(mul(q_b, keys), axis=2, keepdims=True)  # [B,kk,1,H,W]

    pos = relative_position_map(k, dil, c)
    pos_flat = Tensor(pos.p.reshape(kk, c))
    pos_logits = add(matmul(pos_flat, params.wp), params.bp)  # [kk,1]
    logits = add(logits, reshape(pos_logits, (1, kk, 1, 1, 1)))

    if params.scale_logits:
        logits = mul(logits, 1.0 / math.sqrt(cd))
    weights = softmax(logits, axis=1) if params.normalize else logits
    return reduce_sum(mul(weights, vals), axis=1)


def extract_window(z: Tensor, pixel: tuple, k: int, dilation: int = 1, batch: int = 0) -> Tensor:
    """Gather the k x k dilated window of ``z`` centered at ``pixel``.

    Returns a [k, k, C] tensor; window slots falling outside the map are
    zero.  ``pixel`` itself must be inside the map.
    """
    if z.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W], got {z.shape}")
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window size must be odd and positive, got {k}")
    if dilation < 1:
        raise ValueError(f"dilation must be >=1, got {dilation}")
    _, c, h, w = z.shape
    r, cc = pixel
    if not (0 <= batch < z.shape[0]):
        raise IndexError(f"batch {batch} out of range for {z.shape[0]} maps")
    if not (0 <= r < h and 0 <= cc < w):
        raise IndexError(f"pixel {pixel} out of range for {h}x{w} map")
    half = k // 2
    out = np.zeros((k, k, c))
    for a in range(k):
        for b in range(k):
            rr = r + (a - half) * dilation
            ww = cc + (b - half) * dilation
            if 0 <= rr < h and 0 <= ww < w:
                out[a, b] = z.data[batch, :, rr, ww]
    return Tensor(out)


def relation_logits(q_i: Tensor, keys: Tensor, pos: PositionMap, wp: Tensor,
                    bp: Tensor | None = None) -> Tensor:
    """Score one query against a window of keys plus the positional term.

    ``q_i`` is [C/d], ``keys`` is [k, k, C/d]; the result is [k, k, 1] with
    entry ``q_i . keys[a,b] + pos.p[a,b] . wp + bp``.  This is the scalar
    per-slot form used by the reference path and attention inspection; it
    does not participate in differentiation.
    """
    if q_i.ndim != 1:
        raise ShapeError(f"query must be a vector, got {q_i.shape}")
    if keys.ndim != 3 or keys.shape[:2] != (pos.k, pos.k):
        raise ShapeError(f"keys {keys.shape} do not match a {pos.k}x{pos.k} window")
    if keys.shape[2] != q_i.shape[0]:
        raise ShapeError(f"query has {q_i.shape[0]} channels, keys have {keys.shape[2]}")
    if pos.p.shape[2] != wp.data.shape[0]:
        raise ShapeError(f"position features {pos.p.shape} do not match wp {wp.data.shape}")
    content = np.einsum("c,abc->ab", q_i.data, keys.data)
    positional = pos.p @ wp.data.reshape(-1)
    offset = float(bp.data.reshape(-1)[0]) if bp is not None else 0.0
    return Tensor((content + positional + offset)[:, :, None])


def _softmax_flat(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def rse_forward_reference(x: Tensor, z: Tensor, params: RseParams) -> Tensor:
    """Per-pixel transcription of ``rse_forward`` used as a numerical oracle.

    Walks every pixel and window slot with explicit loops and fresh buffers;
    no batching or shared intermediate maps.
    """
    _validate_pair(x, z, params)
    bsz, c, h, w = x.shape
    k, dil = params.k, params.dilation
    half = k // 2
    cd = c // params.d
    cv = params.cv
    wq = params.wq.data.reshape(cd, c)
    wk = params.wk.data.reshape(cd, c)
    wv = params.wv.data.reshape(cv, c)
    bq = params.bq.data
    bk = params.bk.data
    bv = params.bv.data
    wp = params.wp.data.reshape(-1)
    bp = float(params.bp.data.reshape(-1)[0])
    pos = relative_position_map(k, dil, c)

    out = np.zeros((bsz, cv, h, w))
    for b in range(bsz):
        for r in range(h):
            for cc in range(w):
                q_i = wq @ x.data[b, :, r, cc] + bq
                logits = np.zeros((k, k))
                values = np.zeros((k, k, cv))
                for a in range(k):
                    for bb in range(k):
                        rr = r + (a - half) * dil
                        ww = cc + (bb - half) * dil
                        if 0 <= rr < h and 0 <= ww < w:
                            key = wk @ z.data[b, :, rr, ww] + bk
                            values[a, bb] = wv @ z.data[b, :, rr, ww] + bv
                        else:
                            key = np.zeros(cd)
                        logits[a, bb] = q_i @ key + pos.p[a, bb] @ wp + bp
                if params.scale_logits:
                    logits = logits / math.sqrt(cd)
                if params.normalize:
                    weights = _softmax_flat(logits.reshape(-1)).reshape(k, k)
                else:
                    weights = logits
                out[b, :, r, cc] = np.einsum("ab,abv->v", weights, values)
    return Tensor(out)


def attention_window(x: Tensor, z: Tensor, params: RseParams, pixel: tuple,
                     batch: int = 0):
    """Post-normalization window weights for one query pixel.

    Returns ``(weights [k,k], query_map [C/d,H,W], key_map [C/d,H,W])`` as
    numpy arrays, recomputed along the per-pixel reference path.
    """
    _validate_pair(x, z, params)
    _, c, h, w = x.shape
    cd = c // params.d
    wq = params.wq.data.reshape(cd, c)
    wk = params.wk.data.reshape(cd, c)
    q_map = np.einsum("oc,chw->ohw", wq, x.data[batch]) + params.bq.data[:, None, None]
    key_map_raw = np.einsum("oc,chw->ohw", wk, z.data[batch]) + params.bk.data[:, None, None]
    r, cc = pixel
    if not (0 <= r < h and 0 <= cc < w):
        raise IndexError(f"pixel {pixel} out of range for {h}x{w} map")
    key_win = extract_window(Tensor(key_map_raw[None]), pixel, params.k, params.dilation)
    pos = relative_position_map(params.k, params.dilation, c)
    logits = relation_logits(Tensor(q_map[:, r, cc]), key_win, pos, params.wp, params.bp)
    flat = logits.data.reshape(-1)
    if params.scale_logits:
        flat = flat / math.sqrt(cd)
    weights = _softmax_flat(flat) if params.normalize else flat
    return weights.reshape(params.k, params.k), q_map, key_map_raw
