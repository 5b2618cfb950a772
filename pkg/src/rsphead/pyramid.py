"""Feature pyramid construction and multi-scale segmentation heads.

A small strided backbone produces features at strides 4/8/16/32; 1x1 lateral
convs bring them to a common trunk width (levels P2..P5), and two extra
stride-2 convs optionally extend the pyramid to P6/P7.  Each level is
refined by a few conv+rectifier blocks into Q maps, which a top-down chain
of pairwise fusions collapses back to the stride-4 level.  Every fusion site
either sums the upsampled higher level onto the lower one or passes it
through the window relation operator and adds the result residually.  The
lowest site, fusing level 3 into level 2, is always a plain sum.  A 1x1
classifier plus 4x bilinear upsampling maps the fused stride-4 features to
per-pixel class scores at input resolution.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from rsphead.params import conv_param, zeros_param
from rsphead.rse import RseParams, rse_forward
from rsphead.tensor import (
    ShapeError,
    Tensor,
    add,
    bilinear_resize,
    bilinear_upsample,
    conv2d,
    relu,
)

__all__ = [
    "RseConfig",
    "FusionSite",
    "HeadConfig",
    "FeaturePyramid",
    "ParamContainer",
    "SegmentationModel",
    "PixelClassifier",
    "fuse",
    "predict",
]


@dataclass(frozen=True)
class RseConfig:
    """Hyperparameters of one relation-operator fusion site."""

    k: int = 7
    dilation: int = 1
    d: int = 2
    cv: int | None = None
    normalize: bool = True
    scale_logits: bool = False


@dataclass(frozen=True)
class FusionSite:
    """One top-down fusion step: ``high`` is folded into ``low``."""

    high: int
    low: int
    mode: str = "sum"  # "sum" or "rsp"
    rse: RseConfig | None = None


def _default_sites(top: int, rsp_lows: tuple, rse: RseConfig) -> tuple:
    sites = []
    for high in range(top, 2, -1):
        low = high - 1
        if low in rsp_lows:
            sites.append(FusionSite(high=high, low=low, mode="rsp", rse=rse))
        else:
            sites.append(FusionSite(high=high, low=low, mode="sum"))
    return tuple(sites)


@dataclass(frozen=True)
class HeadConfig:
    """Full head topology: trunk width, pyramid depth, and fusion modes."""

    num_classes: int
    sites: tuple
    trunk_channels: int = 128
    backbone_widths: tuple = (32, 64, 96, 128)
    q_blocks: int = 2

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.trunk_channels < 2 or self.trunk_channels % 2:
            raise ValueError(f"trunk width must be even and >=2, got {self.trunk_channels}")
        if len(self.backbone_widths) != 4 or any(w < 1 for w in self.backbone_widths):
            raise ValueError(f"backbone needs 4 positive stage widths, got {self.backbone_widths}")
        if not 0 <= self.q_blocks <= 3:
            raise ValueError(f"q_blocks must be in 0..3, got {self.q_blocks}")
        if not self.sites:
            raise ValueError("head needs at least one fusion site")
        if self.top_level not in (5, 7):
            raise ValueError(f"pyramid must top out at level 5 or 7, got {self.top_level}")
        prev_low = None
        for site in self.sites:
            if site.high != site.low + 1:
                raise ValueError(f"fusion site ({site.high},{site.low}) must join adjacent levels")
            if prev_low is not None and site.high != prev_low:
                raise ValueError(f"fusion sites must chain contiguously, broke at ({site.high},{site.low})")
            if site.mode not in ("sum", "rsp"):
                raise ValueError(f"unknown fusion mode '{site.mode}'")
            if site.mode == "rsp":
                if site.rse is None:
                    raise ValueError(f"site ({site.high},{site.low}) is relational but has no operator config")
                cv = site.rse.cv
                if cv is not None and cv != self.trunk_channels:
                    raise ValueError(
                        f"residual fusion needs value channels == trunk width {self.trunk_channels}, got {cv}"
                    )
            prev_low = site.low
        last = self.sites[-1]
        if (last.high, last.low) != (3, 2):
            raise ValueError(f"fusion chain must end at (3,2), got ({last.high},{last.low})")
        if last.mode != "sum":
            raise ValueError("the (3,2) fusion site is always a plain sum")

    @property
    def top_level(self) -> int:
        return self.sites[0].high

    @property
    def use_p67(self) -> bool:
        return self.top_level == 7

    @property
    def levels(self) -> tuple:
        return tuple(range(2, self.top_level + 1))

    # -- presets ----------------------------------------------------------------

    @classmethod
    def baseline(cls, num_classes: int, **kw) -> "HeadConfig":
        """Sum-only head over levels 2..5."""
        rse = kw.pop("rse", RseConfig())
        return cls(num_classes=num_classes, sites=_default_sites(5, (), rse), **kw)

    @classmethod
    def rsp2(cls, num_classes: int, rse: RseConfig = RseConfig(), **kw) -> "HeadConfig":
        """Two relational sites, (5,4) and (4,3), over levels 2..5."""
        return cls(num_classes=num_classes, sites=_default_sites(5, (4, 3), rse), **kw)

    @classmethod
    def rsp4(cls, num_classes: int, rse: RseConfig = RseConfig(), **kw) -> "HeadConfig":
        """Four relational sites, (7,6) down to (4,3), over levels 2..7."""
        return cls(num_classes=num_classes, sites=_default_sites(7, (6, 5, 4, 3), rse), **kw)


@dataclass
class FeaturePyramid:
    """Refined per-level maps, keyed by level; stride of level l is 2**l."""

    levels: "OrderedDict[int, Tensor]"
    strides: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.strides:
            self.strides = {lvl: 2 ** lvl for lvl in self.levels}


class ParamContainer:
    """Flat, ordered name->tensor registry shared by all models here."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def _register(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        self._params[name] = t
        return t

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self._params

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data.copy()) for n, t in self._params.items())

    def load_state(self, state) -> None:
        missing = [n for n in self._params if n not in state]
        extra = [n for n in state if n not in self._params]
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for n, t in self._params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter '{n}' has shape {t.data.shape}, state has {arr.shape}")
            t.data[...] = arr


def fuse(high: Tensor, low: Tensor, mode: str, rse_params: RseParams | None = None,
         trace_entry: dict | None = None) -> Tensor:
    """Fold a higher pyramid level into the one below it.

    ``high`` must be exactly one level above ``low`` (each extent of ``low``
    halves, rounding up, to the matching extent of ``high``).  ``sum`` adds
    the bilinearly upsampled ``high`` onto ``low``; ``rsp`` relates ``low``
    to the upsampled map through the window operator and adds the result
    residually, leaving ``low`` unchanged wherever the operator output is
    zero.
    """
    if high.ndim != 4 or low.ndim != 4:
        raise ShapeError(f"fuse expects [B,C,H,W] maps, got {high.shape} and {low.shape}")
    if high.shape[:2] != low.shape[:2]:
        raise ShapeError(f"fuse batch/channel mismatch: {high.shape} vs {low.shape}")
    th, tw = low.shape[2], low.shape[3]
    if (math.ceil(th / 2), math.ceil(tw / 2)) != (high.shape[2], high.shape[3]):
        raise ShapeError(f"high map {high.shape} is not one pyramid level above low map {low.shape}")
    up = bilinear_resize(high, th, tw)
    if mode == "sum":
        out = add(low, up)
    elif mode == "rsp":
        if rse_params is None:
            raise ValueError("relational fusion needs operator parameters")
        out = add(low, rse_forward(low, up, rse_params))
    else:
        raise ValueError(f"unknown fusion mode '{mode}'")
    if trace_entry is not None:
        trace_entry.update(low=low, up=up, fused=out, rse=rse_params, mode=mode)
    return out


class SegmentationModel(ParamContainer):
    """Backbone + pyramid + fusion head, owning all parameters by name."""

    def __init__(self, config: HeadConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        c = config.trunk_channels
        w0, w1, w2, w3 = config.backbone_widths

        def conv_pair(name, cout, cin, ksize, rectified):
            w = self._register(f"{name}.w", conv_param(f"{name}.w", seed, cout, cin, ksize, ksize,
                                                       rectified=rectified))
            b = self._register(f"{name}.b", zeros_param((cout,)))
            return w, b

        self._stem1 = conv_pair("backbone.stem1", w0, 3, 3, True)
        self._stem2 = conv_pair("backbone.stem2", w0, w0, 3, True)
        self._stage8 = conv_pair("backbone.stage8", w1, w0, 3, True)
        self._stage16 = conv_pair("backbone.stage16", w2, w1, 3, True)
        self._stage32 = conv_pair("backbone.stage32", w3, w2, 3, True)

        self._laterals = {lvl: conv_pair(f"lateral{lvl}", c, w, 1, False)
                          for lvl, w in zip((2, 3, 4, 5), config.backbone_widths)}
        if config.use_p67:
            self._p6 = conv_pair("p6", c, c, 3, False)
            self._p7 = conv_pair("p7", c, c, 3, False)

        self._q = {lvl: [conv_pair(f"q{lvl}.{i}", c, c, 3, True) for i in range(config.q_blocks)]
                   for lvl in config.levels}

        self._rse: dict[str, RseParams] = {}
        for site in config.sites:
            if site.mode != "rsp":
                continue
            code = f"{site.high}{site.low}"
            rp = RseParams.create(
                c, d=site.rse.d, k=site.rse.k, dilation=site.rse.dilation,
                cv=site.rse.cv, normalize=site.rse.normalize,
                scale_logits=site.rse.scale_logits, seed=seed, name=f"site{code}",
            )
            for suffix, t in rp.tensors().items():
                self._register(f"site{code}.{suffix}", t)
            self._rse[code] = rp

        self._classifier = conv_pair("classifier", config.num_classes, c, 1, False)

    # -- forward pieces ----------------------------------------------------------

    def backbone_forward(self, images: Tensor) -> list:
        """Stage features at strides 4, 8, 16, 32."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected [B,3,H,W] images, got {images.shape}")
        if images.shape[2] % 32 or images.shape[3] % 32:
            raise ShapeError(f"input extents must be divisible by 32, got {images.shape}")
        y = relu(conv2d(images, *self._stem1, stride=2, pad=1))
        c4 = relu(conv2d(y, *self._stem2, stride=2, pad=1))
        c8 = relu(conv2d(c4, *self._stage8, stride=2, pad=1))
        c16 = relu(conv2d(c8, *self._stage16, stride=2, pad=1))
        c32 = relu(conv2d(c16, *self._stage32, stride=2, pad=1))
        return [c4, c8, c16, c32]

    def build_pyramid(self, stages: list) -> FeaturePyramid:
        """Lateral 1x1 convs to the trunk width, optional P6/P7, then Q blocks."""
        p = OrderedDict()
        for lvl, stage in zip((2, 3, 4, 5), stages):
            p[lvl] = conv2d(stage, *self._laterals[lvl])
        if self.config.use_p67:
            p[6] = conv2d(p[5], *self._p6, stride=2, pad=1)
            p[7] = conv2d(p[6], *self._p7, stride=2, pad=1)
        q = OrderedDict()
        for lvl in self.config.levels:
            y = p[lvl]
            for wb in self._q[lvl]:
                y = relu(conv2d(y, *wb, pad=1))
            q[lvl] = y
        return FeaturePyramid(levels=q)

    def forward(self, images: Tensor, trace: dict | None = None) -> Tensor:
        """Class scores [B, num_classes, H, W] for images [B,3,H,W]."""
        pyramid = self.build_pyramid(self.backbone_forward(images))
        if trace is not None:
            trace["pyramid"] = pyramid
            trace["sites"] = {}
        x = pyramid.levels[self.config.top_level]
        for site in self.config.sites:
            code = f"{site.high}{site.low}"
            entry = None
            if trace is not None:
                entry = trace["sites"].setdefault(code, {})
            x = fuse(x, pyramid.levels[site.low], site.mode, self._rse.get(code), trace_entry=entry)
        scores = conv2d(x, *self._classifier)
        return bilinear_upsample(scores, 4)

    def rse_params(self, code: str) -> RseParams:
        return self._rse[code]


class PixelClassifier(ParamContainer):
    """1x1 convolution on raw pixels; the no-context control model."""

    def __init__(self, num_classes: int, in_channels: int = 3, seed: int = 0):
        super().__init__()
        self.num_classes = num_classes
        self._w = self._register("classifier.w",
                                 conv_param("pixel.classifier.w", seed, num_classes, in_channels))
        self._b = self._register("classifier.b", zeros_param((num_classes,)))

    def forward(self, images: Tensor, trace: dict | None = None) -> Tensor:
        return conv2d(images, self._w, self._b)


def predict(scores) -> np.ndarray:
    """Per-pixel argmax labels [B,H,W]; ties go to the lowest class index."""
    arr = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    if arr.ndim != 4:
        raise ShapeError(f"expected [B,K,H,W] scores, got {arr.shape}")
    return arr.argmax(axis=1)
