"""Analytic parameter and FLOP accounting for head configurations.

Counts are derived from the configuration alone (never by running the
model) so they can be cross-checked against the live parameter registry.

Counting convention, applied uniformly:

* linear ops count multiply-accumulates: a conv contributes
  ``outH * outW * Cout * Cin * kh * kw``, bias additions are not counted;
* bilinear resampling contributes 4 MACs per output element;
* rectifiers count 1 op per element, softmax 3 ops per normalized entry
  (max-subtract, exponentiate, divide);
* the relation operator at a fusion site whose low level has ``HW`` pixels
  contributes
  ``HW*C*(C/d)*2`` (query and key transforms) ``+ HW*C*Cv`` (value
  transform) ``+ HW*k^2*(C/d)`` (content scores) ``+ HW*k^2*C`` (positional
  scores, attributed per query pixel regardless of hoisting)
  ``+ HW*k^2*Cv`` (weighted value sum) ``+ 3*HW*k^2`` (softmax);
* the residual/sum additions of fusion count 1 op per element.

Every term is proportional to the pixel count of its level.  Levels halve
extents with ceil rounding (matching the stride-2 convolutions), so doubling
both input extents exactly quadruples every component whenever the input is
divisible by 2**top_level; below that, 1-pixel deep levels round up.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

from rsphead.pyramid import HeadConfig

__all__ = ["CostBreakdown", "count_params", "count_flops"]

_HEAD_COMPONENTS = ("laterals", "p6_p7", "q_transforms", "fusion", "rse_sites", "classifier", "output")


@dataclass(frozen=True)
class CostBreakdown:
    """Per-component counts; the head scope is everything except the backbone."""

    items: "OrderedDict[str, int]"

    @property
    def head_total(self) -> int:
        return sum(v for k, v in self.items.items() if k != "backbone")

    @property
    def model_total(self) -> int:
        return sum(self.items.values())

    def __getitem__(self, key: str) -> int:
        return self.items[key]


def _conv_params(cout: int, cin: int, k: int) -> int:
    return cout * cin * k * k + cout


def _rse_site_params(c: int, d: int, cv: int) -> int:
    query_key = 2 * ((c // d) * c + c // d)
    value = cv * c + cv
    position = c + 1
    return query_key + value + position


def count_params(config: HeadConfig) -> CostBreakdown:
    """Exact parameter counts per component of a head configuration."""
    c = config.trunk_channels
    w0, w1, w2, w3 = config.backbone_widths
    items: "OrderedDict[str, int]" = OrderedDict()
    items["backbone"] = (
        _conv_params(w0, 3, 3) + _conv_params(w0, w0, 3) + _conv_params(w1, w0, 3)
        + _conv_params(w2, w1, 3) + _conv_params(w3, w2, 3)
    )
    items["laterals"] = sum(_conv_params(c, w, 1) for w in config.backbone_widths)
    items["p6_p7"] = 2 * _conv_params(c, c, 3) if config.use_p67 else 0
    items["q_transforms"] = len(config.levels) * config.q_blocks * _conv_params(c, c, 3)
    items["fusion"] = 0
    items["rse_sites"] = sum(
        _rse_site_params(c, site.rse.d, site.rse.cv if site.rse.cv is not None else c)
        for site in config.sites if site.mode == "rsp"
    )
    items["classifier"] = _conv_params(config.num_classes, c, 1)
    items["output"] = 0
    return CostBreakdown(items=items)


def _level_extents(h: int, w: int) -> dict:
    """Per-level map extents for an input divisible by 32 (ceil halving)."""
    extents = {}
    eh, ew = h, w
    for lvl in range(1, 8):
        eh = (eh + 1) // 2
        ew = (ew + 1) // 2
        extents[lvl] = (eh, ew)
    return extents


def count_flops(config: HeadConfig, h: int, w: int) -> CostBreakdown:
    """Analytic op counts per component for one [3,h,w] image."""
    if h % 32 or w % 32:
        raise ValueError(f"input extents must be divisible by 32, got {h}x{w}")
    c = config.trunk_channels
    widths = config.backbone_widths
    ext = _level_extents(h, w)
    px = {lvl: eh * ew for lvl, (eh, ew) in ext.items()}

    items: "OrderedDict[str, int]" = OrderedDict()

    backbone = px[1] * widths[0] * 3 * 9 + px[2] * widths[0] * widths[0] * 9
    backbone += px[1] * widths[0] + px[2] * widths[0]  # stem rectifiers
    prev = widths[0]
    for lvl, width in zip((3, 4, 5), widths[1:]):
        backbone += px[lvl] * width * prev * 9 + px[lvl] * width
        prev = width
    items["backbone"] = backbone

    items["laterals"] = sum(px[lvl] * c * w_in for lvl, w_in in zip((2, 3, 4, 5), widths))

    p67 = 0
    if config.use_p67:
        p67 = px[6] * c * c * 9 + px[7] * c * c * 9
    items["p6_p7"] = p67

    q = 0
    for lvl in config.levels:
        q += config.q_blocks * (px[lvl] * c * c * 9 + px[lvl] * c)
    items["q_transforms"] = q

    fusion = 0
    rse_sites = 0
    for site in config.sites:
        low_px = px[site.low]
        fusion += low_px * c * 4  # bilinear upsample of the higher map
        fusion += low_px * c      # sum or residual addition
        if site.mode == "rsp":
            d = site.rse.d
            cv = site.rse.cv if site.rse.cv is not None else c
            kk = site.rse.k ** 2
            rse_sites += low_px * (
                c * (c // d) * 2      # query and key transforms
                + c * cv              # value transform
                + kk * (c // d)       # content scores
                + kk * c              # positional scores
                + kk * cv             # weighted value sum
                + 3 * kk              # softmax over window slots
            )
    items["fusion"] = fusion
    items["rse_sites"] = rse_sites

    k_cls = config.num_classes
    items["classifier"] = px[2] * k_cls * c
    items["output"] = h * w * k_cls * 4 + h * w * k_cls * 3  # 4x upsample + softmax
    return CostBreakdown(items=items)
