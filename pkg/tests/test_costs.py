"""Analytic cost model: closed-form counts cross-checked against the live
parameter registry, hand-derived examples, and exact pixel-count scaling."""

import numpy as np
import pytest

from rsphead.costs import CostBreakdown, count_flops, count_params, _rse_site_params
from rsphead.pyramid import FusionSite, HeadConfig, RseConfig, SegmentationModel

TINY = dict(trunk_channels=8, backbone_widths=(4, 6, 6, 8), q_blocks=1)


# -- parameters ----------------------------------------------------------------------


def test_rse_site_param_formula_hand_example():
    # c=8, d=2, cv=8: query+key 2*(4*8+4), value 8*8+8, position 8+1.
    assert _rse_site_params(8, 2, 8) == 72 + 72 + 9 == 153


def test_lateral_conv_params_hand_example():
    # Four 1x1 convs onto an 8-wide trunk: (8*w + 8) each for w in (4,6,6,8).
    counts = count_params(HeadConfig.baseline(4, **TINY))
    assert counts["laterals"] == (8 * 4 + 8) + (8 * 6 + 8) + (8 * 6 + 8) + (8 * 8 + 8)


def test_param_counts_match_live_registry():
    prefixes = {
        "backbone": ("backbone.",),
        "laterals": ("lateral",),
        "p6_p7": ("p6.", "p7."),
        "q_transforms": ("q",),
        "rse_sites": ("site",),
        "classifier": ("classifier.",),
    }
    for kind in ("baseline", "rsp2", "rsp4"):
        cfg = getattr(HeadConfig, kind)(4, rse=RseConfig(k=3), **TINY)
        counts = count_params(cfg)
        model = SegmentationModel(cfg, seed=0)
        for component, pres in prefixes.items():
            live = sum(
                t.data.size
                for name, t in model.parameters().items()
                if any(name.startswith(p) for p in pres)
            )
            assert counts[component] == live, f"{kind}:{component}"
        assert counts.model_total == sum(t.data.size for t in model.parameters().values())
        assert counts.head_total == counts.model_total - counts["backbone"]


def test_param_ordering_across_heads():
    base = count_params(HeadConfig.baseline(19)).head_total
    r2 = count_params(HeadConfig.rsp2(19)).head_total
    r4 = count_params(HeadConfig.rsp4(19)).head_total
    assert base < r2 < r4


# -- FLOPs ---------------------------------------------------------------------------


def test_rse_flops_hand_example():
    # One relational site at level 3 of a 64x64 input: 8x8 = 64 query pixels,
    # each costing 2*8*4 + 8*8 + 9*4 + 9*8 + 9*8 + 3*9 = 335 ops.
    sites = (
        FusionSite(5, 4, "sum"),
        FusionSite(4, 3, "rsp", RseConfig(k=3, d=2)),
        FusionSite(3, 2, "sum"),
    )
    cfg = HeadConfig(num_classes=4, sites=sites, **TINY)
    assert count_flops(cfg, 64, 64)["rse_sites"] == 64 * 335


def test_flops_scale_exactly_with_pixel_count():
    # Exact x4 needs every level's extents to halve evenly, i.e. input
    # divisible by 2**top_level: 32 for level-5 heads, 128 for rsp4.
    cases = [("baseline", 64, 96), ("rsp2", 64, 96), ("rsp4", 128, 256)]
    for kind, h, w in cases:
        cfg = getattr(HeadConfig, kind)(7, rse=RseConfig(k=3), **TINY)
        small = count_flops(cfg, h, w)
        big = count_flops(cfg, 2 * h, 2 * w)
        for component, value in small.items.items():
            assert big[component] == 4 * value, f"{kind}:{component}"


def test_flops_deep_levels_round_up_below_divisibility():
    # At 64x96 the rsp4 pyramid floors levels 6 and 7 at 1 pixel, so the
    # deep components grow by less than x4 when extents double.
    cfg = HeadConfig.rsp4(7, rse=RseConfig(k=3), **TINY)
    small = count_flops(cfg, 64, 96)
    big = count_flops(cfg, 128, 192)
    assert big["backbone"] == 4 * small["backbone"]
    assert big["p6_p7"] < 4 * small["p6_p7"]


def test_flops_reject_unaligned_extents():
    with pytest.raises(ValueError):
        count_flops(HeadConfig.baseline(4, **TINY), 60, 64)


def test_relational_head_costs_more():
    base = count_flops(HeadConfig.baseline(19), 512, 1024)
    r2 = count_flops(HeadConfig.rsp2(19), 512, 1024)
    assert r2.head_total > base.head_total
    assert r2["rse_sites"] > 0 and base["rse_sites"] == 0
    # Non-relational components are identical between the two heads.
    for component in ("backbone", "laterals", "q_transforms", "classifier", "output"):
        assert r2[component] == base[component]


def test_flop_increment_in_reported_band():
    # Full-scale shape: 512x1024 input, 128-wide trunk, k=7, d=2.
    base = count_flops(HeadConfig.baseline(19), 512, 1024).head_total
    r2 = count_flops(HeadConfig.rsp2(19), 512, 1024).head_total
    increment = (r2 - base) / base
    assert 0.01 <= increment <= 0.06


def test_breakdown_component_order_is_stable():
    p = count_params(HeadConfig.rsp4(4, rse=RseConfig(k=3), **TINY))
    f = count_flops(HeadConfig.rsp4(4, rse=RseConfig(k=3), **TINY), 64, 64)
    assert list(p.items) == list(f.items)
    assert list(p.items)[0] == "backbone"
