"""Network composition: parameter widths, the shape ledger, the forward pass."""

import numpy as np
import pytest

from fusiondet.config import full_config, scaled_config
from fusiondet.network import (
    forward_full,
    format_trace,
    init_network,
    make_codec,
    trace_shapes,
)
from fusiondet.synthetic import SyntheticSceneSpec, generate_synthetic


CFG = scaled_config()


def test_trace_shapes_full_scale():
    trace = trace_shapes(full_config())
    assert trace["points"] == [16384, 4096, 1024, 256, 64, 256, 1024, 4096, 16384]
    assert trace["point_channels"] == [96, 256, 512, 1024]
    assert trace["image_channels"] == [64, 128, 256, 512]
    assert trace["image_extents"] == [[640, 192], [320, 96], [160, 48], [80, 24]]
    assert trace["tokens"] == [120, 120, 120, 120]
    assert trace["fused_map"] == [64, 384, 1280]
    assert trace["final_width"] == 128
    assert trace["cmt_levels"] == [1, 2, 3, 4, 5]


def test_trace_shapes_scaled():
    trace = trace_shapes(CFG)
    assert trace["points"] == [256, 64, 16, 8, 4, 8, 16, 64, 256]
    assert trace["point_channels"] == [16, 24, 32, 48]
    assert trace["image_extents"] == [[64, 32], [32, 16], [16, 8], [8, 4]]
    assert trace["tokens"] == [32, 32, 32, 32]
    assert trace["fused_map"] == [8, 64, 128]


def test_init_network_head_widths():
    rng = np.random.default_rng(0)
    params = init_network(rng, CFG)
    codec = make_codec(CFG)
    final = CFG.fp_channels[-1]
    assert params.rpn_box.weight.shape == (codec.prediction_width, final)
    assert params.point_proj.weight.shape == (CFG.contrast_dim, final)
    assert params.image_proj.weight.shape == (CFG.contrast_dim, CFG.fused_channels)
    assert params.seg.mlp.first.weight.shape[1] == final
    assert sorted(params.cmt) == [1, 2, 3, 4]
    assert params.cmt_final is not None
    # per-level cross attention matches that level's widths
    for level, cp in params.cmt.items():
        d = CFG.level_channels[level - 1]
        assert cp.point_q.weight.shape == (d, d)
        assert cp.image_proj.weight.shape == (d, CFG.it_channels[level - 1])
        assert cp.compress.weight.shape == (d, 4 * d)


def test_init_network_respects_cmt_subset():
    import dataclasses

    cfg = dataclasses.replace(CFG, cmt_levels=[2, 4])
    params = init_network(np.random.default_rng(0), cfg)
    assert sorted(params.cmt) == [2, 4]
    assert params.cmt_final is None


def _forward_fixture():
    frame = generate_synthetic(SyntheticSceneSpec(seed=0), CFG)
    params = init_network(np.random.default_rng(1), CFG)
    return frame, params


def test_forward_full_reproduces_the_ledger():
    frame, params = _forward_fixture()
    result = forward_full(CFG, params, frame.cloud, frame.image, frame.calib)
    assert result.trace == trace_shapes(CFG)
    assert result.final_feats.shape == (CFG.input_points, CFG.fp_channels[-1])
    assert np.all(np.isfinite(result.final_feats))
    assert result.seg_scores.shape == (CFG.input_points,)
    assert np.all((result.seg_scores > 0) & (result.seg_scores < 1))
    assert result.fused.shape == (CFG.fused_channels, CFG.image_height, CFG.image_width)
    assert len(result.levels) == 4
    assert result.seconds > 0


def test_forward_full_is_deterministic_and_uses_fusion():
    frame, params = _forward_fixture()
    a = forward_full(CFG, params, frame.cloud, frame.image, frame.calib)
    b = forward_full(CFG, params, frame.cloud, frame.image, frame.calib)
    assert np.array_equal(a.final_feats, b.final_feats)
    assert np.array_equal(a.seg_scores, b.seg_scores)
    # the image actually reaches the point branch through the fusion blocks
    dark = np.zeros_like(frame.image)
    c = forward_full(CFG, params, frame.cloud, dark, frame.calib)
    assert not np.array_equal(a.final_feats, c.final_feats)


def test_forward_full_level5_changes_final_features():
    frame, params = _forward_fixture()
    result = forward_full(CFG, params, frame.cloud, frame.image, frame.calib)
    assert not np.array_equal(result.full_feats, result.final_feats)
    import dataclasses

    cfg = dataclasses.replace(CFG, cmt_levels=[1, 2, 3, 4])
    p2 = init_network(np.random.default_rng(1), cfg)
    r2 = forward_full(cfg, p2, frame.cloud, frame.image, frame.calib)
    assert np.array_equal(r2.full_feats, r2.final_feats)
    assert r2.trace["cmt_levels"] == [1, 2, 3, 4]


def test_format_trace_is_readable():
    text = format_trace(trace_shapes(CFG))
    lines = text.split("\n")
    assert lines[0].startswith("points      256 -> 64")
    assert "fused map   8x64x128" in text
    assert "fusion at   1 2 3 4 5" in text
