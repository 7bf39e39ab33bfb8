"""Full two-branch model: point encoder and image encoder exchanged
through per-level cross-modal attention, plus the task heads.

Composition order per active level 1-4: point block ell runs, then its
output features are enriched from image map ell before block ell+1
consumes them. Level 5 enriches the decoder's full-resolution features
from the fused full-resolution image map. Heads: per-point foreground
segmentation, a per-point box regressor, a proposal refinement stage,
and projection heads for the contrastive losses.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import PipelineConfig
from .detection import (
    BinCodec,
    RefineHeadParams,
    SegHeadParams,
    init_refine_head,
    init_seg_head,
    seg_head_forward,
)
from .fusion import Calibration, CmtParams, fuse_level, init_cmt
from .imageformer import ImageformerParams, imageformer_forward, init_imageformer
from .numerics import LinearParams, init_linear
from .pointformer import PointformerParams, init_pointformer, pointformer_forward
from .pointops import PointCloud


def make_codec(cfg: PipelineConfig) -> BinCodec:
    return BinCodec(extent=cfg.bin_extent, bins=cfg.bin_count, theta_bins=cfg.theta_bins)


@dataclass
class NetworkParams:
    pt: PointformerParams
    it: ImageformerParams
    cmt: dict  # level (1..4) -> CmtParams, only active levels
    cmt_final: Optional[CmtParams]  # level 5
    seg: SegHeadParams
    rpn_box: LinearParams  # final point feature -> codec prediction vector
    refine: RefineHeadParams
    point_proj: LinearParams  # final point feature -> shared contrast space
    image_proj: LinearParams  # fused map channel vector -> shared contrast space


def init_network(rng: np.random.Generator, cfg: PipelineConfig) -> NetworkParams:
    codec = make_codec(cfg)
    cmt = {}
    for level in cfg.cmt_levels:
        if level == 5:
            continue
        d = cfg.level_channels[level - 1]
        cmt[level] = init_cmt(rng, d_point=d, d_image=cfg.it_channels[level - 1], d=d, out=d)
    cmt_final = None
    if 5 in cfg.cmt_levels:
        d = cfg.fp_channels[-1]
        cmt_final = init_cmt(rng, d_point=d, d_image=cfg.fused_channels, d=d, out=d)
    final_width = cfg.fp_channels[-1]
    return NetworkParams(
        pt=init_pointformer(rng, cfg),
        it=init_imageformer(rng, cfg),
        cmt=cmt,
        cmt_final=cmt_final,
        seg=init_seg_head(rng, final_width),
        rpn_box=init_linear(rng, codec.prediction_width, final_width),
        refine=init_refine_head(rng, final_width, codec),
        point_proj=init_linear(rng, cfg.contrast_dim, final_width),
        image_proj=init_linear(rng, cfg.contrast_dim, cfg.fused_channels),
    )


@dataclass
class ForwardResult:
    levels: list  # per-block point clouds, post enrichment
    full_feats: np.ndarray  # decoder output before level-5 enrichment
    final_feats: np.ndarray  # what the heads consume
    maps: list  # image branch per-level maps
    fused: np.ndarray  # full-resolution fused image map
    seg_scores: np.ndarray
    trace: dict
    seconds: float


def trace_shapes(cfg: PipelineConfig) -> dict:
    """Shape ledger the forward pass must reproduce, computed from the
    configuration alone."""
    n = cfg.input_points
    points = [n] + list(cfg.level_points) + list(reversed(cfg.level_points[:-1])) + [n]
    extents = [list(cfg.map_size(i + 1)) for i in range(4)]
    return {
        "points": points,
        "point_channels": list(cfg.level_channels),
        "fp_channels": list(cfg.fp_channels),
        "final_width": cfg.fp_channels[-1],
        "image_extents": extents,
        "image_channels": list(cfg.it_channels),
        "tokens": [cfg.tokens] * 4,
        "fused_map": [cfg.fused_channels, cfg.image_height, cfg.image_width],
        "cmt_levels": sorted(cfg.cmt_levels),
    }


def forward_full(
    cfg: PipelineConfig,
    params: NetworkParams,
    cloud: PointCloud,
    image: np.ndarray,
    calib: Calibration,
) -> ForwardResult:
    start = time.perf_counter()
    maps, fused = imageformer_forward(cfg, params.it, image)

    def hook(level: int, pc: PointCloud) -> PointCloud:
        if level not in params.cmt:
            return pc
        return fuse_level(
            params.cmt[level], pc, maps[level - 1], calib,
            stride=float(2 ** level), scale_by_sqrt_d=cfg.cmt_scale_by_sqrt_d,
        )

    levels, full_feats = pointformer_forward(cfg, params.pt, cloud, level_hook=hook)

    final_feats = full_feats
    if params.cmt_final is not None:
        full_pc = PointCloud(
            cloud.coords, features=full_feats,
            fg_score=cloud.fg_score, class_id=cloud.class_id,
        )
        final_feats = fuse_level(
            params.cmt_final, full_pc, fused, calib,
            stride=1.0, scale_by_sqrt_d=cfg.cmt_scale_by_sqrt_d,
        ).features

    seg_scores = seg_head_forward(params.seg, final_feats)
    trace = {
        "points": (
            [len(cloud)]
            + [len(lv) for lv in levels]
            + [len(lv) for lv in reversed(levels[:-1])]
            + [len(cloud)]
        ),
        "point_channels": [lv.features.shape[1] for lv in levels],
        "fp_channels": list(cfg.fp_channels),
        "final_width": int(final_feats.shape[1]),
        "image_extents": [[m.shape[2], m.shape[1]] for m in maps],
        "image_channels": [m.shape[0] for m in maps],
        "tokens": [cfg.tokens] * 4,
        "fused_map": list(fused.shape),
        "cmt_levels": sorted(
            list(params.cmt) + ([5] if params.cmt_final is not None else [])
        ),
    }
    return ForwardResult(
        levels=levels,
        full_feats=full_feats,
        final_feats=final_feats,
        maps=maps,
        fused=fused,
        seg_scores=seg_scores,
        trace=trace,
        seconds=time.perf_counter() - start,
    )


def format_trace(trace: dict) -> str:
    lines = [
        "points      " + " -> ".join(str(p) for p in trace["points"]),
        "pt widths   " + " ".join(str(c) for c in trace["point_channels"]),
        "fp widths   " + " ".join(str(c) for c in trace["fp_channels"]),
        "image maps  "
        + " ".join(
            f"{c}x{w}x{h}"
            for c, (w, h) in zip(trace["image_channels"], trace["image_extents"])
        ),
        "tokens      " + " ".join(str(t) for t in trace["tokens"]),
        "fused map   " + "x".join(str(v) for v in trace["fused_map"]),
        "fusion at   " + " ".join(str(v) for v in trace["cmt_levels"]),
    ]
    return "\n".join(lines)
