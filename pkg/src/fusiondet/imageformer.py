"""Image branch: conv + patch-token attention blocks, parallel upsampling.

Four blocks each halve the spatial extent (strided conv, then a
stride-1 conv, then multi-head self-attention over patch tokens). Each
block's map is restored to full resolution by its own transposed
convolution; the four restored maps are concatenated and fused by a
1x1 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .numerics import (
    LinearParams,
    ShapeError,
    as_tensor,
    conv2d,
    conv_transpose2d,
    init_linear,
    linear_forward,
    relu,
    stable_softmax,
)


def patchify(fm: np.ndarray, s: int) -> np.ndarray:
    """Cut [C,H,W] into non-overlapping s*s patches, row-major patch order.

    Returns [(H/s)*(W/s), C*s*s]; unpatchify inverts it bit-exactly.
    """
    fm = as_tensor(fm, "feature map")
    if fm.ndim != 3:
        raise ShapeError("feature map must be [C,H,W]")
    c, h, w = fm.shape
    if h % s or w % s:
        raise ShapeError(f"patch size {s} does not divide map extents {h}x{w}")
    tiles = fm.reshape(c, h // s, s, w // s, s)
    return tiles.transpose(1, 3, 0, 2, 4).reshape((h // s) * (w // s), c * s * s)


def unpatchify(tokens: np.ndarray, c: int, h: int, w: int, s: int) -> np.ndarray:
    """Inverse of patchify back to [C,H,W]."""
    tokens = as_tensor(tokens, "tokens")
    expect = ((h // s) * (w // s), c * s * s)
    if tokens.shape != expect:
        raise ShapeError(f"tokens {tokens.shape} do not match layout {expect}")
    tiles = tokens.reshape(h // s, w // s, c, s, s)
    return tiles.transpose(2, 0, 3, 1, 4).reshape(c, h, w)


@dataclass
class AttentionParams:
    """Projections for one multi-head self-attention layer (all D -> D)."""

    wq: LinearParams
    wk: LinearParams
    wv: LinearParams
    wo: LinearParams


def init_attention(rng, dim: int) -> AttentionParams:
    return AttentionParams(*(init_linear(rng, dim, dim) for _ in range(4)))


def multihead_encoder(tokens: np.ndarray, heads: int, params: AttentionParams) -> np.ndarray:
    """Scaled dot-product self-attention with residual connection.

    Per head: softmax(Q K^T / sqrt(D/heads)) V; heads are concatenated,
    projected, and added back onto the input tokens.
    """
    tokens = as_tensor(tokens, "tokens")
    t, d = tokens.shape
    if d % heads:
        raise ShapeError(f"token width {d} not divisible by {heads} heads")
    hd = d // heads
    q = linear_forward(params.wq, tokens).reshape(t, heads, hd)
    k = linear_forward(params.wk, tokens).reshape(t, heads, hd)
    v = linear_forward(params.wv, tokens).reshape(t, heads, hd)
    scores = np.einsum("qhd,khd->hqk", q, k) / np.sqrt(hd)
    attn = stable_softmax(scores, axis=2)
    mixed = np.einsum("hqk,khd->qhd", attn, v).reshape(t, d)
    return tokens + linear_forward(params.wo, mixed)


@dataclass
class ConvParams:
    kernels: np.ndarray  # conv: [C_out, C_in, kh, kw]; transposed: [C_in, C_out, kh, kw]
    bias: np.ndarray

    def __post_init__(self):
        self.kernels = as_tensor(self.kernels, "kernels")
        self.bias = as_tensor(self.bias, "bias")


def init_conv(rng, c_out: int, c_in: int, k: int) -> ConvParams:
    bound = 1.0 / np.sqrt(c_in * k * k)
    return ConvParams(
        rng.uniform(-bound, bound, size=(c_out, c_in, k, k)),
        rng.uniform(-bound, bound, size=c_out),
    )


def init_transpose_conv(rng, c_in: int, c_out: int, k: int) -> ConvParams:
    bound = 1.0 / np.sqrt(c_in * k * k)
    return ConvParams(
        rng.uniform(-bound, bound, size=(c_in, c_out, k, k)),
        rng.uniform(-bound, bound, size=c_out),
    )


@dataclass
class ItbParams:
    conv_down: ConvParams  # stride 2
    conv_keep: ConvParams  # stride 1
    patch_proj: LinearParams  # C*s*s -> embed
    patch_unproj: LinearParams  # embed -> C*s*s
    attention: AttentionParams


@dataclass
class ImageformerParams:
    itbs: list
    pos_embed: np.ndarray  # [tokens, embed], shared across levels
    ups: list  # transposed-conv ConvParams per level
    fuse: ConvParams  # 1x1 over the concatenated restored maps


def init_imageformer(rng: np.random.Generator, cfg: PipelineConfig) -> ImageformerParams:
    itbs = []
    c_in = 3
    for level, c in enumerate(cfg.it_channels):
        s = cfg.patch_sizes[level]
        itbs.append(
            ItbParams(
                conv_down=init_conv(rng, c, c_in, 3),
                conv_keep=init_conv(rng, c, c, 3),
                patch_proj=init_linear(rng, cfg.embed_dim, c * s * s),
                patch_unproj=init_linear(rng, c * s * s, cfg.embed_dim),
                attention=init_attention(rng, cfg.embed_dim),
            )
        )
        c_in = c
    pos_embed = rng.uniform(-0.1, 0.1, size=(cfg.tokens, cfg.embed_dim))
    ups = [
        init_transpose_conv(rng, c, cfg.up_channels, stride)
        for c, stride in zip(cfg.it_channels, cfg.up_strides)
    ]
    fuse = init_conv(rng, cfg.fused_channels, 4 * cfg.up_channels, 1)
    return ImageformerParams(itbs=itbs, pos_embed=pos_embed, ups=ups, fuse=fuse)


def itb_forward(
    params: ItbParams, fm: np.ndarray, patch: int, heads: int, pos_embed: np.ndarray
) -> np.ndarray:
    """One block: downsample by 2, refine, attend over patch tokens."""
    fm = relu(
        conv2d(fm, params.conv_down.kernels, stride=2, padding=1)
        + params.conv_down.bias[:, None, None]
    )
    fm = relu(
        conv2d(fm, params.conv_keep.kernels, stride=1, padding=1)
        + params.conv_keep.bias[:, None, None]
    )
    c, h, w = fm.shape
    tokens = linear_forward(params.patch_proj, patchify(fm, patch)) + pos_embed
    tokens = multihead_encoder(tokens, heads, params.attention)
    return unpatchify(linear_forward(params.patch_unproj, tokens), c, h, w, patch)


def imageformer_forward(cfg: PipelineConfig, params: ImageformerParams, image: np.ndarray):
    """Run all blocks and the parallel upsampling path.

    image is [3, H, W] in [0,1]. Returns (level_maps, fused) where
    level_maps[i] is block i's output and fused is the full-resolution
    [fused_channels, H, W] map.
    """
    image = as_tensor(image, "image")
    if image.shape != (3, cfg.image_height, cfg.image_width):
        raise ShapeError(
            f"image must be [3,{cfg.image_height},{cfg.image_width}], got {image.shape}"
        )
    maps = []
    fm = image
    for level, itb in enumerate(params.itbs):
        fm = itb_forward(itb, fm, cfg.patch_sizes[level], cfg.heads, params.pos_embed)
        maps.append(fm)
    restored = [
        conv_transpose2d(m, up.kernels, stride) + up.bias[:, None, None]
        for m, up, stride in zip(maps, params.ups, cfg.up_strides)
    ]
    stacked = np.concatenate(restored, axis=0)
    fused = conv2d(stacked, params.fuse.kernels) + params.fuse.bias[:, None, None]
    return maps, fused
