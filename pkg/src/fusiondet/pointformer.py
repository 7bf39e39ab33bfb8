"""Point branch: vector-attention blocks over neighborhoods, stacked encoder.

Each block runs two attention layers in parallel on the same input
cloud — a local one over ball-query neighborhoods and a global one over
all sampled centroids — then concatenates and compresses. Four blocks
downsample the cloud; inverse-distance interpolation layers restore
full resolution with skip connections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .numerics import (
    LinearParams,
    MlpParams,
    ShapeError,
    init_linear,
    init_mlp,
    linear_forward,
    mlp_forward,
    stable_softmax,
)
from .pointops import PointCloud, ball_query, farthest_point_sample, feature_propagation

# row cap for the member-pair intermediates; keeps the widest hidden
# activation around half a GB at full scale
_MAX_ROWS = 1 << 17


@dataclass
class BtParams:
    """One vector-attention layer.

    phi/psi/alpha map input features to the layer width d; gamma turns
    (phi(f_i) - psi(f_j) + delta_ij) into per-channel attention logits;
    theta encodes the coordinate offset p_i - p_j into delta_ij.
    """

    phi: LinearParams
    psi: LinearParams
    alpha: LinearParams
    gamma: MlpParams
    theta: MlpParams

    def __post_init__(self):
        d = self.phi.out_dim
        if not (self.psi.out_dim == self.alpha.out_dim == d):
            raise ShapeError("phi/psi/alpha must share one output width")
        if self.gamma.in_dim != d or self.gamma.out_dim != d:
            raise ShapeError("gamma must map d -> d")
        if self.theta.in_dim != 3 or self.theta.out_dim != d:
            raise ShapeError("theta must map 3 -> d")

    @property
    def width(self) -> int:
        return self.phi.out_dim


def init_bt(rng: np.random.Generator, d_in: int, d: int, hidden: int) -> BtParams:
    return BtParams(
        phi=init_linear(rng, d, d_in),
        psi=init_linear(rng, d, d_in),
        alpha=init_linear(rng, d, d_in),
        gamma=init_mlp(rng, d, hidden, d),
        theta=init_mlp(rng, 3, d, d),
    )


def _bt_batch(
    params: BtParams,
    coords: np.ndarray,
    feats: np.ndarray,
    centers: np.ndarray,
    members: np.ndarray,
) -> np.ndarray:
    """Attention-pool members onto centers; [M, K] member table -> [M, d]."""
    m, k = members.shape
    psi_all = linear_forward(params.psi, feats)
    alpha_all = linear_forward(params.alpha, feats)
    phi_c = linear_forward(params.phi, feats[centers])
    out = np.empty((m, params.width))
    block = max(1, _MAX_ROWS // k)
    for lo in range(0, m, block):
        hi = min(lo + block, m)
        mem = members[lo:hi]
        delta = mlp_forward(params.theta, coords[centers[lo:hi], None, :] - coords[mem])
        logits = mlp_forward(params.gamma, phi_c[lo:hi, None, :] - psi_all[mem] + delta)
        weights = stable_softmax(logits, axis=1)  # per channel, over members
        out[lo:hi] = np.sum(weights * (alpha_all[mem] + delta), axis=1)
    return out


def basic_transformer(
    params: BtParams,
    coords: np.ndarray,
    feats: np.ndarray,
    center: int,
    members,
) -> np.ndarray:
    """Attention-pooled feature for one center over its member set.

    y = sum_j softmax_j(gamma(phi(f_c) - psi(f_j) + delta_cj)) * (alpha(f_j) + delta_cj),
    softmax taken independently per channel across the members.
    """
    members = np.asarray(members, dtype=np.int64)
    if members.size == 0:
        raise ValueError("member set must be nonempty")
    return _bt_batch(params, coords, feats, np.array([center]), members[None, :])[0]


@dataclass
class BlockParams:
    """One downsampling block: local + global attention, then compression."""

    local: BtParams
    glob: BtParams
    compress: LinearParams

    def __post_init__(self):
        if self.local.width != self.glob.width:
            raise ShapeError("local and global layers must share a width")
        if self.compress.in_dim != 2 * self.local.width:
            raise ShapeError("compression must consume the concatenated width")

    @property
    def width(self) -> int:
        return self.compress.out_dim


def init_block(rng, d_in: int, d: int, hidden: int) -> BlockParams:
    return BlockParams(
        local=init_bt(rng, d_in, d, hidden),
        glob=init_bt(rng, d_in, d, hidden),
        compress=init_linear(rng, d, 2 * d),
    )


def ptb_forward(
    params: BlockParams, pc: PointCloud, m: int, radius: float, k: int
) -> PointCloud:
    """Downsample to m centroids with fused local+global attention features."""
    if pc.features is None:
        raise ValueError("block input cloud must carry features")
    centroids = farthest_point_sample(pc, m)
    groups = ball_query(pc, centroids, radius, k)
    local = _bt_batch(params.local, pc.coords, pc.features, centroids, groups)
    # global layer: every centroid attends over all centroids
    all_members = np.broadcast_to(np.arange(m, dtype=np.int64), (m, m))
    sub_coords = pc.coords[centroids]
    sub_feats = pc.features[centroids]
    glob = _bt_batch(params.glob, sub_coords, sub_feats, np.arange(m), all_members)
    fused = linear_forward(params.compress, np.concatenate([local, glob], axis=1))
    return PointCloud(sub_coords, features=fused)


@dataclass
class PointformerParams:
    blocks: list  # 4 BlockParams
    fp: list  # 4 MlpParams, coarse-to-fine


def init_pointformer(rng: np.random.Generator, cfg: PipelineConfig) -> PointformerParams:
    blocks = []
    d_in = cfg.input_feature_width
    for d in cfg.level_channels:
        blocks.append(init_block(rng, d_in, d, cfg.bt_hidden))
        d_in = d
    # skip widths seen fine-to-coarse are level3, level2, level1, raw input
    skips = [cfg.level_channels[2], cfg.level_channels[1], cfg.level_channels[0],
             cfg.input_feature_width]
    fp = []
    carry = cfg.level_channels[3]
    for skip, out in zip(skips, cfg.fp_channels):
        fp.append(init_mlp(rng, carry + skip, out, out))
        carry = out
    return PointformerParams(blocks=blocks, fp=fp)


def pointformer_forward(
    cfg: PipelineConfig,
    params: PointformerParams,
    pc: PointCloud,
    level_hook=None,
):
    """Run the 4-block encoder and the 4-stage upsampling decoder.

    level_hook(level_index, cloud) may replace each block's output cloud
    (features only, same width); this is where cross-modal enrichment
    plugs in. Returns (levels, full_res_features) where levels holds the
    post-hook cloud per block and full_res_features is [N, fp_channels[-1]].
    """
    if len(pc) != cfg.input_points:
        raise ShapeError(f"expected {cfg.input_points} input points, got {len(pc)}")
    if pc.features is None or pc.features.shape[1] != cfg.input_feature_width:
        raise ShapeError("input cloud features must match the configured width")
    levels = []
    current = pc
    for i, block in enumerate(params.blocks):
        current = ptb_forward(
            block, current, cfg.level_points[i], cfg.level_radii[i], cfg.group_size
        )
        if level_hook is not None:
            current = level_hook(i + 1, current)
            if current.features.shape[1] != cfg.level_channels[i]:
                raise ShapeError("level hook must preserve the level's feature width")
        levels.append(current)
    # decoder: interpolate coarse features onto each finer level, skip-concat, mlp
    skips = [levels[2], levels[1], levels[0], pc]
    carry = levels[3]
    for skip, mlp in zip(skips, params.fp):
        interp = feature_propagation(carry, skip.coords)
        cat = np.concatenate([interp, skip.features], axis=1)
        carry = PointCloud(skip.coords, features=mlp_forward(mlp, cat))
    return levels, carry.features
