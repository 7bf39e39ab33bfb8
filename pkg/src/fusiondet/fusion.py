"""Sensor-frame-to-image projection and cross-modal attention fusion.

Points are projected through the rigid transform, rectifying rotation,
and camera matrix; image features are bilinearly sampled at the
projected pixels; a pair of cross-attentions then exchanges context
between the two modalities and a linear map compresses the 4-way
concatenation back to the level's width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    LinearParams,
    ShapeError,
    as_tensor,
    init_linear,
    linear_forward,
    stable_softmax,
)
from .pointops import PointCloud

_ATTN_BLOCK = 2048  # query-row chunk: keeps the score matrix well under a GB


@dataclass
class Calibration:
    """The three matrices taking sensor-frame points to pixels."""

    cam_matrix: np.ndarray  # [3,4] projection, pixel units
    rect: np.ndarray  # [4,4] rectifying rotation, homogeneous
    cam_from_lidar: np.ndarray  # [4,4] rigid transform, homogeneous

    def __post_init__(self):
        self.cam_matrix = as_tensor(self.cam_matrix, "cam_matrix")
        self.rect = as_tensor(self.rect, "rect")
        self.cam_from_lidar = as_tensor(self.cam_from_lidar, "cam_from_lidar")
        if self.cam_matrix.shape != (3, 4):
            raise ShapeError("cam_matrix must be [3,4]")
        for name in ("rect", "cam_from_lidar"):
            mat = getattr(self, name)
            if mat.shape != (4, 4):
                raise ShapeError(f"{name} must be [4,4]")
            if not np.allclose(mat[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
                raise ValueError(f"{name} last row must be [0,0,0,1]")
            rot = mat[:3, :3]
            if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
                raise ValueError(f"{name} rotation block is not orthonormal")

    @property
    def chain(self) -> np.ndarray:
        """The composed [3,4] map applied to homogeneous sensor points."""
        return self.cam_matrix @ self.rect @ self.cam_from_lidar


def identity_calibration(fu: float = 1.0, fv: float = 1.0, cu: float = 0.0, cv: float = 0.0):
    """Pinhole-only calibration; sensor frame already equals the camera frame."""
    cam = np.array([[fu, 0.0, cu, 0.0], [0.0, fv, cv, 0.0], [0.0, 0.0, 1.0, 0.0]])
    return Calibration(cam, np.eye(4), np.eye(4))


def project_points(calib: Calibration, points: np.ndarray) -> np.ndarray:
    """Project [N,3] sensor-frame points to [N,3] rows of (u, v, depth).

    Depth magnitude below 1e-9 (point at the camera plane) is refused
    rather than divided through; callers filter behind-camera points by
    the sign of the returned depth.
    """
    points = as_tensor(points, "points")
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError("points must be [N,3]")
    hom = np.hstack([points, np.ones((points.shape[0], 1))])
    img = hom @ calib.chain.T  # rows (z*u, z*v, z)
    z = img[:, 2]
    if np.any(np.abs(z) < 1e-9):
        raise ValueError("degenerate projection: |depth| < 1e-9")
    return np.column_stack([img[:, 0] / z, img[:, 1] / z, z])


def project_lidar_to_image(calib: Calibration, p) -> tuple:
    """Single-point convenience wrapper; returns (u, v, depth)."""
    row = project_points(calib, np.asarray(p, dtype=np.float64)[None, :])[0]
    return float(row[0]), float(row[1]), float(row[2])


def sample_image_features(fm: np.ndarray, pixels: np.ndarray):
    """Bilinear samples of [C,H,W] at (u,v) pixel positions.

    Integer coordinates address cell centers. Out-of-bounds positions
    clamp to the border. Returns (features [n,C], oob [n] bool), rows in
    input order.
    """
    fm = as_tensor(fm, "feature map")
    if fm.ndim != 3:
        raise ShapeError("feature map must be [C,H,W]")
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise ShapeError("pixels must be [n,2] rows of (u, v)")
    _, h, w = fm.shape
    u = pixels[:, 0]
    v = pixels[:, 1]
    oob = (u < 0) | (u > w - 1) | (v < 0) | (v > h - 1)
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2) if w > 1 else np.zeros(len(u), np.int64)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2) if h > 1 else np.zeros(len(v), np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = u - u0
    fv = v - v0
    top = fm[:, v0, u0] * (1 - fu) + fm[:, v0, u1] * fu  # [C, n]
    bot = fm[:, v1, u0] * (1 - fu) + fm[:, v1, u1] * fu
    out = (top * (1 - fv) + bot * fv).T
    return out, oob


@dataclass
class CmtParams:
    """Cross-attention projections for one fusion level."""

    point_q: LinearParams
    point_k: LinearParams
    point_v: LinearParams
    image_q: LinearParams
    image_k: LinearParams
    image_v: LinearParams
    image_proj: LinearParams  # raw image features -> common dim, for the concat
    compress: LinearParams  # 4*d -> level width

    def __post_init__(self):
        d = self.point_q.out_dim
        outs = [p.out_dim for p in (self.point_k, self.point_v,
                                    self.image_q, self.image_k, self.image_v,
                                    self.image_proj)]
        if any(o != d for o in outs):
            raise ShapeError("all projections must share the common dim")
        if self.compress.in_dim != 4 * d:
            raise ShapeError("compression must consume the 4-way concatenation")

    @property
    def common_dim(self) -> int:
        return self.point_q.out_dim


def init_cmt(rng, d_point: int, d_image: int, d: int, out: int) -> CmtParams:
    return CmtParams(
        point_q=init_linear(rng, d, d_point),
        point_k=init_linear(rng, d, d_point),
        point_v=init_linear(rng, d, d_point),
        image_q=init_linear(rng, d, d_image),
        image_k=init_linear(rng, d, d_image),
        image_v=init_linear(rng, d, d_image),
        image_proj=init_linear(rng, d, d_image),
        compress=init_linear(rng, out, 4 * d),
    )


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    """softmax(q k^T * scale) v with query rows processed in blocks."""
    n = q.shape[0]
    out = np.empty((n, v.shape[1]))
    for lo in range(0, n, _ATTN_BLOCK):
        hi = min(lo + _ATTN_BLOCK, n)
        scores = (q[lo:hi] @ k.T) * scale
        out[lo:hi] = stable_softmax(scores, axis=1) @ v
    return out


def cmt_forward(
    params: CmtParams,
    f_p: np.ndarray,
    f_i: np.ndarray,
    scale_by_sqrt_d: bool = False,
) -> np.ndarray:
    """Exchange context between row-aligned point and image features.

    Point context comes from image queries against point keys gating
    point values; image context symmetrically. The output compresses
    (F_P ‖ proj(F_I) ‖ point context ‖ image context) to the level width.
    """
    f_p = as_tensor(f_p, "point features")
    f_i = as_tensor(f_i, "image features")
    if f_p.shape[0] != f_i.shape[0]:
        raise ShapeError("point and image feature row counts differ")
    if f_p.shape[1] != params.common_dim:
        raise ShapeError("point features must already be at the common dim")
    d = params.common_dim
    scale = 1.0 / np.sqrt(d) if scale_by_sqrt_d else 1.0
    q_p = linear_forward(params.point_q, f_p)
    k_p = linear_forward(params.point_k, f_p)
    v_p = linear_forward(params.point_v, f_p)
    q_i = linear_forward(params.image_q, f_i)
    k_i = linear_forward(params.image_k, f_i)
    v_i = linear_forward(params.image_v, f_i)
    point_context = _attend(q_i, k_p, v_p, scale)
    image_context = _attend(q_p, k_i, v_i, scale)
    stacked = np.concatenate(
        [f_p, linear_forward(params.image_proj, f_i), point_context, image_context], axis=1
    )
    return linear_forward(params.compress, stacked)


def fuse_level(
    params: CmtParams,
    pc: PointCloud,
    feature_map: np.ndarray,
    calib: Calibration,
    stride: float,
    scale_by_sqrt_d: bool = False,
) -> PointCloud:
    """Enrich a level's point features with image context.

    stride is the ratio of full image resolution to this feature map's
    resolution; projected pixel coordinates are converted with the
    center-aligned mapping (u + 0.5)/stride - 0.5.
    """
    if pc.features is None:
        raise ValueError("point cloud must carry features")
    uvz = project_points(calib, pc.coords)
    map_px = (uvz[:, :2] + 0.5) / stride - 0.5
    sampled, _ = sample_image_features(feature_map, map_px)
    fused = cmt_forward(params, pc.features, sampled, scale_by_sqrt_d)
    return PointCloud(
        pc.coords, features=fused, fg_score=pc.fg_score, class_id=pc.class_id
    )
