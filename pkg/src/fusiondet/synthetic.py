"""Seeded synthetic frames: disjoint boxes, surface point clouds, a
flat-shaded rendering of the same boxes, and a matching calibration.

The generator is the test bed for the full pipeline: every labeled
point falls inside exactly one box, box footprints never overlap, and
projecting an object's points lands inside that object's rendered
silhouette. Object points carry high intensity against a dim ground
so the point branch has a usable raw feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .detection import DEFAULT_ANCHORS, Box3D, points_in_box
from .fusion import Calibration, project_points
from .kitti import DetectionLabel, Frame, CLASS_NAMES
from .pointops import PointCloud

CLASS_COLORS = {0: (0.85, 0.25, 0.2), 1: (0.2, 0.8, 0.3), 2: (0.25, 0.35, 0.9)}


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    counts: dict = field(default_factory=lambda: {0: 2, 1: 1})  # class -> instances
    x_range: tuple = (8.0, 56.0)
    y_range: tuple = (-10.0, 10.0)
    points_per_object: int = 32
    noise_points: int = 200
    target_points: int = 0  # 0: take the pipeline input size


def forward_camera(width: int, height: int) -> Calibration:
    """Camera at the sensor origin looking along +x.

    Camera axes: z forward (+x sensor), x right (-y sensor), y down
    (-z sensor). Focal lengths are picked so the default placement
    region stays inside a width x height image.
    """
    tr = np.array(
        [
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    fu = width / 3.0
    fv = 1.2 * height
    cam = np.array(
        [[fu, 0.0, width / 2.0, 0.0], [0.0, fv, height / 2.0, 0.0], [0.0, 0.0, 1.0, 0.0]]
    )
    return Calibration(cam, np.eye(4), tr)


def _sample_box(rng, spec, class_id: int) -> Box3D:
    ah, aw, al = DEFAULT_ANCHORS[class_id]
    h = ah * rng.uniform(0.9, 1.1)
    w = aw * rng.uniform(0.9, 1.1)
    l = al * rng.uniform(0.9, 1.1)
    x = rng.uniform(*spec.x_range)
    y = rng.uniform(*spec.y_range)
    # keep the box volume above the ground band so a box pasted into
    # another frame can never contain that frame's ground points
    z = rng.uniform(-1.55 + h / 2, 1.0 - h / 2 - 0.05)
    theta = rng.uniform(-np.pi, np.pi)
    return Box3D(x, y, z, h, w, l, theta, class_id=class_id)


def _place_boxes(rng, spec) -> list:
    from .evalkit import bev_iou

    placed = []
    for class_id in sorted(spec.counts):
        for _ in range(spec.counts[class_id]):
            for attempt in range(1000):
                cand = _sample_box(rng, spec, class_id)
                if all(bev_iou(cand, other) == 0.0 for other in placed):
                    placed.append(cand)
                    break
            else:
                raise RuntimeError("could not place a non-overlapping box in 1000 attempts")
    return placed


def surface_points(rng, box: Box3D, count: int) -> np.ndarray:
    """Uniform samples on the box faces (area-weighted), world frame.

    Samples sit fractionally inside the surface so they stay inside
    the box through float32 round trips.
    """
    hx, hy, hz = box.l / 2, box.w / 2, box.h / 2
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4
    face = rng.choice(6, size=count, p=areas / areas.sum())
    local = rng.uniform(-1.0, 1.0, size=(count, 3))
    shrink = 1.0 - 1e-4
    local *= np.array([hx, hy, hz]) * shrink
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    local[np.arange(count), axis] = sign * np.array([hx, hy, hz])[axis] * shrink
    c, s = np.cos(box.theta), np.sin(box.theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def _ground_points(rng, spec, boxes, count: int) -> np.ndarray:
    """Uniform ground-band points kept clear of every box.

    Object crops select by box membership alone, so a ground point
    inside a box would ride along as a low-intensity object point.
    Boxes are inflated a little so the clearance survives float32
    round trips through the on-disk format.
    """
    pad = 0.2
    fat = [
        Box3D(b.x, b.y, b.z, b.h + pad, b.w + pad, b.l + pad, b.theta, class_id=b.class_id)
        for b in boxes
    ]
    out = np.empty((0, 3))
    for _ in range(100):
        if out.shape[0] >= count:
            return out[:count]
        cand = np.column_stack(
            [
                rng.uniform(spec.x_range[0], spec.x_range[1], count),
                rng.uniform(spec.y_range[0], spec.y_range[1], count),
                rng.uniform(-2.2, -1.6, count),
            ]
        )
        inside = np.zeros(count, dtype=bool)
        for b in fat:
            inside |= points_in_box(cand, b)
        out = np.vstack([out, cand[~inside]])
    raise RuntimeError("could not sample enough ground points clear of the boxes")


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Monotone-chain hull, CCW in (u, v) with v downward keeps sign CW on
    screen; orientation does not matter to the rasterizer."""
    pts = np.unique(pts, axis=0)
    if pts.shape[0] < 3:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def build(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                a, b = out[-2], out[-1]
                if (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) <= 0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = build(pts)
    upper = build(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def rasterize_hull(image: np.ndarray, hull: np.ndarray, color) -> np.ndarray:
    """Fill the convex polygon. image is [3,H,W]; hull rows are (u, v)."""
    if hull.shape[0] < 3:
        return np.zeros(image.shape[1:], dtype=bool)
    _, h, w = image.shape
    u0 = max(int(np.floor(hull[:, 0].min())), 0)
    u1 = min(int(np.ceil(hull[:, 0].max())) + 1, w)
    v0 = max(int(np.floor(hull[:, 1].min())), 0)
    v1 = min(int(np.ceil(hull[:, 1].max())) + 1, h)
    if u0 >= u1 or v0 >= v1:
        return np.zeros(image.shape[1:], dtype=bool)
    uu, vv = np.meshgrid(np.arange(u0, u1, dtype=float), np.arange(v0, v1, dtype=float))
    inside = np.ones(uu.shape, dtype=bool)
    n = hull.shape[0]
    area2 = float(
        np.sum(hull[:, 0] * np.roll(hull[:, 1], -1) - np.roll(hull[:, 0], -1) * hull[:, 1])
    )
    orient = 1.0 if area2 >= 0 else -1.0
    for i in range(n):
        a, b = hull[i], hull[(i + 1) % n]
        cr = (b[0] - a[0]) * (vv - a[1]) - (b[1] - a[1]) * (uu - a[0])
        inside &= (cr * orient) >= -1e-9
    mask = np.zeros((h, w), dtype=bool)
    mask[v0:v1, u0:u1] = inside
    image[:, mask] = np.asarray(color)[:, None]
    return mask


def _box_corners_3d(box: Box3D) -> np.ndarray:
    sx, sy, sz = box.l / 2, box.w / 2, box.h / 2
    signs = np.array(
        [[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], dtype=float
    )
    local = signs * np.array([sx, sy, sz])
    c, s = np.cos(box.theta), np.sin(box.theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def render_boxes(boxes, calib: Calibration, width: int, height: int, rng) -> np.ndarray:
    """Noise background, then one flat-shaded hull per box, far to near."""
    image = rng.uniform(0.0, 0.15, size=(3, height, width))
    depth_order = np.argsort([-b.x for b in boxes])  # paint far boxes first
    for i in depth_order:
        box = boxes[i]
        uvz = project_points(calib, _box_corners_3d(box))
        if np.any(uvz[:, 2] <= 0):
            raise RuntimeError("synthetic box projects behind the camera")
        hull = _convex_hull(uvz[:, :2])
        rasterize_hull(image, hull, CLASS_COLORS[box.class_id])
    return image


def generate_synthetic(spec: SyntheticSceneSpec, cfg: PipelineConfig) -> Frame:
    rng = np.random.default_rng(spec.seed)
    target = spec.target_points or cfg.input_points
    calib = forward_camera(cfg.image_width, cfg.image_height)
    boxes = _place_boxes(rng, spec)

    chunks, classes = [], []
    for box in boxes:
        pts = surface_points(rng, box, spec.points_per_object)
        chunks.append(pts)
        classes.append(np.full(len(pts), box.class_id, dtype=np.int64))
    chunks.append(_ground_points(rng, spec, boxes, spec.noise_points))
    classes.append(np.full(spec.noise_points, -1, dtype=np.int64))
    coords = np.vstack(chunks)
    class_id = np.concatenate(classes)
    fg = class_id >= 0
    intensity = np.where(fg, rng.uniform(0.7, 1.0, len(fg)), rng.uniform(0.0, 0.25, len(fg)))
    fg_score = np.clip(
        np.where(fg, 0.9, 0.05) + rng.normal(0.0, 0.02, len(fg)), 0.0, 1.0
    )

    n = coords.shape[0]
    if n < target:
        extra = target - n
        coords = np.vstack([coords, _ground_points(rng, spec, boxes, extra)])
        class_id = np.concatenate([class_id, np.full(extra, -1, dtype=np.int64)])
        intensity = np.concatenate([intensity, rng.uniform(0.0, 0.25, extra)])
        fg_score = np.concatenate(
            [fg_score, np.clip(0.05 + rng.normal(0.0, 0.02, extra), 0.0, 1.0)]
        )
    elif n > target:
        # drop background rows first so labeled structure survives
        bg_rows = np.flatnonzero(class_id < 0)
        drop = n - target
        if drop > bg_rows.size:
            raise ValueError(
                f"spec produces {n - bg_rows.size} object points, over the {target} budget"
            )
        dropped = bg_rows[rng.choice(bg_rows.size, size=drop, replace=False)]
        keep = np.setdiff1d(np.arange(n), dropped)
        coords, class_id = coords[keep], class_id[keep]
        intensity, fg_score = intensity[keep], fg_score[keep]

    cloud = PointCloud(
        coords, features=intensity[:, None], fg_score=fg_score, class_id=class_id
    )
    image = render_boxes(boxes, calib, cfg.image_width, cfg.image_height, rng)
    labels = [
        DetectionLabel(box=b, name=CLASS_NAMES[b.class_id], bbox2d=(0.0, 0.0, 0.0, 0.0))
        for b in boxes
    ]
    return Frame(cloud=cloud, image=image, calib=calib, labels=labels)
