"""KITTI-format ingestion: velodyne binaries, calib files, labels, JSON boxes.

Labels arrive in the camera frame (location at the box bottom, yaw
about the camera y axis) and are converted to sensor-frame boxes
(center location, yaw about z). Parsers reject malformed input with
line/field positions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .detection import Box3D, normalize_angle
from .fusion import Calibration
from .pointops import PointCloud

CLASS_IDS = {"Car": 0, "Pedestrian": 1, "Cyclist": 2}
CLASS_NAMES = {v: k for k, v in CLASS_IDS.items()}


@dataclass
class DetectionLabel:
    box: Box3D
    name: str
    truncation: float = 0.0
    occlusion: int = 0
    alpha: float = 0.0
    bbox2d: tuple = (0.0, 0.0, 0.0, 0.0)
    excluded: bool = False  # DontCare or unrecognized class


@dataclass
class Frame:
    cloud: PointCloud
    image: np.ndarray  # [3,H,W] in [0,1]
    calib: Calibration
    labels: list = field(default_factory=list)

    @property
    def gt_boxes(self) -> list:
        return [lab.box for lab in self.labels if not lab.excluded]


# ---------------------------------------------------------------------------
# velodyne binary


def parse_velodyne(data: bytes) -> PointCloud:
    """Little-endian float32 (x, y, z, intensity) records -> cloud.

    Intensity becomes a one-column feature matrix.
    """
    if len(data) == 0:
        raise ValueError("empty point file: at least one point required")
    if len(data) % 16:
        raise ValueError(f"truncated point file: {len(data)} bytes is not a multiple of 16")
    rows = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(-1, 4)
    return PointCloud(rows[:, :3], features=rows[:, 3:4])


def write_velodyne(pc: PointCloud) -> bytes:
    """Inverse of parse_velodyne; round-trips bit-exactly for float32 data."""
    intensity = (
        pc.features[:, 0] if pc.features is not None and pc.features.shape[1] >= 1
        else np.zeros(len(pc))
    )
    rows = np.column_stack([pc.coords, intensity]).astype("<f4")
    return rows.tobytes()


# ---------------------------------------------------------------------------
# calib / labels


def _parse_floats(raw: str, count: int, key: str, lineno: int) -> np.ndarray:
    parts = raw.split()
    if len(parts) != count:
        raise ValueError(f"line {lineno}: key {key} expects {count} values, got {len(parts)}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise ValueError(f"line {lineno}: key {key}: {exc}") from None


def parse_calib(text: str) -> Calibration:
    """KITTI calib text -> Calibration (P2, R0_rect, Tr_velo_to_cam)."""
    found = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.strip()
        if not body:
            continue
        key, sep, raw = body.partition(":")
        if not sep:
            continue  # unrelated line
        key = key.strip()
        if key == "P2":
            found[key] = _parse_floats(raw, 12, key, lineno).reshape(3, 4)
        elif key == "R0_rect":
            found[key] = _parse_floats(raw, 9, key, lineno).reshape(3, 3)
        elif key == "Tr_velo_to_cam":
            found[key] = _parse_floats(raw, 12, key, lineno).reshape(3, 4)
    missing = {"P2", "R0_rect", "Tr_velo_to_cam"} - set(found)
    if missing:
        raise ValueError(f"calib text lacks required keys: {sorted(missing)}")
    rect = np.eye(4)
    rect[:3, :3] = found["R0_rect"]
    tr = np.eye(4)
    tr[:3, :4] = found["Tr_velo_to_cam"]
    return Calibration(found["P2"], rect, tr)


def write_calib(calib: Calibration) -> str:
    def row(mat):
        return " ".join(f"{v:.12e}" for v in np.asarray(mat).reshape(-1))

    return (
        f"P2: {row(calib.cam_matrix)}\n"
        f"R0_rect: {row(calib.rect[:3, :3])}\n"
        f"Tr_velo_to_cam: {row(calib.cam_from_lidar[:3, :4])}\n"
    )


def camera_box_to_lidar(
    location, dims, rotation_y: float, calib: Calibration, class_id: int, score: float = 1.0
) -> Box3D:
    """Camera-frame label (bottom-center location, yaw about y) -> sensor box."""
    h, w, l = dims
    hom = np.array([location[0], location[1], location[2], 1.0])
    inv = np.linalg.inv(calib.rect @ calib.cam_from_lidar)
    bottom = inv @ hom
    theta = normalize_angle(-float(rotation_y) - np.pi / 2.0)
    return Box3D(
        x=float(bottom[0]), y=float(bottom[1]), z=float(bottom[2]) + h / 2.0,
        h=h, w=w, l=l, theta=theta, class_id=class_id, score=score,
    )


def lidar_box_to_camera(box: Box3D, calib: Calibration):
    """(location, dims, rotation_y) of a sensor box in the camera frame."""
    center = np.array([box.x, box.y, box.z - box.h / 2.0, 1.0])
    cam = calib.rect @ calib.cam_from_lidar @ center
    ry = normalize_angle(-box.theta - np.pi / 2.0)
    return (float(cam[0]), float(cam[1]), float(cam[2])), (box.h, box.w, box.l), ry


def parse_labels(text: str, calib: Calibration) -> list:
    """KITTI label lines -> DetectionLabel list (camera frame converted)."""
    labels = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) not in (15, 16):
            raise ValueError(
                f"line {lineno}: label rows need 15 (or 16 with score) fields, got {len(parts)}"
            )
        name = parts[0]
        try:
            vals = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        trunc, occ, alpha = vals[0], int(vals[1]), vals[2]
        bbox2d = tuple(vals[3:7])
        h, w, l = vals[7:10]
        loc = vals[10:13]
        ry = vals[13]
        score = vals[14] if len(parts) == 16 else 1.0
        excluded = name not in CLASS_IDS
        if excluded:
            # DontCare rows carry placeholder extents; keep them flagged
            box = Box3D(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, class_id=-1, score=1.0)
        else:
            box = camera_box_to_lidar(
                loc, (h, w, l), ry, calib, CLASS_IDS[name], float(np.clip(score, 0.0, 1.0))
            )
        labels.append(
            DetectionLabel(
                box=box, name=name, truncation=trunc, occlusion=occ,
                alpha=alpha, bbox2d=bbox2d, excluded=excluded,
            )
        )
    return labels


def write_labels(labels: list, calib: Calibration) -> str:
    lines = []
    for lab in labels:
        if lab.excluded:
            lines.append(
                f"{lab.name} {lab.truncation:.2f} {lab.occlusion} {lab.alpha:.2f} "
                + " ".join(f"{v:.2f}" for v in lab.bbox2d)
                + " -1.00 -1.00 -1.00 -1000.00 -1000.00 -1000.00 -10.00"
            )
            continue
        loc, (h, w, l), ry = lidar_box_to_camera(lab.box, calib)
        lines.append(
            f"{lab.name} {lab.truncation:.2f} {lab.occlusion} {lab.alpha:.2f} "
            + " ".join(f"{v:.2f}" for v in lab.bbox2d)
            + f" {h:.6f} {w:.6f} {l:.6f} {loc[0]:.6f} {loc[1]:.6f} {loc[2]:.6f} {ry:.6f}"
        )
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# range crop / subsampling


def subset_cloud(pc: PointCloud, idx: np.ndarray) -> PointCloud:
    return PointCloud(
        pc.coords[idx],
        features=None if pc.features is None else pc.features[idx],
        fg_score=None if pc.fg_score is None else pc.fg_score[idx],
        class_id=None if pc.class_id is None else pc.class_id[idx],
    )


def crop_range(
    pc: PointCloud,
    x_range=(0.0, 70.4),
    y_range=(-40.0, 40.0),
    z_range=(-3.0, 1.0),
    max_points: int = 16384,
    seed: int = 0,
) -> PointCloud:
    """Drop points outside the open working ranges, then cap the count.

    When more than max_points survive, a seeded uniform subsample
    without replacement keeps exactly max_points (original order).
    """
    c = pc.coords
    mask = (
        (c[:, 0] > x_range[0]) & (c[:, 0] < x_range[1])
        & (c[:, 1] > y_range[0]) & (c[:, 1] < y_range[1])
        & (c[:, 2] > z_range[0]) & (c[:, 2] < z_range[1])
    )
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("no points remain inside the working range")
    if idx.size > max_points:
        rng = np.random.default_rng(seed)
        keep = rng.choice(idx.size, size=max_points, replace=False)
        idx = idx[np.sort(keep)]
    return subset_cloud(pc, idx)


# ---------------------------------------------------------------------------
# detection-set JSON (evaluation input)


def box_to_dict(box: Box3D) -> dict:
    return {
        "x": box.x, "y": box.y, "z": box.z, "h": box.h, "w": box.w, "l": box.l,
        "theta": box.theta, "class_id": box.class_id, "score": box.score,
    }


def box_from_dict(d: dict) -> Box3D:
    return Box3D(
        x=float(d["x"]), y=float(d["y"]), z=float(d["z"]),
        h=float(d["h"]), w=float(d["w"]), l=float(d["l"]),
        theta=float(d["theta"]), class_id=int(d.get("class_id", 0)),
        score=float(d.get("score", 1.0)),
    )


def load_boxes_json(path: str) -> dict:
    """{frame id: [box dict, ...]} JSON file -> {frame id: [Box3D, ...]}."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise ValueError(f"{path}: expected an object mapping frame ids to box lists")
    out = {}
    for frame, rows in payload.items():
        if not isinstance(rows, list):
            raise ValueError(f"{path}: frame {frame!r} must map to a list")
        out[frame] = [box_from_dict(r) for r in rows]
    return out


def save_boxes_json(path: str, boxes: dict):
    payload = {frame: [box_to_dict(b) for b in rows] for frame, rows in boxes.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# object-sample database (directory of point files + JSON index)


def save_object_db(path: str, samples: list):
    import os

    from .augment import ObjectSample  # local import: augment depends on this module's peers

    os.makedirs(path, exist_ok=True)
    index = []
    for i, sample in enumerate(samples):
        assert isinstance(sample, ObjectSample)
        fname = f"object_{i:05d}.bin"
        with open(os.path.join(path, fname), "wb") as fh:
            fh.write(write_velodyne(sample.points))
        index.append(
            {"file": fname, "class_id": int(sample.class_id), "box": box_to_dict(sample.box)}
        )
    with open(os.path.join(path, "index.json"), "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2)
        fh.write("\n")


def load_object_db(path: str) -> list:
    import os

    from .augment import ObjectSample

    with open(os.path.join(path, "index.json"), encoding="utf-8") as fh:
        index = json.load(fh)
    samples = []
    for row in index:
        with open(os.path.join(path, row["file"]), "rb") as fh:
            points = parse_velodyne(fh.read())
        samples.append(
            ObjectSample(points=points, box=box_from_dict(row["box"]),
                         class_id=int(row["class_id"]))
        )
    return samples
