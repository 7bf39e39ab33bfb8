"""Point-cloud-only object pasting and cross-modal pair construction.

Augmentation touches the point cloud alone: labeled objects cropped
from other scenes are pasted at their recorded poses when they collide
with nothing. The resulting image/point misalignment is repaired by
contrastive pairs built here and consumed in contrastive.py.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .detection import Box3D, points_in_box
from .evalkit import bev_iou
from .fusion import Calibration
from .pointops import PointCloud


@dataclass
class ObjectSample:
    """Points of one labeled object, stored in the box-local frame.

    Local frame: origin at the box center, x along the heading. The box
    keeps the recorded world pose so the sample can be re-pasted
    exactly where it was cut.
    """

    points: PointCloud
    box: Box3D
    class_id: int

    def __post_init__(self):
        local = self.points.coords
        half = np.array([self.box.l / 2, self.box.w / 2, self.box.h / 2])
        # slack absorbs float32 round trips through the on-disk format
        if np.any(np.abs(local) > half + 1e-5):
            raise ValueError("sample points must lie inside the box")

    def world_points(self) -> np.ndarray:
        c, s = np.cos(self.box.theta), np.sin(self.box.theta)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return self.points.coords @ rot.T + self.box.center


def crop_object(scene: PointCloud, box: Box3D, class_id: int) -> Optional[ObjectSample]:
    """Cut a labeled object out of a scene; None when the box is empty."""
    mask = points_in_box(scene.coords, box)
    if not np.any(mask):
        return None
    rel = scene.coords[mask] - box.center
    c, s = np.cos(box.theta), np.sin(box.theta)
    local = np.column_stack(
        [c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1], rel[:, 2]]
    )
    feats = scene.features[mask] if scene.features is not None else None
    return ObjectSample(PointCloud(local, features=feats), box, class_id)


@dataclass
class PasteRecord:
    boxes: list = field(default_factory=list)  # accepted Box3D, paste order
    class_ids: list = field(default_factory=list)
    point_ranges: list = field(default_factory=list)  # (lo, hi) rows in the output cloud
    rejected: int = 0

    def to_json_dict(self) -> dict:
        return {
            "pasted": [
                {
                    "class_id": cid,
                    "box": [b.x, b.y, b.z, b.h, b.w, b.l, b.theta],
                    "points": [int(lo), int(hi)],
                }
                for cid, b, (lo, hi) in zip(self.class_ids, self.boxes, self.point_ranges)
            ],
            "rejected": int(self.rejected),
        }


def gt_paste(
    scene: PointCloud,
    scene_boxes: list,
    db: list,
    max_paste: int = 10,
    seed: int = 0,
):
    """Paste collision-free database objects into a scene.

    Candidates are visited in a seeded class-stratified order at their
    recorded poses; any candidate whose box overlaps (BEV IoU > 0) an
    existing or already-pasted box is rejected. Returns
    (augmented cloud, aug-point cloud or None, PasteRecord).
    """
    rng = np.random.default_rng(seed)
    record = PasteRecord()
    if not db or max_paste < 1:
        return scene, None, record
    by_class: dict = {}
    for idx, sample in enumerate(db):
        by_class.setdefault(sample.class_id, []).append(idx)
    for ids in by_class.values():
        rng.shuffle(ids)
    # interleave classes so no class dominates the paste budget
    order = []
    pools = [by_class[c] for c in sorted(by_class)]
    for rank in range(max(len(p) for p in pools)):
        for pool in pools:
            if rank < len(pool):
                order.append(pool[rank])

    placed = list(scene_boxes)
    accepted = []
    cursor = len(scene)
    for idx in order:
        if len(accepted) >= max_paste:
            break
        sample = db[idx]
        if any(bev_iou(sample.box, other) > 0.0 for other in placed):
            record.rejected += 1
            continue
        placed.append(sample.box)
        accepted.append(sample)
        n = len(sample.points)
        record.boxes.append(sample.box)
        record.class_ids.append(sample.class_id)
        record.point_ranges.append((cursor, cursor + n))
        cursor += n
    if not accepted:
        return scene, None, record

    new_coords = [scene.coords] + [s.world_points() for s in accepted]
    feat_width = scene.features.shape[1] if scene.features is not None else None
    new_feats = None
    if feat_width is not None:
        blocks = [scene.features]
        for s in accepted:
            if s.points.features is not None and s.points.features.shape[1] == feat_width:
                blocks.append(s.points.features)
            else:
                blocks.append(np.zeros((len(s.points), feat_width)))
        new_feats = np.vstack(blocks)
    class_rows = None
    if scene.class_id is not None:
        class_rows = np.concatenate(
            [scene.class_id]
            + [np.full(len(s.points), s.class_id, dtype=np.int64) for s in accepted]
        )
    augmented = PointCloud(np.vstack(new_coords), features=new_feats, class_id=class_rows)
    aug_only = PointCloud(
        np.vstack([s.world_points() for s in accepted]),
        class_id=np.concatenate(
            [np.full(len(s.points), s.class_id, dtype=np.int64) for s in accepted]
        ),
    )
    return augmented, aug_only, record


@dataclass
class PairSet:
    """Anchor/pixel pairing for the point-level contrastive loss.

    Row a of the anchor table corresponds to anchor_ids[a]; pixel rows
    index the pixels table. Invariant: no pixel value serving as a
    positive for an anchor also appears among that anchor's negatives.
    """

    pixels: np.ndarray  # [P,2] (u, v)
    anchor_ids: list  # ("raw", point index) or ("aug", aug-point index)
    positives: list  # (anchor row, pixel row)
    negatives: dict  # anchor row -> int64 array of pixel rows
    skipped_no_match: int = 0
    skipped_no_negatives: int = 0
    dropped_oob: int = 0

    def stats(self) -> dict:
        return {
            "anchors": len(self.anchor_ids),
            "positives": len(self.positives),
            "negatives": int(sum(len(v) for v in self.negatives.values())),
            "skipped_no_match": self.skipped_no_match,
            "skipped_no_negatives": self.skipped_no_negatives,
            "dropped_oob": self.dropped_oob,
        }


def _project_or_nan(calib: Calibration, coords: np.ndarray, width: int, height: int):
    """(pixels [N,2], valid mask); behind-camera and out-of-image are invalid."""
    hom = np.hstack([coords, np.ones((coords.shape[0], 1))])
    img = hom @ calib.chain.T
    z = img[:, 2]
    safe = np.abs(z) >= 1e-9
    uv = np.full((coords.shape[0], 2), np.nan)
    uv[safe] = img[safe, :2] / z[safe, None]
    valid = (
        safe
        & (z > 0)
        & (uv[:, 0] >= 0)
        & (uv[:, 0] <= width - 1)
        & (uv[:, 1] >= 0)
        & (uv[:, 1] <= height - 1)
    )
    return uv, valid


def build_point_pairs(
    raw: PointCloud,
    aug_points: Optional[PointCloud],
    calib: Calibration,
    image_extents: tuple,
    seg_scores: np.ndarray,
    t: float = 0.3,
) -> PairSet:
    """Construct point-level positives and negatives.

    Raw foreground anchors pair positively with their own projection
    and negatively with projections of low-confidence points
    (score < t). Pasted anchors pair negatively with their own
    projection (the image has no such object) and positively with the
    projection of the highest-scoring same-class raw point. Out-of-image
    projections are dropped; anchors left without a positive or without
    negatives are skipped and counted.
    """
    width, height = image_extents
    seg_scores = np.asarray(seg_scores, dtype=np.float64)
    if seg_scores.shape != (len(raw),):
        raise ValueError("seg_scores must align with the raw cloud")
    if raw.class_id is None:
        raise ValueError("raw cloud must carry per-point class ids")

    raw_uv, raw_valid = _project_or_nan(calib, raw.coords, width, height)
    n_aug = 0 if aug_points is None else len(aug_points)
    if aug_points is not None:
        aug_uv, aug_valid = _project_or_nan(calib, aug_points.coords, width, height)
        pixels = np.vstack([raw_uv, aug_uv])
    else:
        pixels = raw_uv
    dropped = int(np.sum(~raw_valid)) + (int(np.sum(~aug_valid)) if n_aug else 0)

    low_rows = np.flatnonzero((seg_scores < t) & raw_valid)
    anchor_ids, positives, negatives = [], [], {}
    skipped_no_neg = 0
    skipped_no_match = 0

    def admit(anchor_key, pos_row, neg_rows):
        nonlocal skipped_no_neg
        pos_px = pixels[pos_row]
        keep = [r for r in neg_rows if not np.array_equal(pixels[r], pos_px)]
        if not keep:
            skipped_no_neg += 1
            return
        a = len(anchor_ids)
        anchor_ids.append(anchor_key)
        positives.append((a, int(pos_row)))
        negatives[a] = np.asarray(keep, dtype=np.int64)

    for i in np.flatnonzero(raw.class_id >= 0):
        if not raw_valid[i]:
            continue  # no positive projection: anchor unusable
        admit(("raw", int(i)), i, low_rows)

    if n_aug:
        scores_by_class = {}
        for j in range(n_aug):
            if not aug_valid[j]:
                continue
            cid = int(aug_points.class_id[j])
            if cid not in scores_by_class:
                same = np.flatnonzero((raw.class_id == cid) & raw_valid)
                if same.size:
                    best = same[np.argmax(seg_scores[same])]
                else:
                    best = None
                scores_by_class[cid] = best
            best = scores_by_class[cid]
            if best is None:
                skipped_no_match += 1
                continue
            # own projection is the negative; the confident raw point the positive
            admit(("aug", j), int(best), [len(raw) + j])

    return PairSet(
        pixels=pixels,
        anchor_ids=anchor_ids,
        positives=positives,
        negatives=negatives,
        skipped_no_match=skipped_no_match,
        skipped_no_negatives=skipped_no_neg,
        dropped_oob=dropped,
    )
