"""Rotated-box IoU, greedy matching, and interpolated average precision.

Detection protocol: score-descending one-to-one matching per frame,
precision interpolated at 11 or 40 recall positions, AP reported as a
percentage. Single difficulty bucket; occlusion/truncation filtering is
out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detection import Box3D


def bev_corners(box: Box3D) -> np.ndarray:
    """[4,2] top-view corners, counterclockwise."""
    c, s = np.cos(box.theta), np.sin(box.theta)
    dx, dy = box.l / 2.0, box.w / 2.0
    local = np.array([[dx, dy], [-dx, dy], [-dx, -dy], [dx, -dy]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.x, box.y])


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area; positive for counterclockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip a polygon by a convex counterclockwise one."""
    output = [tuple(p) for p in subject]
    m = len(clip)
    for e in range(m):
        if not output:
            break
        a = clip[e]
        b = clip[(e + 1) % m]
        edge = (b[0] - a[0], b[1] - a[1])
        inputs = output
        output = []

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        for i, cur in enumerate(inputs):
            prev = inputs[i - 1]
            cur_in = side(cur) >= 0.0
            prev_in = side(prev) >= 0.0
            if cur_in != prev_in:
                # intersection of segment prev->cur with the edge line
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = edge[0] * dy - edge[1] * dx
                if denom != 0.0:
                    s = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                    output.append((prev[0] + s * dx, prev[1] + s * dy))
            if cur_in:
                output.append(cur)
    return np.array(output) if output else np.empty((0, 2))


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Top-view IoU of two rotated boxes; degenerate boxes give 0."""
    ca, cb = bev_corners(a), bev_corners(b)
    area_a, area_b = polygon_area(ca), polygon_area(cb)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter = polygon_area(clip_polygon(ca, cb))
    inter = min(max(inter, 0.0), min(area_a, area_b))
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU: top-view intersection times vertical overlap."""
    ca, cb = bev_corners(a), bev_corners(b)
    area_a, area_b = polygon_area(ca), polygon_area(cb)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter_bev = polygon_area(clip_polygon(ca, cb))
    inter_bev = min(max(inter_bev, 0.0), min(area_a, area_b))
    overlap = min(a.z + a.h / 2, b.z + b.h / 2) - max(a.z - a.h / 2, b.z - b.h / 2)
    inter = inter_bev * max(overlap, 0.0)
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: {0: 0.7, 1: 0.5, 2: 0.5})
    recall_positions: int = 40
    metric: str = "3d"  # "3d" or "bev"

    def __post_init__(self):
        if self.recall_positions not in (11, 40):
            raise ValueError("recall_positions must be 11 or 40")
        if self.metric not in ("3d", "bev"):
            raise ValueError("metric must be '3d' or 'bev'")
        for cid, thr in self.iou_thresholds.items():
            if not 0.0 < thr <= 1.0:
                raise ValueError(f"threshold for class {cid} must lie in (0,1]")

    @property
    def positions(self) -> np.ndarray:
        if self.recall_positions == 11:
            return np.linspace(0.0, 1.0, 11)
        return np.arange(1, 41) / 40.0


def _match_class(dets: dict, gts: dict, threshold: float, metric: str):
    """Flatten, sort by score, greedily match one-to-one per frame.

    Returns (tp flags in score order, total ground-truth count). Score
    ties keep input order (stable sort).
    """
    iou = iou_3d if metric == "3d" else bev_iou
    flat = []
    for frame, boxes in sorted(dets.items()):
        flat.extend((frame, box) for box in boxes)
    scores = np.array([box.score for _, box in flat])
    order = np.argsort(-scores, kind="stable")
    unmatched = {frame: list(boxes) for frame, boxes in gts.items()}
    total_gt = sum(len(b) for b in gts.values())
    tp = np.zeros(len(flat), dtype=bool)
    for rank, oi in enumerate(order):
        frame, det = flat[oi]
        pool = unmatched.get(frame, [])
        best, best_iou = None, threshold
        for gi, gt in enumerate(pool):
            v = iou(det, gt)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = gi, v
        if best is not None:
            pool.pop(best)
            tp[rank] = True
    return tp, total_gt


def average_precision(dets: dict, gts: dict, cfg: EvalConfig, class_id: int):
    """Interpolated AP (percent) for one class plus its PR samples.

    dets/gts map frame ids to Box3D lists (any classes); boxes of other
    classes are filtered out here. Returns (ap or None, samples) where
    samples lists (recall position, interpolated precision). AP is None
    when the class has no ground truth.
    """
    dets_c = {f: [b for b in boxes if b.class_id == class_id] for f, boxes in dets.items()}
    gts_c = {f: [b for b in boxes if b.class_id == class_id] for f, boxes in gts.items()}
    total_gt = sum(len(b) for b in gts_c.values())
    if total_gt == 0:
        return None, []
    threshold = cfg.iou_thresholds.get(class_id)
    if threshold is None:
        raise KeyError(f"no IoU threshold configured for class {class_id}")
    tp, _ = _match_class(dets_c, gts_c, threshold, cfg.metric)
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    precision = cum_tp / ranks if len(tp) else np.empty(0)
    recall = cum_tp / total_gt if len(tp) else np.empty(0)
    samples = []
    for r in cfg.positions:
        mask = recall >= r - 1e-12
        p = float(np.max(precision[mask])) if np.any(mask) else 0.0
        samples.append((float(r), p))
    ap = float(np.mean([p for _, p in samples]) * 100.0)
    return ap, samples


def emit_pr_curve(samples: list, csv_path: str, svg_path: str):
    """Write PR samples as a CSV table and a single-polyline SVG plot."""
    if not samples:
        raise ValueError("no PR samples to emit")
    lines = ["recall,precision"]
    lines += [f"{r:.6f},{p:.6f}" for r, p in samples]
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    # plot area: x in [60, 620], y in [20, 440], y axis flipped
    def sx(r):
        return 60.0 + 560.0 * r

    def sy(p):
        return 440.0 - 420.0 * p

    pts = " ".join(f"{sx(r):.2f},{sy(p):.2f}" for r, p in samples)
    svg = (
        '<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 640 480">\n'
        '<rect width="640" height="480" fill="white"/>\n'
        '<line x1="60" y1="440" x2="620" y2="440" stroke="black"/>\n'
        '<line x1="60" y1="20" x2="60" y2="440" stroke="black"/>\n'
        '<text x="320" y="470" text-anchor="middle" font-size="14">recall</text>\n'
        '<text x="20" y="230" font-size="14" transform="rotate(-90 20 230)" '
        'text-anchor="middle">precision</text>\n'
        f'<polyline points="{pts}" fill="none" stroke="crimson" stroke-width="2"/>\n'
        "</svg>\n"
    )
    with open(svg_path, "w", encoding="utf-8") as fh:
        fh.write(svg)


def greedy_nms(boxes: list, threshold: float = 0.3) -> list:
    """Indices of boxes kept by score-descending top-view suppression."""
    scores = np.array([b.score for b in boxes])
    order = np.argsort(-scores, kind="stable")
    kept = []
    for i in order:
        if all(bev_iou(boxes[i], boxes[j]) <= threshold for j in kept):
            kept.append(int(i))
    return kept
