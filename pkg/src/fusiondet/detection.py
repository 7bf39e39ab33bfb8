"""Boxes, the bin-based box codec, detection heads, and supervised losses.

Every loss returns its analytic gradient alongside the value; the test
suite holds each one against central finite differences. Boxes live in
the sensor frame: x forward, y left, z up, yaw about z, length along
the heading, width across it, z at the box center.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    LinearParams,
    MlpParams,
    ShapeError,
    init_linear,
    init_mlp,
    mlp_forward,
    sigmoid,
    stable_softmax,
)
from .pointops import PointCloud, set_abstraction

TWO_PI = 2.0 * np.pi


def normalize_angle(theta: float) -> float:
    """Wrap into (-pi, pi]."""
    wrapped = (float(theta) + np.pi) % TWO_PI - np.pi
    if wrapped == -np.pi:
        wrapped = np.pi
    return wrapped


@dataclass
class Box3D:
    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    theta: float
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        if min(self.h, self.w, self.l) <= 0:
            raise ValueError("box dimensions must be positive")
        self.theta = normalize_angle(self.theta)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0,1]")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def volume(self) -> float:
        return self.h * self.w * self.l


def points_in_box(coords: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of coordinates inside the oriented box (boundary inclusive)."""
    rel = np.asarray(coords, dtype=np.float64) - box.center
    c, s = np.cos(box.theta), np.sin(box.theta)
    local_x = c * rel[:, 0] + s * rel[:, 1]
    local_y = -s * rel[:, 0] + c * rel[:, 1]
    return (
        (np.abs(local_x) <= box.l / 2)
        & (np.abs(local_y) <= box.w / 2)
        & (np.abs(rel[:, 2]) <= box.h / 2)
    )


# ---------------------------------------------------------------------------
# focal / segmentation loss


def focal_loss(p: float, is_foreground: bool, alpha: float = 0.25, gamma: float = 2.0):
    """Focal loss of one confidence and its derivative w.r.t. p.

    p' = p for foreground, 1-p otherwise; L = -alpha * (1-p')^gamma * log p',
    with p clamped to [1e-7, 1-1e-7] first.
    """
    p = float(np.clip(p, 1e-7, 1.0 - 1e-7))
    pt = p if is_foreground else 1.0 - p
    one_minus = 1.0 - pt
    loss = -alpha * one_minus**gamma * np.log(pt)
    # d/dpt: alpha * [gamma*(1-pt)^(gamma-1)*log(pt) - (1-pt)^gamma / pt]
    dpt = alpha * (gamma * one_minus ** (gamma - 1.0) * np.log(pt) - one_minus**gamma / pt)
    grad = dpt if is_foreground else -dpt
    return float(loss), float(grad)


def seg_loss(scores: np.ndarray, fg_mask: np.ndarray, alpha: float = 0.25, gamma: float = 2.0):
    """Sum of per-point focal losses; returns (scalar, d/dscores)."""
    scores = np.asarray(scores, dtype=np.float64)
    fg_mask = np.asarray(fg_mask, dtype=bool)
    if scores.shape != fg_mask.shape:
        raise ShapeError("scores and fg_mask lengths differ")
    p = np.clip(scores, 1e-7, 1.0 - 1e-7)
    pt = np.where(fg_mask, p, 1.0 - p)
    one_minus = 1.0 - pt
    loss = float(np.sum(-alpha * one_minus**gamma * np.log(pt)))
    dpt = alpha * (gamma * one_minus ** (gamma - 1.0) * np.log(pt) - one_minus**gamma / pt)
    grad = np.where(fg_mask, dpt, -dpt)
    return loss, grad


# ---------------------------------------------------------------------------
# bin codec

# mean KITTI object extents (h, w, l) used to normalize size residuals
DEFAULT_ANCHORS = {
    0: (1.53, 1.63, 3.88),  # car
    1: (1.76, 0.66, 0.84),  # pedestrian
    2: (1.73, 0.60, 1.76),  # cyclist
}


@dataclass
class BinCodec:
    """Discretized offsets for x, y, yaw plus normalized plain residuals."""

    extent: float = 1.5
    bins: int = 6
    theta_bins: int = 12
    anchors: dict = field(default_factory=lambda: dict(DEFAULT_ANCHORS))

    def __post_init__(self):
        if self.extent <= 0 or self.bins < 1 or self.theta_bins < 1:
            raise ValueError("codec parameters must be positive")

    @property
    def bin_width(self) -> float:
        return 2.0 * self.extent / self.bins

    @property
    def theta_width(self) -> float:
        return TWO_PI / self.theta_bins

    @property
    def prediction_width(self) -> int:
        """Length of a flat prediction vector: bin logits then 7 residuals."""
        return self.bins + self.bins + self.theta_bins + 7

    def anchor_dims(self, class_id: int):
        if class_id not in self.anchors:
            raise KeyError(f"no anchor dims for class {class_id}")
        return self.anchors[class_id]


@dataclass
class BoxTargets:
    bin_x: int
    bin_y: int
    bin_theta: int
    res_x: float
    res_y: float
    res_theta: float
    res_z: float
    res_h: float
    res_w: float
    res_l: float
    clamped: bool = False

    @property
    def residual_vector(self) -> np.ndarray:
        return np.array([self.res_x, self.res_y, self.res_theta,
                         self.res_z, self.res_h, self.res_w, self.res_l])


def _encode_binned(value: float, extent: float, bins: int):
    """(bin index, residual in bin widths, clamped flag) for one axis."""
    width = 2.0 * extent / bins
    clamped = not (-extent <= value <= extent)
    v = float(np.clip(value, -extent, extent))
    idx = min(int(np.floor((v + extent) / width)), bins - 1)
    center = -extent + (idx + 0.5) * width
    return idx, (v - center) / width, clamped


def encode_box(codec: BinCodec, gt: Box3D, anchor_center) -> BoxTargets:
    """Targets for a ground-truth box relative to an anchor point.

    x/y offsets and yaw are binned with in-bin residuals in [-0.5, 0.5]
    bin widths; z is a plain offset; sizes are (dim - anchor)/anchor.
    Offsets beyond the search range clamp to the boundary bin and set
    the clamped flag.
    """
    ax, ay, az = np.asarray(anchor_center, dtype=np.float64)
    bin_x, res_x, cx = _encode_binned(gt.x - ax, codec.extent, codec.bins)
    bin_y, res_y, cy = _encode_binned(gt.y - ay, codec.extent, codec.bins)
    # yaw lives in (-pi, pi]: shift to (0, 2pi] and bin
    tw = codec.theta_width
    bin_t = min(int(np.floor((gt.theta + np.pi) / tw)), codec.theta_bins - 1)
    t_center = -np.pi + (bin_t + 0.5) * tw
    res_t = (gt.theta - t_center) / tw
    ah, aw, al = codec.anchor_dims(gt.class_id)
    return BoxTargets(
        bin_x=bin_x, bin_y=bin_y, bin_theta=bin_t,
        res_x=res_x, res_y=res_y, res_theta=res_t,
        res_z=gt.z - az,
        res_h=(gt.h - ah) / ah, res_w=(gt.w - aw) / aw, res_l=(gt.l - al) / al,
        clamped=cx or cy,
    )


def decode_box(
    codec: BinCodec,
    targets: BoxTargets,
    anchor_center,
    class_id: int,
    score: float = 1.0,
) -> Box3D:
    """Inverse of encode_box; exact for in-range boxes."""
    ax, ay, az = np.asarray(anchor_center, dtype=np.float64)
    width = codec.bin_width
    x = ax - codec.extent + (targets.bin_x + 0.5) * width + targets.res_x * width
    y = ay - codec.extent + (targets.bin_y + 0.5) * width + targets.res_y * width
    tw = codec.theta_width
    theta = -np.pi + (targets.bin_theta + 0.5) * tw + targets.res_theta * tw
    ah, aw, al = codec.anchor_dims(class_id)
    return Box3D(
        x=x, y=y, z=az + targets.res_z,
        h=ah * (1.0 + targets.res_h), w=aw * (1.0 + targets.res_w),
        l=al * (1.0 + targets.res_l),
        theta=theta, class_id=class_id, score=score,
    )


# ---------------------------------------------------------------------------
# box loss


def smooth_l1(diff: float):
    """Huber-style penalty and derivative: 0.5 d^2 inside |d|<1, |d|-0.5 outside."""
    d = float(diff)
    if abs(d) < 1.0:
        return 0.5 * d * d, d
    return abs(d) - 0.5, float(np.sign(d))


def cross_entropy(logits: np.ndarray, target: int):
    """Softmax cross-entropy of one logit row; returns (value, d/dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    probs = stable_softmax(logits, axis=-1)
    loss = -float(np.log(max(probs[target], 1e-300)))
    grad = probs.copy()
    grad[target] -= 1.0
    return loss, grad


@dataclass
class BoxPrediction:
    """Raw head output: bin logits for x/y/yaw plus the 7 residuals."""

    logits_x: np.ndarray
    logits_y: np.ndarray
    logits_theta: np.ndarray
    residuals: np.ndarray  # order: x, y, theta, z, h, w, l

    @classmethod
    def from_vector(cls, codec: BinCodec, vec: np.ndarray) -> "BoxPrediction":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (codec.prediction_width,):
            raise ShapeError(
                f"prediction vector must have length {codec.prediction_width}"
            )
        b, t = codec.bins, codec.theta_bins
        return cls(
            logits_x=vec[:b],
            logits_y=vec[b : 2 * b],
            logits_theta=vec[2 * b : 2 * b + t],
            residuals=vec[2 * b + t :],
        )

    def decode(self, codec: BinCodec, anchor_center, class_id: int, score: float = 1.0):
        r = self.residuals
        targets = BoxTargets(
            bin_x=int(np.argmax(self.logits_x)),
            bin_y=int(np.argmax(self.logits_y)),
            bin_theta=int(np.argmax(self.logits_theta)),
            res_x=float(np.clip(r[0], -0.5, 0.5)),
            res_y=float(np.clip(r[1], -0.5, 0.5)),
            res_theta=float(np.clip(r[2], -0.5, 0.5)),
            res_z=float(r[3]), res_h=float(r[4]), res_w=float(r[5]), res_l=float(r[6]),
        )
        return decode_box(codec, targets, anchor_center, class_id, score)


def box_loss(pred: BoxPrediction, targets: BoxTargets):
    """Bin classification plus residual regression.

    L = sum over {x, y, yaw} of [CE(bin logits) + smoothL1(residual)]
      + sum over {z, h, w, l} of smoothL1(residual).
    Returns (scalar, gradient BoxPrediction of the same layout).
    """
    loss = 0.0
    ce_x, gx = cross_entropy(pred.logits_x, targets.bin_x)
    ce_y, gy = cross_entropy(pred.logits_y, targets.bin_y)
    ce_t, gt_ = cross_entropy(pred.logits_theta, targets.bin_theta)
    loss += ce_x + ce_y + ce_t
    target_res = targets.residual_vector
    dres = np.zeros(7)
    for i in range(7):
        val, d = smooth_l1(pred.residuals[i] - target_res[i])
        loss += val
        dres[i] = d
    grad = BoxPrediction(logits_x=gx, logits_y=gy, logits_theta=gt_, residuals=dres)
    return float(loss), grad


def box_loss_vec(codec: BinCodec, vec: np.ndarray, targets: BoxTargets):
    """box_loss on a flat prediction vector; gradient comes back flat too."""
    loss, g = box_loss(BoxPrediction.from_vector(codec, vec), targets)
    return loss, np.concatenate([g.logits_x, g.logits_y, g.logits_theta, g.residuals])


def rcnn_loss(
    probs: np.ndarray,
    labels: np.ndarray,
    pos_preds: list,
    pos_targets: list,
    codec: BinCodec,
):
    """Mean classification loss over all proposals plus mean box loss over positives.

    probs are per-proposal objectness confidences in (0,1); labels are
    {0,1}. pos_preds holds one flat prediction vector per positive (may
    be empty, in which case the box term is 0). Returns
    (scalar, d/dprobs, list of d/dvec).
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.size == 0:
        raise ValueError("proposal set must be nonempty")
    if probs.shape != labels.shape:
        raise ShapeError("probs and labels lengths differ")
    if len(pos_preds) != len(pos_targets):
        raise ShapeError("positive predictions and targets differ in count")
    p = np.clip(probs, 1e-7, 1.0 - 1e-7)
    ce = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    dprobs = (-(labels / p) + (1.0 - labels) / (1.0 - p)) / probs.size
    loss = float(np.mean(ce))
    dvecs = []
    if pos_preds:
        box_total = 0.0
        for vec, tgt in zip(pos_preds, pos_targets):
            val, dvec = box_loss_vec(codec, vec, tgt)
            box_total += val
            dvecs.append(dvec / len(pos_preds))
        loss += box_total / len(pos_preds)
    return loss, dprobs, dvecs


def total_loss(rpn: float, rcnn: float, cl_point: float, cl_object: float,
               lam: float = 0.15) -> float:
    """L_total = L_rpn + L_rcnn + lambda * (point + object contrastive)."""
    for v in (rpn, rcnn, cl_point, cl_object):
        if not np.isfinite(v):
            raise ValueError("loss components must be finite")
    return float(rpn + rcnn + lam * (cl_point + cl_object))


# ---------------------------------------------------------------------------
# heads


@dataclass
class SegHeadParams:
    mlp: MlpParams  # two FC layers; sigmoid applied on top


def init_seg_head(rng, in_dim: int, hidden: int = 64) -> SegHeadParams:
    return SegHeadParams(mlp=init_mlp(rng, in_dim, hidden, 1))


def seg_head_forward(params: SegHeadParams, feats: np.ndarray) -> np.ndarray:
    """Per-point foreground confidence in (0,1)."""
    return sigmoid(mlp_forward(params.mlp, feats))[..., 0]


@dataclass
class RefineHeadParams:
    sa_mlps: list  # 3 set-abstraction MlpParams
    cls_head: LinearParams  # pooled feature -> 1 logit
    box_head: LinearParams  # pooled feature -> codec prediction vector
    sa_points: list = field(default_factory=lambda: [128, 32, 1])
    sa_radii: list = field(default_factory=lambda: [0.4, 0.8, 1.6])
    sa_group: int = 16


def init_refine_head(rng, in_dim: int, codec: BinCodec, widths=(64, 64, 64)) -> RefineHeadParams:
    mlps = []
    d = in_dim
    for w in widths:
        mlps.append(init_mlp(rng, 3 + d, w, w))
        d = w
    return RefineHeadParams(
        sa_mlps=mlps,
        cls_head=init_linear(rng, 1, d),
        box_head=init_linear(rng, codec.prediction_width, d),
    )


def pool_proposal(
    params: RefineHeadParams, pc: PointCloud, rng: np.random.Generator, cap: int = 512
) -> np.ndarray:
    """Encode the points of one proposal into a single feature vector.

    At most cap points are kept (seeded subsample), then three
    set-abstraction stages reduce them to one encoded point.
    """
    if len(pc) > cap:
        keep = np.sort(rng.choice(len(pc), size=cap, replace=False))
        feats = None if pc.features is None else pc.features[keep]
        pc = PointCloud(pc.coords[keep], features=feats)
    current = pc
    for m, r, mlp in zip(params.sa_points, params.sa_radii, params.sa_mlps):
        m = min(m, len(current))
        current = set_abstraction(current, m, r, params.sa_group, mlp)
    return current.features.max(axis=0)


def refine_head_forward(
    params: RefineHeadParams, pc: PointCloud, rng: np.random.Generator, cap: int = 512
):
    """(objectness prob, flat box prediction vector) for one proposal's points."""
    pooled = pool_proposal(params, pc, rng, cap)
    prob = float(sigmoid(pooled @ params.cls_head.weight.T + params.cls_head.bias)[0])
    vec = pooled @ params.box_head.weight.T + params.box_head.bias
    return prob, vec, pooled


def generate_proposals(pc: PointCloud, scores: np.ndarray, top_k: int) -> np.ndarray:
    """Indices of the top-k highest-scoring points, score-descending.

    Ties resolve to the lower index via a stable sort on the negated
    scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return order[: min(top_k, len(order))]
