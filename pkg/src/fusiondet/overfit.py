"""Head-only overfit on one synthetic frame.

The two-branch backbone runs once with random frozen weights; the
trainable surface is every head downstream of it: foreground
segmentation, the per-point box regressor, the refinement classifier
and regressor, and both contrastive projectors. Losses use the
package's analytic gradients, stepped with Adam. Overfitting a single
frame to full segmentation accuracy with a falling combined loss is
the end-to-end health check for the loss stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import build_point_pairs, crop_object, gt_paste
from .config import PipelineConfig, scaled_config
from .contrastive import (
    MemoryBank,
    build_object_pairs,
    momentum_update,
    object_contrastive_loss,
    object_feature,
    object_feature_with_grad,
    point_contrastive_loss,
)
from .detection import (
    encode_box,
    generate_proposals,
    points_in_box,
    rcnn_loss,
    refine_head_forward,
    seg_head_forward,
    seg_loss,
    total_loss,
)
from .fusion import project_points, sample_image_features
from .kitti import subset_cloud
from .network import forward_full, init_network, make_codec
from .numerics import linear_backward, linear_forward, mlp_backward
from .pointops import PointCloud
from .synthetic import SyntheticSceneSpec, generate_synthetic


class Adam:
    """Adam over a flat list of arrays, updated in place."""

    def __init__(self, arrays, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = list(arrays)
        self.m = [np.zeros_like(a) for a in self.arrays]
        self.v = [np.zeros_like(a) for a in self.arrays]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, grads, lr: float):
        if len(grads) != len(self.arrays):
            raise ValueError("gradient list does not match parameter list")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m[...] = b1 * m + (1.0 - b1) * g
            v[...] = b2 * v + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            a -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _linear_arrays(p):
    return [p.weight, p.bias]


def _mlp_arrays(p):
    return _linear_arrays(p.first) + _linear_arrays(p.second)


@dataclass
class OverfitResult:
    history: list  # one dict per step with the loss components
    seg_accuracy: float
    first_total: float
    last_total: float
    pair_stats: dict = field(default_factory=dict)


def _valid_pixels(calib, coords, width, height):
    uvz = project_points(calib, coords)
    uv = uvz[:, :2]
    ok = (
        (uvz[:, 2] > 0)
        & (uv[:, 0] >= 0) & (uv[:, 0] <= width - 1)
        & (uv[:, 1] >= 0) & (uv[:, 1] <= height - 1)
    )
    return uv, ok


def _build_scene(cfg: PipelineConfig, seed: int):
    """Frame + pasted objects + pair set + the one frozen forward pass."""
    frame = generate_synthetic(SyntheticSceneSpec(seed=seed), cfg)
    donor = generate_synthetic(SyntheticSceneSpec(seed=seed + 1), cfg)
    db = []
    for lab in donor.labels:
        sample = crop_object(donor.cloud, lab.box, lab.box.class_id)
        if sample is not None:
            db.append(sample)
    augmented, aug_only, record = gt_paste(
        frame.cloud, frame.gt_boxes, db, max_paste=2, seed=seed
    )

    raw = frame.cloud
    if aug_only is None:
        kept_raw, combined = raw, raw
    else:
        # drop as many background rows as were pasted to hold the input size
        m = len(aug_only)
        bg = np.flatnonzero(raw.class_id < 0)
        if m > bg.size:
            raise ValueError("pasted more points than the background budget")
        rng = np.random.default_rng(seed + 17)
        dropped = bg[rng.choice(bg.size, size=m, replace=False)]
        keep = np.setdiff1d(np.arange(len(raw)), dropped)
        kept_raw = subset_cloud(raw, keep)
        aug_feats = augmented.features[len(raw):]
        combined = PointCloud(
            np.vstack([kept_raw.coords, aug_only.coords]),
            features=np.vstack([kept_raw.features, aug_feats]),
            class_id=np.concatenate([kept_raw.class_id, aug_only.class_id]),
        )

    pairs = build_point_pairs(
        kept_raw, aug_only, frame.calib,
        (cfg.image_width, cfg.image_height),
        kept_raw.fg_score, t=cfg.score_threshold,
    )
    boxes = frame.gt_boxes + list(record.boxes)
    return frame, combined, kept_raw, aug_only, pairs, boxes


def run_overfit(
    cfg: PipelineConfig = None,
    seed: int = 0,
    steps: int = 200,
    lr: float = 0.02,
    log=None,
) -> OverfitResult:
    cfg = cfg or scaled_config()
    frame, combined, kept_raw, aug_only, pairs, boxes = _build_scene(cfg, seed)
    n_raw = len(kept_raw)
    codec = make_codec(cfg)

    params = init_network(np.random.default_rng(seed + 2), cfg)
    net = forward_full(cfg, params, combined, frame.image, frame.calib)
    final = net.final_feats  # frozen backbone output, [N, d]
    fused = net.fused

    fg = combined.class_id >= 0
    gt_of = np.full(len(combined), -1, dtype=np.int64)
    for bi, box in enumerate(boxes):
        inside = points_in_box(combined.coords, box)
        gt_of[inside & (gt_of < 0)] = bi
    if not np.array_equal(gt_of >= 0, fg):
        raise RuntimeError("box membership disagrees with point labels")

    # fixed contrastive tables
    anchor_rows = np.array(
        [i if kind == "raw" else n_raw + i for kind, i in pairs.anchor_ids],
        dtype=np.int64,
    )
    anchor_base = final[anchor_rows] if anchor_rows.size else np.zeros((0, final.shape[1]))
    pixel_base, _ = sample_image_features(fused, pairs.pixels)

    # object tables: raw objects seen by both branches, pasted objects point-only
    point_obj_rows, point_obj_classes = [], []
    image_obj_base, image_obj_classes = [], []
    aligned, virtual = [], []
    for box in frame.gt_boxes:
        rows = np.flatnonzero(points_in_box(combined.coords[:n_raw], box))
        if rows.size == 0:
            continue
        uv, ok = _valid_pixels(
            frame.calib, combined.coords[rows], cfg.image_width, cfg.image_height
        )
        if not np.any(ok):
            continue
        base, _ = sample_image_features(fused, uv[ok])
        aligned.append((len(point_obj_rows), len(image_obj_base)))
        point_obj_rows.append(rows)
        point_obj_classes.append(box.class_id)
        image_obj_base.append(base)
        image_obj_classes.append(box.class_id)
    if aug_only is not None:
        for box in boxes[len(frame.gt_boxes):]:
            rows = n_raw + np.flatnonzero(points_in_box(aug_only.coords, box))
            if rows.size == 0:
                continue
            virtual.append(len(point_obj_rows))
            point_obj_rows.append(rows)
            point_obj_classes.append(box.class_id)

    bank = MemoryBank(capacity=cfg.bank_capacity)
    mom_point = momentum_update(params.point_proj, params.point_proj, 1.0)
    mom_image = momentum_update(params.image_proj, params.image_proj, 1.0)

    trainables = (
        _mlp_arrays(params.seg.mlp)
        + _linear_arrays(params.rpn_box)
        + _linear_arrays(params.refine.cls_head)
        + _linear_arrays(params.refine.box_head)
        + _linear_arrays(params.point_proj)
        + _linear_arrays(params.image_proj)
    )
    opt = Adam(trainables)
    k_prop, k_rcnn = 32, 8
    history = []

    for step in range(steps):
        rng_step = np.random.default_rng(1_000_003 * seed + step)
        s = seg_head_forward(params.seg, final)
        l_seg, d_s = seg_loss(s, fg, cfg.focal_alpha, cfg.focal_gamma)

        # point-level proposal loss: objectness on top-k points, boxes on positives
        prop = generate_proposals(combined, s, k_prop)
        labels = fg[prop].astype(np.float64)
        pos_rows = prop[fg[prop]]
        pos_vecs = linear_forward(params.rpn_box, final[pos_rows])
        pos_targets = [
            encode_box(codec, boxes[gt_of[r]], combined.coords[r]) for r in pos_rows
        ]
        l_pg, dprobs, dvecs = rcnn_loss(
            s[prop], labels, [v for v in pos_vecs], pos_targets, codec
        )
        d_s[prop] += dprobs
        g_rpn_w = np.zeros_like(params.rpn_box.weight)
        g_rpn_b = np.zeros_like(params.rpn_box.bias)
        if len(dvecs):
            dmat = np.stack(dvecs)
            dw, db, _ = linear_backward(params.rpn_box, final[pos_rows], dmat)
            g_rpn_w += dw
            g_rpn_b += db

        # refinement loss on pooled neighborhoods of the best proposals
        r_rows = prop[:k_rcnn]
        r_probs, r_pooled, r_vecs, r_targets, r_labels = [], [], [], [], []
        pos_pool = []
        for r in r_rows:
            center = combined.coords[r]
            near = np.flatnonzero(
                np.linalg.norm(combined.coords - center, axis=1) <= 3.0
            )
            local = PointCloud(combined.coords[near] - center, features=final[near])
            prob, vec, pooled = refine_head_forward(
                params.refine, local, rng_step, cap=cfg.proposal_points
            )
            r_probs.append(prob)
            r_pooled.append(pooled)
            r_labels.append(1.0 if fg[r] else 0.0)
            if fg[r]:
                r_vecs.append(vec)
                r_targets.append(encode_box(codec, boxes[gt_of[r]], center))
                pos_pool.append(pooled)
        l_rcnn, d_rprobs, d_rvecs = rcnn_loss(
            np.array(r_probs), np.array(r_labels), r_vecs, r_targets, codec
        )
        g_rcls_w = np.zeros_like(params.refine.cls_head.weight)
        g_rcls_b = np.zeros_like(params.refine.cls_head.bias)
        g_rbox_w = np.zeros_like(params.refine.box_head.weight)
        g_rbox_b = np.zeros_like(params.refine.box_head.bias)
        for i, pooled in enumerate(r_pooled):
            dz = d_rprobs[i] * r_probs[i] * (1.0 - r_probs[i])
            g_rcls_w += dz * pooled[None, :]
            g_rcls_b += dz
        for dvec, pooled in zip(d_rvecs, pos_pool):
            g_rbox_w += np.outer(dvec, pooled)
            g_rbox_b += dvec

        # point-level contrast through the two projectors
        g_pp_w = np.zeros_like(params.point_proj.weight)
        g_pp_b = np.zeros_like(params.point_proj.bias)
        g_ip_w = np.zeros_like(params.image_proj.weight)
        g_ip_b = np.zeros_like(params.image_proj.bias)
        a_proj = linear_forward(params.point_proj, anchor_base)
        p_proj = linear_forward(params.image_proj, pixel_base)
        l_clp, d_a, d_p = point_contrastive_loss(
            a_proj, p_proj, pairs, cfg.tau, cfg.denominator_includes_positive
        )
        if anchor_rows.size:
            dw, db, _ = linear_backward(params.point_proj, anchor_base, d_a)
            g_pp_w += dw
            g_pp_b += db
            dw, db, _ = linear_backward(params.image_proj, pixel_base, d_p)
            g_ip_w += dw
            g_ip_b += db

        # object-level contrast; the bank grows underneath it
        opairs = build_object_pairs(
            point_obj_classes, image_obj_classes, aligned, virtual, bank
        )
        p_objs, p_backs, p_inputs = [], [], []
        for rows in point_obj_rows:
            proj = linear_forward(params.point_proj, final[rows])
            gvec, back = object_feature_with_grad(proj)
            p_objs.append(gvec)
            p_backs.append(back)
            p_inputs.append((rows, proj))
        i_objs, i_backs = [], []
        for base in image_obj_base:
            proj = linear_forward(params.image_proj, base)
            gvec, back = object_feature_with_grad(proj)
            i_objs.append(gvec)
            i_backs.append(back)
        l_clo = 0.0
        if p_objs and opairs.positives:
            l_clo, d_po, d_io = object_contrastive_loss(
                np.stack(p_objs), np.stack(i_objs), opairs, cfg.tau,
                cfg.denominator_includes_positive,
            )
            for o, (rows, _) in enumerate(p_inputs):
                if not np.any(d_po[o]):
                    continue
                d_rows = p_backs[o](d_po[o])
                dw, db, _ = linear_backward(params.point_proj, final[rows], d_rows)
                g_pp_w += dw
                g_pp_b += db
            for o, base in enumerate(image_obj_base):
                if not np.any(d_io[o]):
                    continue
                d_rows = i_backs[o](d_io[o])
                dw, db, _ = linear_backward(params.image_proj, base, d_rows)
                g_ip_w += dw
                g_ip_b += db

        l_tot = total_loss(l_seg + l_pg, l_rcnn, l_clp, l_clo, cfg.lambda_contrast)

        # segmentation head backward collects both score consumers
        dz = (d_s * s * (1.0 - s))[:, None]
        (g_s1w, g_s1b), (g_s2w, g_s2b), _ = mlp_backward(params.seg.mlp, final, dz)

        opt.step(
            [g_s1w, g_s1b, g_s2w, g_s2b, g_rpn_w, g_rpn_b,
             g_rcls_w, g_rcls_b, g_rbox_w, g_rbox_b,
             g_pp_w, g_pp_b, g_ip_w, g_ip_b],
            lr,
        )

        # momentum encoders feed the bank, never the optimizer
        mom_point = momentum_update(mom_point, params.point_proj, cfg.momentum)
        mom_image = momentum_update(mom_image, params.image_proj, cfg.momentum)
        for rows, cid in zip(point_obj_rows, point_obj_classes):
            bank.enqueue(cid, "point", object_feature(linear_forward(mom_point, final[rows])))
        for base, cid in zip(image_obj_base, image_obj_classes):
            bank.enqueue(cid, "image", object_feature(linear_forward(mom_image, base)))

        row = {
            "step": step, "seg": l_seg, "pg": l_pg, "rcnn": l_rcnn,
            "clp": l_clp, "clo": l_clo, "total": l_tot,
        }
        history.append(row)
        if log is not None:
            log(
                f"step {step:3d}  seg {l_seg:9.4f}  pg {l_pg:8.4f}  "
                f"rcnn {l_rcnn:8.4f}  clp {l_clp:8.4f}  clo {l_clo:8.4f}  "
                f"total {l_tot:9.4f}"
            )

    s = seg_head_forward(params.seg, final)
    accuracy = float(np.mean((s > 0.5) == fg))
    return OverfitResult(
        history=history,
        seg_accuracy=accuracy,
        first_total=history[0]["total"],
        last_total=history[-1]["total"],
        pair_stats=pairs.stats(),
    )
