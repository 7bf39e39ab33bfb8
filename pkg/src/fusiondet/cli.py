"""Command line surface.

Exit codes: 0 success, 1 verification failure (selftest, gradcheck,
forward trace mismatch), 2 for unusable input (bad flags, malformed
files).

Commands:
  selftest   quick invariant battery, no files needed
  gradcheck  analytic gradients vs central finite differences
  synth      write a synthetic frame directory (scene/image/calib/labels)
  makedb     cut labeled objects out of a frame into a sample database
  augment    paste database objects into a scene
  pairs      point-pair statistics for the contrastive stage
  project    sensor points -> image plane CSV
  forward    run the backbone, print the shape trace and timing
  overfit    single-frame head training run
  eval       AP tables and PR curves from detection/ground-truth JSON
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .augment import build_point_pairs, crop_object, gt_paste
from .config import load_config, scaled_config
from .contrastive import MemoryBank, momentum_update, paired_contrastive_loss
from .detection import (
    Box3D,
    DEFAULT_ANCHORS,
    encode_box,
    decode_box,
    points_in_box,
    rcnn_loss,
    seg_loss,
)
from .evalkit import EvalConfig, average_precision, bev_iou, emit_pr_curve
from .fusion import project_points
from .kitti import (
    CLASS_IDS,
    load_boxes_json,
    load_object_db,
    parse_calib,
    parse_labels,
    parse_velodyne,
    save_object_db,
    write_calib,
    write_labels,
    write_velodyne,
)
from .network import (
    forward_full,
    format_trace,
    init_network,
    make_codec,
    trace_shapes,
)
from .numerics import finite_diff_grad, relative_error
from .overfit import run_overfit
from .pointops import PointCloud, farthest_point_sample, feature_propagation
from .synthetic import SyntheticSceneSpec, generate_synthetic


def _load_image(path: str) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def _save_image(path: str, image: np.ndarray):
    from PIL import Image

    arr = (np.clip(image, 0.0, 1.0).transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _read(path: str, binary: bool = False):
    with open(path, "rb" if binary else "r") as fh:
        return fh.read()


def _frame_paths(dirname: str) -> dict:
    return {
        "scene": os.path.join(dirname, "scene.bin"),
        "image": os.path.join(dirname, "image.png"),
        "calib": os.path.join(dirname, "calib.txt"),
        "labels": os.path.join(dirname, "labels.txt"),
    }


# ---------------------------------------------------------------------------
# selftest


def _check_matmul():
    from .numerics import matmul

    out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0, 6.0], [7.0, 8.0]]))
    assert np.allclose(out, [[19.0, 22.0], [43.0, 50.0]], atol=1e-12)


def _check_softmax():
    from .numerics import softmax

    out = softmax(np.array([0.0, np.log(2.0)]), temperature=1.0)
    assert np.allclose(out, [1.0 / 3.0, 2.0 / 3.0], atol=1e-12)


def _check_fps():
    pc = PointCloud(np.array([[0.0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [10.0, 0, 0]]))
    assert farthest_point_sample(pc, 2).tolist() == [0, 3]


def _check_feature_propagation():
    src = PointCloud(
        np.array([[1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]]),
        features=np.array([[3.0], [6.0], [9.0]]),
    )
    out = feature_propagation(src, np.array([[1.0, 0, 0]]))
    assert abs(out[0, 0] - 3.0) < 1e-12  # coincident point copies exactly
    out = feature_propagation(src, np.array([[0.0, 0, 0]]))
    expected = (3.0 + 6.0 / 4.0 + 9.0 / 9.0) / (1.0 + 1.0 / 4.0 + 1.0 / 9.0)
    assert abs(out[0, 0] - expected) < 1e-12


def _check_codec_roundtrip():
    codec = make_codec(scaled_config())
    rng = np.random.default_rng(7)
    for _ in range(40):
        cid = int(rng.integers(0, 3))
        ah, aw, al = DEFAULT_ANCHORS[cid]
        anchor = rng.uniform(-5, 5, 3)
        gt = Box3D(
            x=anchor[0] + rng.uniform(-1.4, 1.4),
            y=anchor[1] + rng.uniform(-1.4, 1.4),
            z=anchor[2] + rng.uniform(-0.8, 0.8),
            h=ah * rng.uniform(0.8, 1.2), w=aw * rng.uniform(0.8, 1.2),
            l=al * rng.uniform(0.8, 1.2),
            theta=rng.uniform(-np.pi + 1e-6, np.pi), class_id=cid,
        )
        back = decode_box(codec, encode_box(codec, gt, anchor), anchor, cid)
        for a, b in (
            (gt.x, back.x), (gt.y, back.y), (gt.z, back.z),
            (gt.h, back.h), (gt.w, back.w), (gt.l, back.l), (gt.theta, back.theta),
        ):
            assert abs(a - b) < 1e-9, f"{a} vs {b}"


def _check_momentum():
    theta = np.zeros(1)
    target = np.ones(1)
    for k in range(1, 51):
        theta = momentum_update(theta, target, 0.999)
        assert abs(theta[0] - (1.0 - 0.999 ** k)) <= 1e-12


def _check_bank_fifo():
    bank = MemoryBank(capacity=4)
    for i in range(5):
        v = np.zeros(5)
        v[i] = 2.0  # distinct direction per push; bank stores them unit-length
        bank.enqueue(0, "point", v)
    assert bank.length(0, "point") == 4
    feats = bank.features(0, "point")
    assert feats.shape == (4, 5)
    assert feats[0, 0] == 0.0 and feats[0, 1] == 1.0  # oldest push evicted
    assert feats[-1, 4] == 1.0


def _check_bev_iou():
    a = Box3D(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0)
    b = Box3D(0.5, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0)
    assert abs(bev_iou(a, b) - 1.0 / 3.0) < 1e-12


def _check_ap_hand_case():
    gts = {"f": [Box3D(float(i) * 10.0, 0, 0, 1, 1, 1, 0.0) for i in range(3)]}
    dets = {
        "f": [
            Box3D(0.0, 0, 0, 1, 1, 1, 0.0, score=0.9),
            Box3D(100.0, 0, 0, 1, 1, 1, 0.0, score=0.8),
            Box3D(10.0, 0, 0, 1, 1, 1, 0.0, score=0.7),
        ]
    }
    ap11, _ = average_precision(dets, gts, EvalConfig(recall_positions=11), 0)
    ap40, _ = average_precision(dets, gts, EvalConfig(recall_positions=40), 0)
    assert abs(ap11 - 600.0 / 11.0) < 1e-9, ap11
    assert abs(ap40 - 1300.0 / 24.0) < 1e-9, ap40


def _check_contrastive_values():
    e1 = np.array([[1.0, 0.0]])
    e2 = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss, _, _ = paired_contrastive_loss(e1, e2, [(0, 0)], {0: np.array([1])}, 0.07)
    assert abs(loss - (-1.0 / 0.07)) < 1e-9
    same = np.array([[1.0, 0.0], [1.0, 0.0]])
    loss, _, _ = paired_contrastive_loss(
        e1, same, [(0, 0)], {0: np.array([1])}, 0.07, include_positive=True
    )
    assert abs(loss - np.log(2.0)) < 1e-12


def _check_paste_disjoint():
    cfg = scaled_config()
    frame = generate_synthetic(SyntheticSceneSpec(seed=3), cfg)
    donor = generate_synthetic(SyntheticSceneSpec(seed=4), cfg)
    db = [
        s for s in (
            crop_object(donor.cloud, lab.box, lab.box.class_id) for lab in donor.labels
        ) if s is not None
    ]
    _, _, record = gt_paste(frame.cloud, frame.gt_boxes, db, max_paste=4, seed=3)
    placed = frame.gt_boxes + list(record.boxes)
    for i in range(len(placed)):
        for j in range(i + 1, len(placed)):
            assert bev_iou(placed[i], placed[j]) == 0.0


def _check_gradcheck_mini():
    err = _gradcheck_once("focal", np.random.default_rng(11))
    assert err <= 1e-4, err


_SELFTESTS = [
    ("matmul", _check_matmul),
    ("softmax", _check_softmax),
    ("farthest-point-sampling", _check_fps),
    ("feature-propagation", _check_feature_propagation),
    ("box-codec-roundtrip", _check_codec_roundtrip),
    ("momentum-convergence", _check_momentum),
    ("bank-eviction", _check_bank_fifo),
    ("bev-iou", _check_bev_iou),
    ("ap-hand-case", _check_ap_hand_case),
    ("contrastive-values", _check_contrastive_values),
    ("paste-disjoint", _check_paste_disjoint),
    ("focal-gradient", _check_gradcheck_mini),
]


def cmd_selftest(args) -> int:
    failures = 0
    for name, fn in _SELFTESTS:
        try:
            fn()
        except Exception as exc:  # report and keep going
            failures += 1
            print(f"FAIL {name}: {exc}")
        else:
            print(f"PASS {name}")
    print(f"{len(_SELFTESTS) - failures}/{len(_SELFTESTS)} checks passed")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# gradcheck


def _gradcheck_once(loss: str, rng: np.random.Generator) -> float:
    codec = make_codec(scaled_config())
    if loss == "focal":
        n = 12
        p = rng.uniform(0.05, 0.95, n)
        fg = rng.random(n) < 0.5
        analytic = seg_loss(p, fg)[1]
        num = finite_diff_grad(lambda x: seg_loss(x, fg)[0], p)
        return relative_error(analytic, num)
    if loss == "box":
        cid = int(rng.integers(0, 3))
        ah, aw, al = DEFAULT_ANCHORS[cid]
        anchor = rng.uniform(-3, 3, 3)
        gt = Box3D(
            x=anchor[0] + rng.uniform(-1.3, 1.3), y=anchor[1] + rng.uniform(-1.3, 1.3),
            z=anchor[2] + rng.uniform(-0.7, 0.7), h=ah, w=aw, l=al,
            theta=rng.uniform(-3.0, 3.0), class_id=cid,
        )
        targets = encode_box(codec, gt, anchor)
        vec = rng.normal(size=codec.prediction_width)
        from .detection import box_loss_vec

        analytic = box_loss_vec(codec, vec, targets)[1]
        num = finite_diff_grad(lambda x: box_loss_vec(codec, x, targets)[0], vec)
        return relative_error(analytic, num)
    if loss == "rcnn":
        k = 6
        probs = rng.uniform(0.05, 0.95, k)
        labels = np.zeros(k)
        labels[rng.choice(k, size=2, replace=False)] = 1.0
        pos = int(labels.sum())
        w = codec.prediction_width
        vecs = rng.normal(size=(pos, w))
        cid = int(rng.integers(0, 3))
        ah, aw, al = DEFAULT_ANCHORS[cid]
        anchor = np.zeros(3)
        targets = [
            encode_box(
                codec,
                Box3D(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.5, 0.5),
                      ah, aw, al, rng.uniform(-3, 3), class_id=cid),
                anchor,
            )
            for _ in range(pos)
        ]

        def f(x):
            pr = x[:k]
            vs = x[k:].reshape(pos, w)
            return rcnn_loss(pr, labels, [v for v in vs], targets, codec)[0]

        _, dprobs, dvecs = rcnn_loss(probs, labels, [v for v in vecs], targets, codec)
        analytic = np.concatenate([dprobs] + [d for d in dvecs])
        num = finite_diff_grad(f, np.concatenate([probs, vecs.ravel()]))
        return relative_error(analytic, num)
    if loss in ("clp", "clo"):
        a_n, t_n, e = 3, 5, 6

        def draw(n):
            # bounded norms keep every denominator weight well above the
            # finite-difference noise floor
            v = rng.normal(size=(n, e))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            return v * rng.uniform(0.5, 2.0, size=(n, 1))

        anchors, targets = draw(a_n), draw(t_n)
        tau = float(rng.uniform(0.2, 1.0))
        positives = [(i, int(rng.integers(0, t_n))) for i in range(a_n)]
        negatives = {}
        const = draw(4) if loss == "clo" else None
        for i, j in positives:
            rows = [int(r) for r in rng.choice(t_n, size=2, replace=False) if r != j]
            entries = [("t", r) for r in rows] or [("t", (j + 1) % t_n)]
            if loss == "clo":
                entries.append(("const", int(rng.integers(0, 4))))
            negatives[i] = entries
        include = bool(rng.integers(0, 2))

        def f(x):
            a = x[: a_n * e].reshape(a_n, e)
            t = x[a_n * e:].reshape(t_n, e)
            return paired_contrastive_loss(
                a, t, positives, negatives, tau, const=const, include_positive=include
            )[0]

        _, d_a, d_t = paired_contrastive_loss(
            anchors, targets, positives, negatives, tau, const=const,
            include_positive=include,
        )
        analytic = np.concatenate([d_a.ravel(), d_t.ravel()])
        num = finite_diff_grad(f, np.concatenate([anchors.ravel(), targets.ravel()]))
        return relative_error(analytic, num)
    raise ValueError(f"unknown loss {loss!r}")


def cmd_gradcheck(args) -> int:
    losses = ["focal", "box", "rcnn", "clp", "clo"] if args.loss == "all" else [args.loss]
    rng = np.random.default_rng(args.seed)
    worst = {}
    for loss in losses:
        worst[loss] = max(_gradcheck_once(loss, rng) for _ in range(args.trials))
    ok = all(v <= args.tolerance for v in worst.values())
    print(json.dumps({
        "trials": args.trials, "tolerance": args.tolerance,
        "max_relative_error": {k: float(v) for k, v in worst.items()},
        "ok": ok,
    }, indent=2))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# data commands


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    frame = generate_synthetic(SyntheticSceneSpec(seed=args.seed), cfg)
    os.makedirs(args.out, exist_ok=True)
    paths = _frame_paths(args.out)
    with open(paths["scene"], "wb") as fh:
        fh.write(write_velodyne(frame.cloud))
    _save_image(paths["image"], frame.image)
    with open(paths["calib"], "w", encoding="utf-8") as fh:
        fh.write(write_calib(frame.calib))
    with open(paths["labels"], "w", encoding="utf-8") as fh:
        fh.write(write_labels(frame.labels, frame.calib))
    print(json.dumps({
        "out": args.out, "points": len(frame.cloud),
        "objects": len(frame.labels), "seed": args.seed,
    }))
    return 0


def _load_frame_dir(dirname: str):
    paths = _frame_paths(dirname)
    cloud = parse_velodyne(_read(paths["scene"], binary=True))
    calib = parse_calib(_read(paths["calib"]))
    image = _load_image(paths["image"]) if os.path.exists(paths["image"]) else None
    labels = (
        parse_labels(_read(paths["labels"]), calib)
        if os.path.exists(paths["labels"]) else []
    )
    return cloud, image, calib, labels


def cmd_makedb(args) -> int:
    cloud, _, _, labels = _load_frame_dir(args.frame)
    samples = []
    for lab in labels:
        if lab.excluded:
            continue
        sample = crop_object(cloud, lab.box, lab.box.class_id)
        if sample is not None:
            samples.append(sample)
    if not samples:
        print("error: no labeled objects with points", file=sys.stderr)
        return 2
    save_object_db(args.out, samples)
    print(json.dumps({"out": args.out, "objects": len(samples)}))
    return 0


def cmd_augment(args) -> int:
    cloud = parse_velodyne(_read(args.scene, binary=True))
    boxes = []
    if args.labels:
        if not args.calib:
            print("error: --labels requires --calib", file=sys.stderr)
            return 2
        calib = parse_calib(_read(args.calib))
        boxes = [lab.box for lab in parse_labels(_read(args.labels), calib) if not lab.excluded]
    db = load_object_db(args.db)
    augmented, _, record = gt_paste(cloud, boxes, db, max_paste=args.max_paste, seed=args.seed)
    with open(args.out, "wb") as fh:
        fh.write(write_velodyne(augmented))
    print(json.dumps(record.to_json_dict(), indent=2))
    return 0


def cmd_pairs(args) -> int:
    cloud = parse_velodyne(_read(args.scene, binary=True))
    calib = parse_calib(_read(args.calib))
    image = _load_image(args.image)
    height, width = image.shape[1], image.shape[2]
    rng = np.random.default_rng(args.seed)

    class_id = np.full(len(cloud), -1, dtype=np.int64)
    if args.labels:
        for lab in parse_labels(_read(args.labels), calib):
            if lab.excluded:
                continue
            inside = points_in_box(cloud.coords, lab.box)
            class_id[inside & (class_id < 0)] = lab.box.class_id
    fg = class_id >= 0
    # seeded stand-in confidences correlated with the labels
    scores = np.clip(
        np.where(fg, 0.9, 0.05) + rng.normal(0.0, 0.02, len(cloud)), 0.0, 1.0
    )
    raw = PointCloud(cloud.coords, features=cloud.features, fg_score=scores, class_id=class_id)

    aug_points = None
    if args.db:
        db = load_object_db(args.db)
        boxes = [lab.box for lab in parse_labels(_read(args.labels), calib)
                 if not lab.excluded] if args.labels else []
        _, aug_points, _ = gt_paste(raw, boxes, db, max_paste=args.max_paste, seed=args.seed)
    pairs = build_point_pairs(raw, aug_points, calib, (width, height), scores, t=args.threshold)
    print(json.dumps(pairs.stats(), indent=2))
    return 0


def cmd_project(args) -> int:
    cloud = parse_velodyne(_read(args.points, binary=True))
    calib = parse_calib(_read(args.calib))
    uvz = project_points(calib, cloud.coords)
    print("u,v,depth")
    for row in uvz:
        print(f"{row[0]:.6f},{row[1]:.6f},{row[2]:.6f}")
    return 0


def cmd_forward(args) -> int:
    cfg = load_config(args.config)
    if args.frame:
        cloud, image, calib, _ = _load_frame_dir(args.frame)
        if image is None:
            print("error: frame directory lacks image.png", file=sys.stderr)
            return 2
        if len(cloud) != cfg.input_points:
            print(
                f"error: frame has {len(cloud)} points, config wants {cfg.input_points}",
                file=sys.stderr,
            )
            return 2
    else:
        frame = generate_synthetic(SyntheticSceneSpec(seed=args.seed), cfg)
        cloud, image, calib = frame.cloud, frame.image, frame.calib
    params = init_network(np.random.default_rng(args.seed), cfg)
    result = forward_full(cfg, params, cloud, image, calib)
    expected = trace_shapes(cfg)
    print(format_trace(result.trace))
    print(f"forward time {result.seconds:.3f}s")
    if result.trace != expected:
        print("trace mismatch against the configured shapes", file=sys.stderr)
        print(format_trace(expected), file=sys.stderr)
        return 1
    print("trace matches configuration")
    return 0


def cmd_overfit(args) -> int:
    cfg = load_config(args.spec)
    result = run_overfit(cfg, seed=args.seed, steps=args.steps, lr=args.lr, log=print)
    summary = {
        "first_total": result.first_total,
        "last_total": result.last_total,
        "seg_accuracy": result.seg_accuracy,
        "pair_stats": result.pair_stats,
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_eval(args) -> int:
    dets = load_boxes_json(args.dets)
    gts = load_boxes_json(args.gts)
    cfg = EvalConfig(recall_positions=args.recall, metric=args.metric)
    prefix = args.out_prefix or os.path.splitext(args.dets)[0]
    table = {}
    for name, cid in sorted(CLASS_IDS.items(), key=lambda kv: kv[1]):
        ap, samples = average_precision(dets, gts, cfg, cid)
        if ap is None:
            print(f"{name:12s} AP: n/a (no ground truth)")
            table[name] = None
            continue
        csv_path = f"{prefix}_{name.lower()}_pr.csv"
        svg_path = f"{prefix}_{name.lower()}_pr.svg"
        emit_pr_curve(samples, csv_path, svg_path)
        print(f"{name:12s} AP: {ap:7.4f}  ({csv_path}, {svg_path})")
        table[name] = ap
    print(json.dumps({"recall_positions": args.recall, "metric": args.metric, "ap": table}))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusiondet", description="point/image fusion detection toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("selftest", help="run the built-in invariant battery")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("gradcheck", help="compare analytic and numeric gradients")
    p.add_argument("--loss", default="all",
                   choices=["all", "focal", "box", "rcnn", "clp", "clo"])
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic frame directory")
    p.add_argument("--config", default="scaled")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("makedb", help="build an object database from a frame")
    p.add_argument("--frame", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_makedb)

    p = sub.add_parser("augment", help="paste database objects into a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--labels")
    p.add_argument("--calib")
    p.add_argument("--max-paste", type=int, default=10)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("pairs", help="point-pair statistics")
    p.add_argument("--scene", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("-t", "--threshold", type=float, default=0.3)
    p.add_argument("--labels")
    p.add_argument("--db")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-paste", type=int, default=10)
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("project", help="project points into the image plane")
    p.add_argument("--calib", required=True)
    p.add_argument("--points", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("forward", help="run the backbone once")
    p.add_argument("--config", default="scaled")
    p.add_argument("--frame", help="frame directory from the synth command")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("overfit", help="train the heads on one synthetic frame")
    p.add_argument("--spec", default="scaled", help="config preset or file")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_overfit)

    p = sub.add_parser("eval", help="AP and PR curves from JSON box sets")
    p.add_argument("--dets", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--recall", type=int, default=40, choices=[11, 40])
    p.add_argument("--metric", default="3d", choices=["3d", "bev"])
    p.add_argument("--out-prefix")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
