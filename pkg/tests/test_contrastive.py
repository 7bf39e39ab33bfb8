"""InfoNCE losses, object pooling, memory bank, momentum blending."""

import math

import numpy as np
import pytest
from oracles import infonce_oracle

from fusiondet.contrastive import (
    MemoryBank,
    ObjectPairs,
    build_object_pairs,
    l2_normalize,
    momentum_update,
    object_contrastive_loss,
    object_feature,
    object_feature_with_grad,
    paired_contrastive_loss,
    point_contrastive_loss,
)
from fusiondet.numerics import LinearParams, ShapeError, finite_diff_grad


def test_l2_normalize_rows():
    x = np.array([[3.0, 4.0], [0.0, 0.0]])
    out = l2_normalize(x)
    assert np.allclose(out[0], [0.6, 0.8])
    assert np.all(np.isfinite(out[1]))  # zero rows stay finite


def _random_case(seed, n_anchor=4, n_target=6, d=5, with_const=False):
    rng = np.random.default_rng(seed)
    anchors = rng.normal(size=(n_anchor, d))
    targets = rng.normal(size=(n_target, d))
    const = rng.normal(size=(3, d)) if with_const else None
    positives = [(a, int(rng.integers(n_target))) for a in range(n_anchor)]
    negatives = {}
    for a in range(n_anchor):
        rows = rng.choice(n_target, size=2, replace=False)
        entries = [int(r) for r in rows]
        if with_const:
            entries.append(("const", int(rng.integers(3))))
        negatives[a] = entries
    return anchors, targets, positives, negatives, const


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("include_positive", [False, True])
def test_paired_loss_matches_oracle(seed, include_positive):
    anchors, targets, positives, negatives, const = _random_case(
        seed, with_const=seed % 2 == 0
    )
    tau = 0.2 + 0.1 * seed
    loss, _, _ = paired_contrastive_loss(
        anchors, targets, positives, negatives, tau, const=const,
        include_positive=include_positive,
    )
    want = infonce_oracle(
        anchors, targets, positives, negatives, tau, const=const,
        include_positive=include_positive,
    )
    assert abs(loss - want) < 1e-9 * max(1.0, abs(want))


def test_paired_loss_pinned_orthogonal_negative():
    # positive similarity 1, one orthogonal negative: loss = -1/tau + log 1
    anchors = np.array([[2.0, 0.0]])  # normalization makes scale irrelevant
    targets = np.array([[5.0, 0.0], [0.0, 3.0]])
    loss, _, _ = paired_contrastive_loss(anchors, targets, [(0, 0)], {0: [1]}, 0.07)
    assert abs(loss - (-1.0 / 0.07)) < 1e-12


def test_paired_loss_pinned_log_two():
    # two negatives identical to the positive cancel the positive term
    anchors = np.array([[1.0, 0.0]])
    targets = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    loss, _, _ = paired_contrastive_loss(anchors, targets, [(0, 0)], {0: [1, 2]}, 1.0)
    assert abs(loss - math.log(2.0)) < 1e-12
    # same cancellation via the denominator's optional positive term
    loss, _, _ = paired_contrastive_loss(
        anchors, targets[:2], [(0, 0)], {0: [1]}, 0.07, include_positive=True
    )
    assert abs(loss - math.log(2.0)) < 1e-12


@pytest.mark.parametrize("include_positive", [False, True])
def test_paired_loss_gradients_match_finite_differences(include_positive):
    anchors, targets, positives, negatives, const = _random_case(7, with_const=True)
    tau = 0.4
    _, d_a, d_t = paired_contrastive_loss(
        anchors, targets, positives, negatives, tau, const=const,
        include_positive=include_positive,
    )

    def loss_of_anchors(flat):
        loss, _, _ = paired_contrastive_loss(
            flat.reshape(anchors.shape), targets, positives, negatives, tau,
            const=const, include_positive=include_positive,
        )
        return loss

    def loss_of_targets(flat):
        loss, _, _ = paired_contrastive_loss(
            anchors, flat.reshape(targets.shape), positives, negatives, tau,
            const=const, include_positive=include_positive,
        )
        return loss

    fd_a = finite_diff_grad(loss_of_anchors, anchors.ravel()).reshape(anchors.shape)
    fd_t = finite_diff_grad(loss_of_targets, targets.ravel()).reshape(targets.shape)
    assert np.allclose(d_a, fd_a, atol=1e-6)
    assert np.allclose(d_t, fd_t, atol=1e-6)


def test_paired_loss_const_rows_affect_value_but_not_gradients():
    anchors, targets, positives, negatives, const = _random_case(9, with_const=True)
    loss, d_a, d_t = paired_contrastive_loss(
        anchors, targets, positives, negatives, 0.3, const=const
    )
    bumped, _, _ = paired_contrastive_loss(
        anchors, targets, positives, negatives, 0.3, const=const + 0.5
    )
    assert bumped != loss
    assert d_a.shape == anchors.shape and d_t.shape == targets.shape


def test_paired_loss_validation():
    anchors = np.eye(2)
    targets = np.eye(2)
    with pytest.raises(ValueError):
        paired_contrastive_loss(anchors, targets, [(0, 0)], {0: []}, 0.1)
    with pytest.raises(ValueError):
        paired_contrastive_loss(anchors, targets, [(0, 0)], {}, 0.1)
    with pytest.raises(ValueError):
        paired_contrastive_loss(anchors, targets, [(0, 0)], {0: [1]}, 0.0)


def test_point_loss_checks_table_alignment():
    class Pairs:
        anchor_ids = ["a"]
        pixels = np.zeros((2, 2))
        positives = [(0, 0)]
        negatives = {0: [1]}

    with pytest.raises(ShapeError):
        point_contrastive_loss(np.zeros((2, 3)), np.zeros((2, 3)), Pairs())
    with pytest.raises(ShapeError):
        point_contrastive_loss(np.zeros((1, 3)), np.zeros((3, 3)), Pairs())
    loss, d_p, d_i = point_contrastive_loss(
        np.array([[1.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        Pairs(), tau=0.07,
    )
    assert abs(loss - (-1.0 / 0.07)) < 1e-12


def test_object_feature_is_normalized_channel_max():
    rows = np.array([[1.0, -2.0, 3.0], [0.5, 4.0, -1.0]])
    pooled = np.array([1.0, 4.0, 3.0])
    assert np.allclose(object_feature(rows), pooled / np.linalg.norm(pooled))
    with pytest.raises(ValueError):
        object_feature(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        object_feature(np.zeros(3))


def test_object_feature_grad_routes_to_first_maximizer():
    rows = np.array([[2.0, 1.0], [2.0, 5.0], [0.0, 5.0]])
    g, backward = object_feature_with_grad(rows)
    assert np.allclose(g, object_feature(rows))
    d_rows = backward(np.array([1.0, 1.0]))
    # channel 0 ties rows 0/1, channel 1 ties rows 1/2: first maximizer wins
    assert d_rows[0, 0] != 0.0 and d_rows[1, 0] == 0.0
    assert d_rows[1, 1] != 0.0 and d_rows[2, 1] == 0.0


def test_object_feature_grad_matches_finite_differences():
    rng = np.random.default_rng(3)
    rows = rng.normal(size=(4, 5))
    probe = rng.normal(size=5)
    _, backward = object_feature_with_grad(rows)
    got = backward(probe)
    fd = finite_diff_grad(
        lambda flat: float(probe @ object_feature(flat.reshape(rows.shape))),
        rows.ravel(),
    ).reshape(rows.shape)
    assert np.allclose(got, fd, atol=1e-6)


# ---------------------------------------------------------------------------
# object pair construction


def _filled_bank():
    bank = MemoryBank(capacity=4)
    bank.enqueue(1, "point", np.array([0.0, 1.0, 0.0]))
    bank.enqueue(1, "image", np.array([0.0, 0.0, 1.0]))
    bank.enqueue(0, "point", np.array([1.0, 0.0, 0.0]))
    return bank


def test_build_object_pairs_aligned_and_virtual():
    bank = _filled_bank()
    pairs = build_object_pairs(
        point_classes=[0, 1, 0],
        image_classes=[0, 1],
        aligned=[(0, 0), (1, 1)],
        virtual_rows=[2],
        bank=bank,
    )
    assert (0, 0) in pairs.positives and (1, 1) in pairs.positives
    # virtual row pairs with every same-class image object
    assert (2, 0) in pairs.positives
    # class-0 anchors contrast against the class-1 image object and the
    # class-1 bank entries; the class-1 anchor against the class-0 ones
    image_negs = {a: [r for kind, r in e if kind == "image"] for a, e in pairs.negatives.items()}
    assert image_negs[0] == [1] and image_negs[2] == [1] and image_negs[1] == [0]
    for a, cls, n_bank in ((0, 0, 2), (1, 1, 1), (2, 0, 2)):
        rows = [r for kind, r in pairs.negatives[a] if kind == "const"]
        assert len(rows) == n_bank
        block = pairs.const[rows]
        assert np.allclose(block, bank.other_class_features(cls))
    assert pairs.skipped_no_negatives == 0


def test_build_object_pairs_without_bank_and_skips():
    pairs = build_object_pairs([0, 0], [0], [(0, 0)], [1], bank=None)
    assert pairs.positives == [] and pairs.const is None
    assert pairs.skipped_no_negatives == 2
    with pytest.raises(ValueError):
        build_object_pairs([0], [1], [(0, 0)], [], bank=None)


def test_object_loss_uses_const_negatives():
    bank = _filled_bank()
    pairs = build_object_pairs([0], [0, 1], [(0, 0)], [], bank=bank)
    rng = np.random.default_rng(5)
    p_feats = rng.normal(size=(1, 3))
    i_feats = rng.normal(size=(2, 3))
    loss, d_p, d_i = object_contrastive_loss(p_feats, i_feats, pairs, tau=0.5)
    want = infonce_oracle(
        p_feats, i_feats, pairs.positives, pairs.negatives, 0.5, const=pairs.const
    )
    assert abs(loss - want) < 1e-9
    fd = finite_diff_grad(
        lambda flat: object_contrastive_loss(
            flat.reshape(1, 3), i_feats, pairs, tau=0.5
        )[0],
        p_feats.ravel(),
    ).reshape(1, 3)
    assert np.allclose(d_p, fd, atol=1e-6)


# ---------------------------------------------------------------------------
# memory bank


def test_bank_fifo_eviction():
    bank = MemoryBank(capacity=3)
    for k in range(4):
        v = np.zeros(4)
        v[k] = 1.0
        bank.enqueue(0, "point", v)
    assert bank.length(0, "point") == 3
    feats = bank.features(0, "point")
    assert np.allclose(feats, np.eye(4)[1:])  # oldest entry evicted


def test_bank_queues_are_isolated_and_normalized():
    bank = MemoryBank(capacity=8)
    bank.enqueue(0, "point", np.array([3.0, 4.0]))
    bank.enqueue(0, "image", np.array([1.0, 0.0]))
    bank.enqueue(1, "point", np.array([0.0, 2.0]))
    assert bank.length(0, "point") == 1
    assert bank.length(0, "image") == 1
    assert bank.length(1, "image") == 0
    assert np.allclose(bank.features(0, "point"), [[0.6, 0.8]])
    assert bank.features(2, "point").shape == (0, 0)


def test_bank_other_class_features_sorted_key_order():
    bank = MemoryBank(capacity=8)
    bank.enqueue(1, "point", np.array([0.0, 1.0, 0.0]))  # ('point', 1)
    bank.enqueue(2, "image", np.array([0.0, 0.0, 1.0]))  # ('image', 2)
    bank.enqueue(0, "point", np.array([1.0, 0.0, 0.0]))  # ('point', 0)
    out = bank.other_class_features(5)
    # ('image', 2) < ('point', 0) < ('point', 1)
    assert np.allclose(out, [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    out = bank.other_class_features(0)
    assert np.allclose(out, [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    assert bank.other_class_features(5).shape[0] == 3


def test_bank_validation():
    bank = MemoryBank(capacity=2)
    bank.enqueue(0, "point", np.ones(3))
    with pytest.raises(ShapeError):
        bank.enqueue(0, "point", np.ones(4))
    with pytest.raises(ShapeError):
        bank.enqueue(0, "point", np.ones((2, 3)))
    with pytest.raises(ValueError):
        bank.enqueue(0, "lidar", np.ones(3))


# ---------------------------------------------------------------------------
# momentum encoder


def test_momentum_update_blends_arrays():
    k = {"w": np.array([1.0, 2.0]), "tag": "enc"}
    q = {"w": np.array([3.0, 6.0]), "tag": "enc"}
    out = momentum_update(k, q, m=0.75)
    assert np.allclose(out["w"], [1.5, 3.0])
    assert out["tag"] == "enc"


def test_momentum_update_recurses_through_dataclasses():
    k = [LinearParams(np.eye(2), np.zeros(2)), (np.ones(3),)]
    q = [LinearParams(np.zeros((2, 2)), np.ones(2)), (np.zeros(3),)]
    out = momentum_update(k, q, m=0.9)
    assert isinstance(out[0], LinearParams)
    assert np.allclose(out[0].weight, 0.9 * np.eye(2))
    assert np.allclose(out[0].bias, np.full(2, 0.1))
    assert isinstance(out[1], tuple)
    assert np.allclose(out[1][0], np.full(3, 0.9))


def test_momentum_update_converges_geometrically():
    q = {"w": np.array([0.5, -1.25, 2.0])}
    k = {"w": np.zeros(3)}
    for _ in range(50):
        k = momentum_update(k, q, m=0.999)
    want = (1.0 - 0.999 ** 50) * q["w"]
    assert np.max(np.abs(k["w"] - want)) < 1e-12


def test_momentum_update_structure_errors():
    with pytest.raises(ValueError):
        momentum_update({"a": np.zeros(2)}, {"b": np.zeros(2)})
    with pytest.raises(ValueError):
        momentum_update([np.zeros(2)], [np.zeros(3)])
    with pytest.raises(ValueError):
        momentum_update([np.zeros(2)], [np.zeros(2), np.zeros(2)])
    with pytest.raises(ValueError):
        momentum_update({"m": 1}, {"m": 2})
    with pytest.raises(ValueError):
        momentum_update(np.zeros(2), [0.0, 0.0])


def test_momentum_update_m_one_keeps_key_encoder():
    k = np.array([1.0, 2.0])
    out = momentum_update(k, np.array([9.0, 9.0]), m=1.0)
    assert np.array_equal(out, k) and out is not k
