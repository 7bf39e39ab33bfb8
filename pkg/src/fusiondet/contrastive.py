"""Cross-modal contrastive losses, the feature memory bank, momentum updates.

Both losses share one InfoNCE shape: features are L2-normalized, the
positive similarity is contrasted against a denominator summed over the
anchor's negatives only (the conventional extra positive term in the
denominator is available behind a flag). Analytic gradients flow
through the normalization.
"""

from __future__ import annotations

import dataclasses
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .numerics import ShapeError


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    norms = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def _unnormalize_grad(raw: np.ndarray, d_hat: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. x/|x| back to x (rowwise)."""
    norms = np.maximum(np.linalg.norm(raw, axis=-1, keepdims=True), 1e-12)
    hat = raw / norms
    radial = np.sum(d_hat * hat, axis=-1, keepdims=True)
    return (d_hat - radial * hat) / norms


def paired_contrastive_loss(
    anchors: np.ndarray,
    targets: np.ndarray,
    positives: list,
    negatives: dict,
    tau: float,
    const: np.ndarray = None,
    include_positive: bool = False,
):
    """Shared InfoNCE core over an anchor table and a target table.

    positives lists (anchor row, target row); negatives maps an anchor
    row to its negative entries, each a target row index or a
    ("const", row) reference into the gradient-free ``const`` table.
    Returns (loss, d_anchors, d_targets); ``const`` rows receive no
    gradient.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if tau <= 0:
        raise ValueError("tau must be positive")
    a_hat = l2_normalize(anchors)
    t_hat = l2_normalize(targets)
    c_hat = l2_normalize(np.asarray(const, dtype=np.float64)) if const is not None else None

    loss = 0.0
    d_a = np.zeros_like(a_hat)
    d_t = np.zeros_like(t_hat)
    for a, j in positives:
        entries = negatives.get(a)
        if entries is None or len(entries) == 0:
            raise ValueError(f"anchor {a} has no negatives")
        neg_rows = []
        for e in entries:
            if isinstance(e, tuple):
                neg_rows.append(("c" if e[0] == "const" else "t", int(e[1])))
            else:
                neg_rows.append(("t", int(e)))
        av = a_hat[a]
        pos_sim = float(av @ t_hat[j]) / tau
        neg_vecs = np.stack(
            [t_hat[r] if kind == "t" else c_hat[r] for kind, r in neg_rows]
        )
        sims = (neg_vecs @ av) / tau
        if include_positive:
            sims = np.concatenate([sims, [pos_sim]])
        peak = float(np.max(sims))
        exp = np.exp(sims - peak)
        denom = float(np.sum(exp))
        loss += -pos_sim + peak + np.log(denom)
        w = exp / denom  # softmax over the denominator terms
        # d/d a_hat
        grad_a = -t_hat[j] / tau
        for idx, (kind, r) in enumerate(neg_rows):
            vec = t_hat[r] if kind == "t" else c_hat[r]
            grad_a += w[idx] * vec / tau
            if kind == "t":
                d_t[r] += w[idx] * av / tau
        if include_positive:
            grad_a += w[-1] * t_hat[j] / tau
            d_t[j] += (-1.0 + w[-1]) * av / tau
        else:
            d_t[j] += -av / tau
        d_a[a] += grad_a
    return float(loss), _unnormalize_grad(anchors, d_a), _unnormalize_grad(targets, d_t)


def point_contrastive_loss(
    point_feats: np.ndarray,
    image_feats: np.ndarray,
    pairs,
    tau: float = 0.07,
    include_positive: bool = False,
):
    """Point-level loss over a PairSet; rows align with its tables.

    point_feats[a] is the feature of pairs.anchor_ids[a]; image_feats[p]
    is the image feature sampled at pairs.pixels[p]. Returns
    (loss, d_point_feats, d_image_feats).
    """
    if len(point_feats) != len(pairs.anchor_ids):
        raise ShapeError("point features must align with the pair set's anchors")
    if len(image_feats) != len(pairs.pixels):
        raise ShapeError("image features must align with the pair set's pixels")
    return paired_contrastive_loss(
        point_feats, image_feats, pairs.positives, pairs.negatives, tau,
        include_positive=include_positive,
    )


# ---------------------------------------------------------------------------
# object level


def object_feature(rows: np.ndarray) -> np.ndarray:
    """Channel-wise max over the feature rows inside a box, L2-normalized."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError("object needs at least one feature row")
    return l2_normalize(rows.max(axis=0))


def object_feature_with_grad(rows: np.ndarray):
    """object_feature plus a backward closure mapping d_g to d_rows."""
    rows = np.asarray(rows, dtype=np.float64)
    pooled = rows.max(axis=0)
    winners = np.argmax(rows, axis=0)  # first maximizer per channel
    g = l2_normalize(pooled)

    def backward(d_g: np.ndarray) -> np.ndarray:
        d_pooled = _unnormalize_grad(pooled[None, :], np.asarray(d_g)[None, :])[0]
        d_rows = np.zeros_like(rows)
        d_rows[winners, np.arange(rows.shape[1])] = d_pooled
        return d_rows

    return g, backward


@dataclass
class ObjectPairs:
    """Object-level pairing: point-side anchors against image-side objects.

    Negatives may reference live image-object rows (("image", row)) or
    fixed bank snapshots (("const", row) into ``const``).
    """

    positives: list  # (anchor row in the point-object table, image-object row)
    negatives: dict  # anchor row -> list of ("image"|"const", row)
    const: np.ndarray = None  # [B, d] gradient-free negatives
    skipped_no_negatives: int = 0


def build_object_pairs(
    point_classes: list,
    image_classes: list,
    aligned: list,
    virtual_rows: list,
    bank: "MemoryBank",
) -> ObjectPairs:
    """Pair point-side objects with image-side objects.

    aligned lists (point row, image row) for objects observed in both
    modalities; virtual_rows lists point rows of pasted objects, which
    pair positively with every same-class image object. Negatives per
    anchor are other-class bank entries (both queues) plus other-class
    live image objects; anchors with no negatives are dropped.
    """
    point_classes = list(point_classes)
    image_classes = list(image_classes)
    positives = []
    for p, i in aligned:
        if point_classes[p] != image_classes[i]:
            raise ValueError("aligned pair classes differ")
        positives.append((int(p), int(i)))
    for v in virtual_rows:
        for i, cid in enumerate(image_classes):
            if cid == point_classes[v]:
                positives.append((int(v), int(i)))

    const_rows = []
    negatives = {}
    skipped = 0
    anchors = sorted({a for a, _ in positives})
    kept_positives = []
    for a in anchors:
        entries = []
        for i, cid in enumerate(image_classes):
            if cid != point_classes[a]:
                entries.append(("image", i))
        bank_feats = bank.other_class_features(point_classes[a]) if bank is not None else None
        if bank_feats is not None and len(bank_feats):
            base = len(const_rows)
            const_rows.extend(bank_feats)
            entries.extend(("const", base + k) for k in range(len(bank_feats)))
        if entries:
            negatives[a] = entries
        else:
            skipped += 1
    kept_positives = [(a, i) for a, i in positives if a in negatives]
    const = np.stack(const_rows) if const_rows else None
    return ObjectPairs(
        positives=kept_positives, negatives=negatives, const=const,
        skipped_no_negatives=skipped,
    )


def object_contrastive_loss(
    point_obj_feats: np.ndarray,
    image_obj_feats: np.ndarray,
    pairs: ObjectPairs,
    tau: float = 0.07,
    include_positive: bool = False,
):
    """Same InfoNCE shape as the point-level loss, at object granularity."""
    return paired_contrastive_loss(
        point_obj_feats, image_obj_feats, pairs.positives, pairs.negatives, tau,
        const=pairs.const, include_positive=include_positive,
    )


# ---------------------------------------------------------------------------
# memory bank and momentum encoder


@dataclass
class MemoryBank:
    """Per-class FIFO queues of unit feature vectors, one pair per class."""

    capacity: int = 1024
    queues: dict = field(default_factory=dict)  # (modality, class_id) -> deque

    def _queue(self, modality: str, class_id: int) -> deque:
        if modality not in ("point", "image"):
            raise ValueError("modality must be 'point' or 'image'")
        key = (modality, int(class_id))
        if key not in self.queues:
            self.queues[key] = deque(maxlen=self.capacity)
        return self.queues[key]

    def enqueue(self, class_id: int, modality: str, feature: np.ndarray):
        feature = np.asarray(feature, dtype=np.float64)
        if feature.ndim != 1:
            raise ShapeError("bank features must be vectors")
        q = self._queue(modality, class_id)
        if q and q[0].shape != feature.shape:
            raise ShapeError("feature width differs from the queue's")
        q.append(l2_normalize(feature))

    def length(self, class_id: int, modality: str) -> int:
        return len(self.queues.get((modality, int(class_id)), ()))

    def features(self, class_id: int, modality: str) -> np.ndarray:
        q = self.queues.get((modality, int(class_id)))
        return np.stack(q) if q else np.empty((0, 0))

    def other_class_features(self, class_id: int) -> np.ndarray:
        """All entries of every other class, both modalities, FIFO order."""
        rows = []
        for (_, cid), q in sorted(self.queues.items()):
            if cid != int(class_id):
                rows.extend(q)
        return np.stack(rows) if rows else np.empty((0, 0))


def bank_enqueue(bank: MemoryBank, class_id: int, modality: str, feature: np.ndarray):
    bank.enqueue(class_id, modality, feature)
    return bank


def momentum_update(theta_k, theta_q, m: float = 0.999):
    """Blend two structurally identical parameter trees: m*k + (1-m)*q.

    Arrays blend elementwise; lists, tuples, dicts, and dataclasses
    recurse; any other leaf must be equal in both trees and passes
    through. A structural difference raises.
    """

    def walk(k, q, path):
        if type(k) is not type(q):
            raise ValueError(f"structure mismatch at {path}: {type(k)} vs {type(q)}")
        if isinstance(k, np.ndarray):
            if k.shape != q.shape:
                raise ValueError(f"shape mismatch at {path}: {k.shape} vs {q.shape}")
            return m * k + (1.0 - m) * q
        if dataclasses.is_dataclass(k):
            vals = {
                f.name: walk(getattr(k, f.name), getattr(q, f.name), f"{path}.{f.name}")
                for f in dataclasses.fields(k)
            }
            return type(k)(**vals)
        if isinstance(k, (list, tuple)):
            if len(k) != len(q):
                raise ValueError(f"length mismatch at {path}")
            items = [walk(a, b, f"{path}[{i}]") for i, (a, b) in enumerate(zip(k, q))]
            return type(k)(items)
        if isinstance(k, dict):
            if set(k) != set(q):
                raise ValueError(f"key mismatch at {path}")
            return {key: walk(k[key], q[key], f"{path}[{key!r}]") for key in k}
        if k != q:
            raise ValueError(f"non-parameter leaf differs at {path}: {k!r} vs {q!r}")
        return k

    return walk(theta_k, theta_q, "theta")
