"""Hard-negative selection and pair/triplet generation over labelled embeddings.

All samplers are pure functions of their inputs and an integer seed.
"""
import warnings
from dataclasses import dataclass

import numpy as np

from srpn.anchors import LabeledAnchor, Label


@dataclass
class EmbeddingSet:
    """Per-anchor embedding vectors ``[N, d]`` with binary labels ``[N]``."""

    embeddings: object
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        shape = np.shape(getattr(self.embeddings, "data", self.embeddings))
        if len(shape) != 2 or shape[0] != len(self.labels):
            raise ValueError(f"embeddings {shape} do not align with {len(self.labels)} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("embedding labels must be 0 or 1")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return np.shape(getattr(self.embeddings, "data", self.embeddings))[1]


@dataclass
class PairSet:
    first: np.ndarray
    second: np.ndarray
    similar: np.ndarray
    degenerate: bool = False  # True when one label was missing and balance was impossible

    def __len__(self):
        return len(self.similar)

    def materialize(self, E):
        emb = np.asarray(getattr(E.embeddings, "data", E.embeddings))
        return [(emb[i], emb[j], int(s)) for i, j, s in zip(self.first, self.second, self.similar)]


@dataclass
class TripletSet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    def __len__(self):
        return len(self.anchor)

    def materialize(self, E):
        emb = np.asarray(getattr(E.embeddings, "data", E.embeddings))
        return [(emb[a], emb[p], emb[n]) for a, p, n in zip(self.anchor, self.positive, self.negative)]


def _label_array(anchors):
    out = []
    for a in anchors:
        out.append(int(a.label) if isinstance(a, LabeledAnchor) else int(a))
    return np.asarray(out, dtype=np.int64)


def ohem_select(anchors, cls_loss, neg_pos_ratio=3.0, max_total=256):
    """Indices of all positives plus the highest-loss negatives at ``neg_pos_ratio``:1.

    ``anchors`` is a sequence of :class:`LabeledAnchor` or raw labels; ignore
    labels are never selected. At most ``max_total / (1 + ratio)`` positives are
    kept (the hardest ones). Without positives the hardest ``max_total``
    negatives are returned. Ties in loss go to the lower index.
    """
    labels = _label_array(anchors)
    loss = np.asarray(cls_loss, dtype=np.float64)
    if loss.shape != labels.shape:
        raise ValueError(f"{len(loss)} losses for {len(labels)} anchors")
    pos = np.nonzero(labels == Label.POSITIVE)[0]
    neg = np.nonzero(labels == Label.NEGATIVE)[0]
    pos = pos[np.argsort(-loss[pos], kind="stable")]
    neg = neg[np.argsort(-loss[neg], kind="stable")]
    max_pos = int(np.floor(max_total / (1.0 + neg_pos_ratio)))
    kept_pos = pos[:max_pos]
    if len(kept_pos):
        n_neg = min(len(neg), int(np.floor(neg_pos_ratio * len(kept_pos) + 1e-9)),
                    max_total - len(kept_pos))
    else:
        n_neg = min(len(neg), max_total)
    return np.concatenate([kept_pos, neg[:n_neg]]).astype(np.int64)


def _class_members(E):
    return {c: np.nonzero(E.labels == c)[0] for c in (1, 0)}


def make_pairs(E, n_pairs, rng_seed):
    """Balanced similar/dissimilar pairs; no element is paired with itself."""
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    if len(E) < 2:
        raise ValueError("need at least two embeddings to form pairs")
    rng = np.random.default_rng(rng_seed)
    members = _class_members(E)
    can_similar = [c for c in (1, 0) if len(members[c]) >= 2]
    can_dissimilar = len(members[1]) > 0 and len(members[0]) > 0
    n_sim = (n_pairs + 1) // 2 if can_dissimilar else n_pairs
    if not can_similar:
        n_sim = 0
    n_dis = n_pairs - n_sim if can_dissimilar else 0
    degenerate = not (can_similar and can_dissimilar)
    if degenerate:
        warnings.warn("embedding set lacks one kind of pair; output is unbalanced", RuntimeWarning)

    first, second, sim = [], [], []
    for k in range(n_sim):
        pool = members[can_similar[k % len(can_similar)]]
        i, j = rng.choice(len(pool), size=2, replace=False)
        first.append(pool[i])
        second.append(pool[j])
        sim.append(1)
    for _ in range(n_dis):
        i = members[1][rng.integers(len(members[1]))]
        j = members[0][rng.integers(len(members[0]))]
        if rng.random() < 0.5:
            i, j = j, i
        first.append(i)
        second.append(j)
        sim.append(0)
    order = rng.permutation(len(sim))
    as_arr = lambda v: np.asarray(v, dtype=np.int64)[order]
    return PairSet(as_arr(first), as_arr(second), as_arr(sim), degenerate)


def make_triplets(E, n_triplets, rng_seed):
    """Triplets (a, p, n) with label(a) = label(p) != label(n) and a != p.

    Reference classes alternate foreground / background when both can anchor
    a triplet (a class needs two members, the other at least one).
    """
    if n_triplets < 1:
        raise ValueError(f"n_triplets must be >= 1, got {n_triplets}")
    members = _class_members(E)
    names = {1: "foreground", 0: "background"}
    anchor_classes = [c for c in (1, 0) if len(members[c]) >= 2 and len(members[1 - c]) >= 1]
    if not anchor_classes:
        short = [names[c] for c in (1, 0) if len(members[c]) < 2]
        missing = [names[c] for c in (1, 0) if len(members[c]) == 0]
        detail = f"missing {', '.join(missing)} embeddings" if missing else \
            f"{' and '.join(short)} class has fewer than two embeddings"
        raise ValueError(f"cannot form triplets: {detail}")
    rng = np.random.default_rng(rng_seed)
    a_idx, p_idx, n_idx = [], [], []
    for k in range(n_triplets):
        c = anchor_classes[k % len(anchor_classes)]
        same, other = members[c], members[1 - c]
        i, j = rng.choice(len(same), size=2, replace=False)
        a_idx.append(same[i])
        p_idx.append(same[j])
        n_idx.append(other[rng.integers(len(other))])
    arr = lambda v: np.asarray(v, dtype=np.int64)
    return TripletSet(arr(a_idx), arr(p_idx), arr(n_idx))
