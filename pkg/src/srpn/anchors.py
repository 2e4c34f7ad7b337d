"""Dense anchor grids and IoU-based anchor labelling.

Anchor index order is row-major over feature-map cells with the anchors of
one cell contiguous: ``i = (row * feature_w + col) * A + a``, where ``a``
runs over scales (outer) then ratios (inner).
"""
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np

from srpn.geometry import BBox, OffsetTuple, encode_array, iou_matrix


class Label(IntEnum):
    IGNORE = -1
    NEGATIVE = 0
    POSITIVE = 1


@dataclass(frozen=True)
class AnchorSpec:
    scales: tuple = (8.0, 12.0, 16.0)
    ratios: tuple = (0.5, 1.0, 2.0)
    stride: int = 8

    @property
    def per_location(self):
        return len(self.scales) * len(self.ratios)


@dataclass
class LabeledAnchor:
    anchor: BBox
    label: Label
    matched_gt: Optional[int] = None
    target_offsets: Optional[OffsetTuple] = None


@dataclass
class AnchorLabels:
    """Array form of a labelling: one entry per anchor."""

    labels: np.ndarray            # int, values of Label
    matched_gt: np.ndarray        # int, -1 where not positive
    targets: np.ndarray           # [N,4], zeros where not positive
    max_iou: np.ndarray = field(repr=False)

    def as_list(self, anchors):
        out = []
        for i, a in enumerate(np.asarray(anchors).reshape(-1, 4)):
            lab = Label(int(self.labels[i]))
            if lab == Label.POSITIVE:
                out.append(LabeledAnchor(BBox(*a), lab, int(self.matched_gt[i]),
                                         OffsetTuple(*self.targets[i])))
            else:
                out.append(LabeledAnchor(BBox(*a), lab))
        return out


def generate_array(spec, feature_h, feature_w):
    if not spec.scales or not spec.ratios:
        raise ValueError("anchor spec needs at least one scale and one ratio")
    if feature_h < 1 or feature_w < 1:
        raise ValueError(f"feature map must be at least 1x1, got {feature_h}x{feature_w}")
    shapes = np.array([(s * np.sqrt(r), s / np.sqrt(r))
                       for s in spec.scales for r in spec.ratios], dtype=np.float64)
    cy = (np.arange(feature_h) + 0.5) * spec.stride
    cx = (np.arange(feature_w) + 0.5) * spec.stride
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx.ravel(), cyy.ravel()], axis=1)  # (HW, 2) as (cx, cy)
    h = np.broadcast_to(shapes[None, :, 0], (len(centers), len(shapes)))
    w = np.broadcast_to(shapes[None, :, 1], (len(centers), len(shapes)))
    x = centers[:, None, 0] - w / 2
    y = centers[:, None, 1] - h / 2
    return np.stack([x, y, h, w], axis=-1).reshape(-1, 4)


def generate(spec, feature_h, feature_w):
    return [BBox(*row) for row in generate_array(spec, feature_h, feature_w)]


def label_array(anchors, gt, pos_thresh=0.7, neg_thresh=0.3, best_per_gt=True):
    if not 0 <= neg_thresh < pos_thresh <= 1:
        raise ValueError(f"need 0 <= neg_thresh < pos_thresh <= 1, got {neg_thresh}, {pos_thresh}")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    labels = np.full(n, int(Label.IGNORE), dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4))
    if len(gt) == 0:
        labels[:] = Label.NEGATIVE
        return AnchorLabels(labels, matched, targets, np.zeros(n))
    ious = iou_matrix(anchors, gt)
    best_gt = ious.argmax(axis=1)
    max_iou = ious[np.arange(n), best_gt]
    labels[max_iou < neg_thresh] = Label.NEGATIVE
    pos = max_iou > pos_thresh
    labels[pos] = Label.POSITIVE
    matched[pos] = best_gt[pos]
    if best_per_gt:
        col_max = ious.max(axis=0)
        for g in np.nonzero(col_max > 0)[0]:
            winners = np.nonzero(ious[:, g] == col_max[g])[0]
            for a in winners:
                if labels[a] != Label.POSITIVE:
                    labels[a] = Label.POSITIVE
                    matched[a] = g
    p = labels == Label.POSITIVE
    if p.any():
        targets[p] = encode_array(gt[matched[p]], anchors[p])
    return AnchorLabels(labels, matched, targets, max_iou)


def label_anchors(anchors, gt, pos_thresh=0.7, neg_thresh=0.3, best_per_gt=True):
    """Positive above ``pos_thresh``, negative below ``neg_thresh``, otherwise ignore.

    With ``best_per_gt`` the highest-IoU anchor(s) of each ground-truth box are
    also made positive and matched to that box.
    """
    arr = np.asarray([tuple(a) for a in anchors], dtype=np.float64).reshape(-1, 4)
    res = label_array(arr, [tuple(g) for g in gt], pos_thresh, neg_thresh, best_per_gt)
    return res.as_list(arr)
