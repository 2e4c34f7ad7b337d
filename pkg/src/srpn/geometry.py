"""Axis-aligned box arithmetic.

Boxes are ``(x, y, h, w)``: top-left corner, then height and width, in
continuous pixel coordinates with area ``h * w``. Offsets ``(tx, ty, th, tw)``
express a box relative to an anchor::

    tx = (x - xa) / wa      ty = (y - ya) / ha
    th = log(h / ha)        tw = log(w / wa)
"""
from typing import NamedTuple

import numpy as np

LOG_RATIO_CLAMP = 20.0


class BBox(NamedTuple):
    x: float
    y: float
    h: float
    w: float

    @property
    def area(self):
        return self.h * self.w

    def validate(self):
        if not (self.h > 0 and self.w > 0):
            raise ValueError(f"box must have positive height and width: {self}")
        return self


class OffsetTuple(NamedTuple):
    tx: float
    ty: float
    th: float
    tw: float


class DecodeStats:
    """Counts log-ratio clamps performed by :func:`decode` / :func:`decode_array`."""

    clamped = 0

    @classmethod
    def reset(cls):
        cls.clamped = 0


def iou(a, b):
    if tuple(a) == tuple(b):
        return 1.0
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    # (x + w) - x can differ from w in the last bit
    return min(inter / (a.h * a.w + b.h * b.w - inter), 1.0)


def iou_matrix(a, b):
    """Pairwise IoU between [N,4] and [M,4] arrays of (x, y, h, w)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1, ah, aw = (a[:, i:i + 1] for i in range(4))
    bx1, by1, bh, bw = (b[None, :, i] for i in range(4))
    ix = np.minimum(ax1 + aw, bx1 + bw) - np.maximum(ax1, bx1)
    iy = np.minimum(ay1 + ah, by1 + bh) - np.maximum(ay1, by1)
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = ah * aw + bh * bw - inter
    out = np.where(inter > 0, np.minimum(inter / np.where(union > 0, union, 1.0), 1.0), 0.0)
    same = np.all(a[:, None, :] == b[None, :, :], axis=-1)
    return np.where(same, 1.0, out)


def encode(box, anchor):
    box, anchor = BBox(*box), BBox(*anchor)
    box.validate()
    anchor.validate()
    return OffsetTuple(
        (box.x - anchor.x) / anchor.w,
        (box.y - anchor.y) / anchor.h,
        float(np.log(box.h / anchor.h)),
        float(np.log(box.w / anchor.w)),
    )


def encode_array(boxes, anchors):
    """Vectorised :func:`encode` over aligned [N,4] arrays."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if np.any(boxes[:, 2:] <= 0) or np.any(anchors[:, 2:] <= 0):
        raise ValueError("encode: boxes and anchors need positive height and width")
    return np.stack([
        (boxes[:, 0] - anchors[:, 0]) / anchors[:, 3],
        (boxes[:, 1] - anchors[:, 1]) / anchors[:, 2],
        np.log(boxes[:, 2] / anchors[:, 2]),
        np.log(boxes[:, 3] / anchors[:, 3]),
    ], axis=1)


def decode(t, anchor):
    t, anchor = OffsetTuple(*t), BBox(*anchor)
    if not np.all(np.isfinite(t)):
        raise ValueError(f"decode: non-finite offsets {t}")
    th, tw = t.th, t.tw
    if abs(th) > LOG_RATIO_CLAMP or abs(tw) > LOG_RATIO_CLAMP:
        DecodeStats.clamped += 1
        th = float(np.clip(th, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
        tw = float(np.clip(tw, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
    return BBox(
        t.tx * anchor.w + anchor.x,
        t.ty * anchor.h + anchor.y,
        anchor.h * float(np.exp(th)),
        anchor.w * float(np.exp(tw)),
    )


def decode_array(t, anchors):
    t = np.asarray(t, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    logs = t[:, 2:]
    over = np.any(np.abs(logs) > LOG_RATIO_CLAMP, axis=1)
    DecodeStats.clamped += int(over.sum())
    logs = np.clip(logs, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
    return np.stack([
        t[:, 0] * anchors[:, 3] + anchors[:, 0],
        t[:, 1] * anchors[:, 2] + anchors[:, 1],
        anchors[:, 2] * np.exp(logs[:, 0]),
        anchors[:, 3] * np.exp(logs[:, 1]),
    ], axis=1)


def clip_boxes(boxes, height, width):
    """Clip [N,4] boxes to the image rectangle; boxes collapsing to zero size keep a 1e-6 sliver."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x1 = np.clip(boxes[:, 0], 0, width)
    y1 = np.clip(boxes[:, 1], 0, height)
    x2 = np.clip(boxes[:, 0] + boxes[:, 3], 0, width)
    y2 = np.clip(boxes[:, 1] + boxes[:, 2], 0, height)
    h = np.maximum(y2 - y1, 1e-6)
    w = np.maximum(x2 - x1, 1e-6)
    return np.stack([np.minimum(x1, width - w), np.minimum(y1, height - h), h, w], axis=1)


def nms_order(boxes, scores):
    """Indices sorted by descending score, ties broken by (x, y, h, w) ascending."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))


def nms_indices(boxes, scores, iou_threshold):
    """Greedy suppression; returns kept indices in descending-score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = nms_order(boxes, scores)
    keep = []
    alive = np.ones(len(order), dtype=bool)
    ious = iou_matrix(boxes[order], boxes[order]) if len(order) else None
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        alive[i + 1:] &= ious[i, i + 1:] <= iou_threshold
    return np.asarray(keep, dtype=np.int64)


def nms(detections, iou_threshold=0.3):
    """Greedy NMS over ``[(BBox, score), ...]``; returns survivors by descending score."""
    if not detections:
        return []
    boxes = np.array([tuple(d[0]) for d in detections], dtype=np.float64)
    scores = np.array([d[1] for d in detections], dtype=np.float64)
    return [(BBox(*detections[i][0]), float(detections[i][1]))
            for i in nms_indices(boxes, scores, iou_threshold)]
