"""Inference and detection metrics.

Matching is greedy and one-to-one: detections in descending score order
(ties broken by box coordinates) each claim the unmatched ground-truth box of
highest IoU, provided that IoU reaches the threshold. AP uses all-points
interpolation of the precision envelope. Ratios with a zero denominator are 0.
"""
import csv
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from srpn import anchors as anc
from srpn.geometry import BBox, clip_boxes, decode_array, iou_matrix, nms_indices, nms_order
from srpn.head import flatten_map, forward
from srpn import tensor as T


class Detection(NamedTuple):
    box: BBox
    score: float


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    matching: list          # (detection index, gt index)
    det_is_tp: np.ndarray   # bool per detection, input order


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    ap: float = float("nan")
    per_image: list = field(default_factory=list)

    def row(self):
        return {k: v for k, v in asdict(self).items() if k != "per_image"}


def _ratio(num, den):
    return num / den if den else 0.0


def f1_report(tp, fp, fn):
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    return MetricsReport(int(tp), int(fp), int(fn), _ratio(tp, tp + fp), _ratio(tp, tp + fn),
                         _ratio(2 * tp, 2 * tp + fp + fn))


def _arrays(dets):
    boxes = np.array([tuple(d[0]) for d in dets], dtype=np.float64).reshape(-1, 4)
    scores = np.array([d[1] for d in dets], dtype=np.float64)
    return boxes, scores


def match(dets, gt, iou_thresh=0.3):
    boxes, scores = _arrays(dets)
    gt = np.array([tuple(g) for g in gt], dtype=np.float64).reshape(-1, 4)
    is_tp = np.zeros(len(dets), dtype=bool)
    pairs = []
    if len(dets) and len(gt):
        ious = iou_matrix(boxes, gt)
        free = np.ones(len(gt), dtype=bool)
        for d in nms_order(boxes, scores):
            cand = np.where(free, ious[d], -1.0)
            g = int(cand.argmax())
            if cand[g] >= iou_thresh:
                free[g] = False
                is_tp[d] = True
                pairs.append((int(d), g))
    tp = len(pairs)
    return MatchResult(tp, len(dets) - tp, len(gt) - tp, pairs, is_tp)


def average_precision(dets_per_image, gts_per_image, iou_thresh=0.3):
    """All-points AP over a dataset; ``dets_per_image[i]`` pairs with ``gts_per_image[i]``."""
    scores, flags, boxes = [], [], []
    n_gt = 0
    for dets, gts in zip(dets_per_image, gts_per_image, strict=True):
        m = match(dets, gts, iou_thresh)
        b, s = _arrays(dets)
        scores.append(s)
        boxes.append(b)
        flags.append(m.det_is_tp)
        n_gt += len(gts)
    if n_gt == 0:
        return 0.0
    scores = np.concatenate(scores) if scores else np.zeros(0)
    if scores.size == 0:
        return 0.0
    flags = np.concatenate(flags)
    order = nms_order(np.concatenate(boxes), scores)
    tp = np.cumsum(flags[order])
    fp = np.cumsum(~flags[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[0.0], precision])
    envelope = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * envelope[1:]))


def s_nr(fp_counts):
    """max(100 - mean false positives per negative image, 0) / 100."""
    counts = np.asarray(fp_counts, dtype=np.float64)
    if counts.size == 0:
        raise ValueError("s_nr needs at least one negative image")
    return max(100.0 - counts.mean(), 0.0) / 100.0


def detect(model, image, anchor_spec, score_threshold=0.5, nms_iou=0.3):
    """Decode every anchor, clip to the image, drop low scores, then NMS."""
    image = np.asarray(getattr(image, "data", image))
    with T.no_grad():
        out = forward(model, image)
        offsets = flatten_map(out.offsets, 4).data
        scores = out.scores.data.transpose(1, 2, 0).reshape(-1)
    fh, fw = out.feature_shape
    anchors = anc.generate_array(anchor_spec, fh, fw)
    keep = np.nonzero(scores >= score_threshold)[0]
    if len(keep) == 0:
        return []
    h, w = image.shape[1:]
    boxes = clip_boxes(decode_array(offsets[keep], anchors[keep]), h, w)
    kept = nms_indices(boxes, scores[keep], nms_iou)
    return [Detection(BBox(*boxes[i]), float(scores[keep][i])) for i in kept]


@dataclass(frozen=True)
class EvalConfig:
    score_threshold: float = 0.5
    nms_iou: float = 0.3
    match_iou: float = 0.3
    ap_score_floor: float = 0.01


def evaluate_f1ap(model, items, anchor_spec, cfg=EvalConfig()):
    """F1 at ``cfg.score_threshold`` and AP over detections above ``ap_score_floor``."""
    all_dets, all_gts, per_image = [], [], []
    tp = fp = fn = 0
    for item in items:
        dets = detect(model, item.image, anchor_spec, cfg.ap_score_floor, cfg.nms_iou)
        op = [d for d in dets if d.score >= cfg.score_threshold]
        m = match(op, item.boxes, cfg.match_iou)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
        per_image.append({"id": item.id, "tp": m.tp, "fp": m.fp, "fn": m.fn})
        all_dets.append(dets)
        all_gts.append(item.boxes)
    rep = f1_report(tp, fp, fn)
    rep.ap = average_precision(all_dets, all_gts, cfg.match_iou)
    rep.per_image = per_image
    return rep


@dataclass
class RingCellReport:
    recall: float
    s_nr: float
    tp: int
    fn: int
    mean_fp_negative: float
    per_image: list = field(default_factory=list)

    def row(self):
        return {k: v for k, v in asdict(self).items() if k != "per_image"}


def evaluate_ringcell(model, positives, negatives, anchor_spec, cfg=EvalConfig()):
    """Recall on annotated images and S_nr on negative-only images."""
    tp = fn = 0
    per_image = []
    for item in positives:
        dets = detect(model, item.image, anchor_spec, cfg.score_threshold, cfg.nms_iou)
        m = match(dets, item.boxes, cfg.match_iou)
        tp, fn = tp + m.tp, fn + m.fn
        per_image.append({"id": item.id, "tp": m.tp, "fp": m.fp, "fn": m.fn})
    fps = []
    for item in negatives:
        n = len(detect(model, item.image, anchor_spec, cfg.score_threshold, cfg.nms_iou))
        fps.append(n)
        per_image.append({"id": item.id, "tp": 0, "fp": n, "fn": 0})
    return RingCellReport(_ratio(tp, tp + fn), s_nr(fps), tp, fn, float(np.mean(fps)), per_image)


def write_report_csv(path, report):
    rows = report.per_image
    with open(path, "w", newline="") as f:
        summary = report.row()
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for k, v in summary.items():
            w.writerow([k, repr(v) if isinstance(v, float) else v])
    if rows:
        with open(path.replace(".csv", "_per_image.csv"), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def summary_text(report):
    lines = [f"{k:>18}: {v:.4f}" if isinstance(v, float) else f"{k:>18}: {v}"
             for k, v in report.row().items()]
    return "\n".join(lines)
