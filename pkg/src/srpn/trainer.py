"""SGD training loop and the margin sweep.

One iteration: augment each image of the batch, run the network, label
anchors, pick hard negatives, draw pairs or triplets from the labelled
embeddings, and average the per-image composite losses before a single
backward pass and momentum-SGD update.
"""
import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from srpn import tensor as T
from srpn.anchors import AnchorSpec, Label, generate_array, label_array
from srpn.evaluator import EvalConfig, evaluate_f1ap
from srpn.head import HeadConfig, build, extract_anchor_views, forward
from srpn.losses import LossWeights, per_anchor_cls_loss, total_loss
from srpn.sampling import EmbeddingSet, make_pairs, make_triplets, ohem_select
from srpn.synth import augment

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "loss_total", "loss_embed", "loss_loc", "loss_cls",
               "positives", "negatives_sampled")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, value):
        super().__init__(f"loss became {value} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 4
    iterations: int = 2000
    embed_mode: str = "none"            # none | pair | triplet
    margin: float = 1.0
    loss_weights: LossWeights = LossWeights()
    anchor_spec: AnchorSpec = AnchorSpec()
    head: HeadConfig = HeadConfig()
    ohem: bool = True
    neg_pos_ratio: float = 3.0
    max_sampled: int = 256
    cls_loss: str = "ce"                # ce | focal
    pos_thresh: float = 0.7
    neg_thresh: float = 0.3
    best_per_gt: bool = True
    pairs_per_positive: int = 4
    max_pairs: int = 256
    augment: bool = True
    normalize: bool = True
    seed: int = 0                       # parameter init
    data_seed: int = 0                  # batch order, augmentation, pair/triplet draws

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.embed_mode not in ("none", "pair", "triplet"):
            raise ValueError(f"embed_mode must be none, pair or triplet, got {self.embed_mode!r}")
        if self.head.num_anchor != self.anchor_spec.per_location:
            raise ValueError(f"head predicts {self.head.num_anchor} anchors per location but the anchor "
                             f"spec defines {self.anchor_spec.per_location}")
        if self.head.stride != self.anchor_spec.stride:
            raise ValueError(f"anchor stride {self.anchor_spec.stride} differs from the network stride "
                             f"{self.head.stride}")


def sgd_step(params, grads, learning_rate, momentum, velocity=None):
    """v <- momentum * v + g; p <- p - lr * v. Returns (new params, new velocity)."""
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(velocity)):
        raise ValueError("params, grads and velocity must have the same length")
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        if np.shape(p) != np.shape(g) or np.shape(p) != np.shape(v):
            raise ValueError(f"shape mismatch: param {np.shape(p)}, grad {np.shape(g)}, velocity {np.shape(v)}")
        v = momentum * v + g
        new_v.append(v)
        new_p.append(p - learning_rate * v)
    return new_p, new_v


@dataclass
class StepRecord:
    iteration: int
    loss_total: float
    loss_embed: float
    loss_loc: float
    loss_cls: float
    positives: int
    negatives_sampled: int

    def as_row(self):
        return [self.iteration, repr(self.loss_total), repr(self.loss_embed), repr(self.loss_loc),
                repr(self.loss_cls), self.positives, self.negatives_sampled]


@dataclass
class TrainResult:
    model: object
    log: list = field(default_factory=list)


def image_loss(model, cfg, image, boxes, rng_seed, anchors=None):
    """Composite loss for one image; returns (LossBreakdown, n_pos, n_neg_sampled)."""
    out = forward(model, image)
    fh, fw = out.feature_shape
    if anchors is None:
        anchors = generate_array(cfg.anchor_spec, fh, fw)
    lab = label_array(anchors, [tuple(b) for b in boxes], cfg.pos_thresh, cfg.neg_thresh, cfg.best_per_gt)
    views = extract_anchor_views(out, lab)
    v_labels = lab.labels[views.index]
    if cfg.ohem:
        hard = per_anchor_cls_loss(views.scores.data, v_labels, cfg.cls_loss)
        sel = ohem_select(v_labels, hard, cfg.neg_pos_ratio, cfg.max_sampled)
    else:
        sel = np.arange(len(v_labels))
    n_pos = int((v_labels[sel] == Label.POSITIVE).sum())

    pairs = triplets = None
    if cfg.embed_mode != "none" and n_pos > 0:
        E = EmbeddingSet(views.embeddings, v_labels)
        count = min(cfg.pairs_per_positive * n_pos, cfg.max_pairs)
        if cfg.embed_mode == "pair":
            pairs = make_pairs(E, max(count, 2), rng_seed)
        elif (v_labels == 1).sum() >= 2 or (v_labels == 0).sum() >= 2:
            triplets = make_triplets(E, count, rng_seed)

    parts = total_loss(
        T.take(views.offsets, sel), T.take(views.scores, sel),
        lab.targets[views.index[sel]], v_labels[sel],
        embeddings=views.embeddings, mode=cfg.embed_mode, pairs=pairs, triplets=triplets,
        margin=cfg.margin, weights=cfg.loss_weights, cls_loss=cfg.cls_loss, normalize=cfg.normalize)
    return parts, n_pos, len(sel) - n_pos


def _seed(*parts):
    return np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0]


def batch_loss(model, cfg, batch, iteration):
    """Mean composite loss over ``batch`` (list of AnnotatedImage) plus a log record."""
    totals = []
    sums = np.zeros(3)
    n_pos = n_neg = 0
    for slot, item in enumerate(batch):
        if cfg.augment:
            item = augment(item, _seed(cfg.data_seed, iteration, slot, 1))
        parts, p, n = image_loss(model, cfg, item.image, item.boxes, _seed(cfg.data_seed, iteration, slot, 2))
        totals.append(parts.total)
        sums += (parts.embed, parts.loc, parts.cls)
        n_pos += p
        n_neg += n
    loss = totals[0]
    for t in totals[1:]:
        loss = T.add(loss, t)
    loss = T.mul(loss, 1.0 / len(batch))
    sums /= len(batch)
    rec = StepRecord(iteration, loss.item(), float(sums[0]), float(sums[1]), float(sums[2]), n_pos, n_neg)
    return loss, rec


def train(cfg, dataset, model=None, callback=None):
    """Run ``cfg.iterations`` SGD steps on ``dataset``; fully determined by cfg and data."""
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    model = model if model is not None else build(cfg.head, cfg.seed)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    order_rng = np.random.default_rng(_seed(cfg.data_seed, 0xB47C))
    queue = []
    records = []
    for it in range(cfg.iterations):
        batch = []
        while len(batch) < cfg.batch_size:
            if not queue:
                queue = list(order_rng.permutation(len(dataset)))
            batch.append(dataset[queue.pop()])
        model.zero_grad()
        loss, rec = batch_loss(model, cfg, batch, it)
        if not np.isfinite(rec.loss_total):
            raise TrainingDiverged(it, rec.loss_total)
        if loss.requires_grad:
            T.backward(loss)
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDiverged(it, "non-finite gradient")
        new_p, velocity = sgd_step([p.data for p in params], grads, cfg.learning_rate, cfg.momentum, velocity)
        for p, d in zip(params, new_p):
            p.data = d
        records.append(rec)
        if callback is not None:
            callback(rec)
        if it % 100 == 0:
            log.debug("iter %d loss %.5f (embed %.4f loc %.4f cls %.4f)", it, rec.loss_total,
                      rec.loss_embed, rec.loss_loc, rec.loss_cls)
    return TrainResult(model, records)


def write_log_csv(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow(r.as_row())


def sweep_margins(base, margins, dataset, eval_set, eval_cfg=EvalConfig()):
    """Train one model per margin (shared seeds) and evaluate each.

    Returns rows ``{"embed_mode", "margin", "f1", "ap"}`` in the order given.
    """
    if not margins:
        raise ValueError("sweep needs at least one margin")
    rows = []
    for m in margins:
        res = train(replace(base, margin=float(m)), dataset)
        rep = evaluate_f1ap(res.model, eval_set, base.anchor_spec, eval_cfg)
        rows.append({"embed_mode": base.embed_mode, "margin": float(m), "f1": rep.f1, "ap": rep.ap})
    return rows
