"""Training objectives: pair and triplet embedding losses, smooth L1,
cross-entropy, focal loss and their weighted composite.

Every loss accepts a single sample or a stacked batch (leading axis) and
returns the *sum* over samples as a scalar Tensor; :func:`total_loss` does the
per-term normalisation.
"""
from dataclasses import dataclass

import numpy as np

from srpn import tensor as T

PROB_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    embed: float = 1.0
    loc: float = 1.0
    cls: float = 1.0

    def __post_init__(self):
        for name in ("embed", "loc", "cls"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


def _check_margin(m):
    if m < 0:
        raise ValueError(f"margin must be >= 0, got {m}")
    return float(m)


def _scaled(x, coef):
    """x * coef where coef is a python scalar or an array shaped like x."""
    if np.ndim(coef) == 0:
        return T.mul(x, float(coef))
    return T.mul(x, T.Tensor(np.broadcast_to(coef, x.shape)))


def pair_loss(e1, e2, s, margin):
    """0.5 s D + 0.5 (1 - s) max(m - D, 0) with D the squared Euclidean distance."""
    margin = _check_margin(margin)
    s = np.asarray(s, dtype=np.float64)
    d = T.squared_l2(e1, e2)
    similar = _scaled(d, 0.5 * s)
    dissimilar = _scaled(T.relu(T.add(T.neg(d), margin)), 0.5 * (1.0 - s))
    return T.tsum(T.add(similar, dissimilar))


def triplet_loss(anchor, positive, negative, margin):
    """max(D(a, p) - D(a, n) + m, 0) on squared distances."""
    margin = _check_margin(margin)
    gap = T.sub(T.squared_l2(anchor, positive), T.squared_l2(anchor, negative))
    return T.tsum(T.relu(T.add(gap, margin)))


def smooth_l1_loss(t, t_star):
    t_star = t_star if isinstance(t_star, T.Tensor) else T.Tensor(t_star)
    return T.tsum(T.smooth_l1(T.sub(t, t_star)))


def _clamped(p):
    return T.clamp(p, PROB_EPS, 1.0 - PROB_EPS)


def cross_entropy(p, target):
    """-[y ln p + (1 - y) ln(1 - p)], probabilities clamped to [1e-12, 1 - 1e-12]."""
    p = p if isinstance(p, T.Tensor) else T.Tensor(p)
    y = np.broadcast_to(np.asarray(target, dtype=np.float64), p.shape)
    pc = _clamped(p)
    pos = _scaled(T.log(pc), y)
    neg = _scaled(T.log(T.add(T.neg(pc), 1.0)), 1.0 - y)
    return T.neg(T.tsum(T.add(pos, neg)))


def focal_loss(p, target, alpha=0.25, gamma=2.0):
    """-alpha_t (1 - p_t)^gamma ln p_t."""
    p = p if isinstance(p, T.Tensor) else T.Tensor(p)
    y = np.broadcast_to(np.asarray(target, dtype=np.float64), p.shape)
    pc = _clamped(p)
    # p_t = y p + (1 - y)(1 - p), written so the constant part stays outside the tape
    p_t = T.add(_scaled(pc, 2.0 * y - 1.0), T.Tensor(1.0 - y))
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    modulator = T.power(T.add(T.neg(p_t), 1.0), gamma)
    return T.neg(T.tsum(_scaled(T.mul(modulator, T.log(p_t)), alpha_t)))


def per_anchor_cls_loss(p, target, kind="ce", alpha=0.25, gamma=2.0):
    """Plain numpy per-anchor classification loss (no tape); used for hard-example ranking."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(target, dtype=np.float64)
    p_t = np.where(y > 0.5, p, 1.0 - p)
    if kind == "ce":
        return -np.log(p_t)
    alpha_t = np.where(y > 0.5, alpha, 1.0 - alpha)
    return -alpha_t * (1.0 - p_t) ** gamma * np.log(p_t)


@dataclass
class LossBreakdown:
    total: T.Tensor
    embed: float
    loc: float
    cls: float


def _zero():
    return T.Tensor(0.0)


def total_loss(offsets, scores, target_offsets, labels, embeddings=None, mode="none",
               pairs=None, triplets=None, margin=1.0, weights=LossWeights(),
               cls_loss="ce", normalize=True, focal_alpha=0.25, focal_gamma=2.0):
    """Weighted sum of embedding, localisation and classification terms.

    ``offsets`` [N,4] and ``scores`` [N] are tensors for the sampled anchors;
    ``target_offsets`` [N,4] and ``labels`` [N] (1 positive / 0 negative) are
    constants. ``pairs`` / ``triplets`` index rows of ``embeddings`` [M,d].
    The localisation term only sees positive anchors. With ``normalize`` each
    term is averaged over its own sample count; otherwise terms are raw sums.
    """
    labels = np.asarray(labels)
    target_offsets = np.asarray(target_offsets, dtype=np.float64).reshape(-1, 4)
    n = len(labels)
    if offsets.shape != (n, 4) or scores.shape != (n,) or target_offsets.shape != (n, 4):
        raise ValueError(
            f"misaligned anchor arrays: offsets {offsets.shape}, scores {scores.shape}, "
            f"targets {target_offsets.shape}, labels ({n},)")
    if mode not in ("none", "pair", "triplet"):
        raise ValueError(f"unknown embedding mode {mode!r}")

    pos = np.nonzero(labels == 1)[0]
    if len(pos):
        loc = smooth_l1_loss(T.take(offsets, pos), target_offsets[pos])
        if normalize:
            loc = T.mul(loc, 1.0 / len(pos))
    else:
        loc = _zero()

    if n:
        if cls_loss == "ce":
            cls = cross_entropy(scores, labels)
        elif cls_loss == "focal":
            cls = focal_loss(scores, labels, focal_alpha, focal_gamma)
        else:
            raise ValueError(f"unknown classification loss {cls_loss!r}")
        if normalize:
            cls = T.mul(cls, 1.0 / n)
    else:
        cls = _zero()

    terms = [T.mul(loc, weights.loc), T.mul(cls, weights.cls)]
    embed = None
    if mode == "pair" and pairs is not None and len(pairs):
        embed = pair_loss(T.take(embeddings, pairs.first), T.take(embeddings, pairs.second),
                          pairs.similar, margin)
        count = len(pairs)
    elif mode == "triplet" and triplets is not None and len(triplets):
        embed = triplet_loss(T.take(embeddings, triplets.anchor), T.take(embeddings, triplets.positive),
                             T.take(embeddings, triplets.negative), margin)
        count = len(triplets)
    if embed is not None:
        if normalize:
            embed = T.mul(embed, 1.0 / count)
        terms.insert(0, T.mul(embed, weights.embed))

    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return LossBreakdown(total, 0.0 if embed is None else embed.item(), loc.item(), cls.item())
