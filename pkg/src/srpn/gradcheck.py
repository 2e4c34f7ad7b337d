"""Central finite-difference checks against the reverse-mode gradients.

The numerical side only ever evaluates forward values (under ``no_grad``), so
it is independent of every backward rule it checks.
"""
from dataclasses import dataclass

import numpy as np

from srpn import tensor as T


def numeric_grad(fn, inputs, wrt, eps=1e-5):
    """d fn(*inputs) / d inputs[wrt] by central differences; ``fn`` returns a scalar Tensor."""
    x = inputs[wrt].data
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(*inputs).item()
            flat[i] = orig - eps
            fm = fn(*inputs).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def analytic_grads(fn, inputs):
    leaves = [T.Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    T.backward(fn(*leaves))
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]


def rel_error(a, b):
    """Max absolute difference scaled by the larger of the two max magnitudes."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check(fn, inputs, eps=1e-5):
    """Worst relative error over all inputs of ``fn``."""
    inputs = [T.Tensor(t.data.copy()) if isinstance(t, T.Tensor) else T.Tensor(t) for t in inputs]
    ana = analytic_grads(fn, inputs)
    return max(rel_error(a, numeric_grad(fn, inputs, i, eps)) for i, a in enumerate(ana))


@dataclass
class CheckResult:
    name: str
    points: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def _away(rng, shape, lo=1e-2):
    """Random normals pushed at least ``lo`` away from zero."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < lo, np.sign(x + 1e-300) * lo + x, x)


def op_cases():
    """(name, builder) pairs; builder(rng) -> (fn, inputs)."""

    def conv3(rng):
        return (lambda x, w, b: T.tsum(T.conv2d(x, w, b, 1)),
                [rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)])

    def conv1(rng):
        return (lambda x, w, b: T.tsum(T.mul(T.conv2d(x, w, b, 0), T.Tensor(np.arange(24.0).reshape(4, 2, 3)))),
                [rng.normal(size=(3, 2, 3)), rng.normal(size=(4, 3, 1, 1)), rng.normal(size=4)])

    def relu(rng):
        c = rng.normal(size=(4, 5))
        return (lambda x: T.tsum(T.mul(T.relu(x), T.Tensor(c))), [_away(rng, (4, 5), 1e-2)])

    def logistic(rng):
        c = rng.normal(size=7)
        return (lambda x: T.tsum(T.mul(T.logistic(x), T.Tensor(c))), [3 * rng.normal(size=7)])

    def sq_l2(rng):
        return (lambda a, b: T.squared_l2(a, b), [rng.normal(size=6), rng.normal(size=6)])

    def log(rng):
        return (lambda x: T.tsum(T.log(x)), [rng.uniform(0.2, 3.0, size=5)])

    def smooth(rng):
        x = _away(rng, 8, 0.0) * 1.5
        x = np.where(np.abs(np.abs(x) - 1.0) < 1e-2, x * 1.1, x)
        return (lambda v: T.tsum(T.smooth_l1(v)), [x])

    def maxpool(rng):
        c = rng.normal(size=(2, 2, 3))
        return (lambda x: T.tsum(T.mul(T.maxpool2d(x, 2), T.Tensor(c))),
                [rng.permutation(48).reshape(2, 4, 6) * 0.1 + rng.normal(size=(2, 4, 6)) * 1e-3])

    def arith(rng):
        return (lambda a, b: T.tsum(T.power(T.sub(T.mul(a, b), T.add(a, 2.0)) * (T.neg(b) + 3.0), 2)),
                [rng.normal(size=5), rng.normal(size=5)])

    def shape_ops(rng):
        idx = np.array([0, 2, 2, 5])
        c = rng.normal(size=(4, 4))
        def fn(a, b):
            m = T.reshape(T.transpose(T.reshape(a, (2, 3, 2)), (1, 0, 2)), (6, 2))
            rows = T.take(T.concat([m, T.reshape(b, (6, 2))], axis=1), idx)
            return T.tsum(T.mul(rows, T.Tensor(c)))
        return fn, [rng.normal(size=12), rng.normal(size=12)]

    return [
        ("conv2d[k=3,pad=1]", conv3), ("conv2d[k=1,pad=0]", conv1), ("relu", relu),
        ("logistic", logistic), ("squared_l2", sq_l2), ("log", log), ("smooth_l1", smooth),
        ("maxpool2d", maxpool), ("add/sub/mul/neg/power", arith),
        ("reshape/transpose/take/concat", shape_ops),
    ]


def run_cases(cases, seeds=20, tolerance=1e-4, eps=1e-5):
    results = []
    for name, build in cases:
        worst = 0.0
        for seed in range(seeds):
            fn, inputs = build(np.random.default_rng(seed))
            worst = max(worst, check(fn, inputs, eps))
        results.append(CheckResult(name, seeds, worst, tolerance))
    return results


def loss_cases():
    """Loss-level cases; margins are placed so no hinge sits within 0.5 of a sample point."""
    from srpn import losses as L
    from srpn.sampling import PairSet, TripletSet

    def pair(similar):
        def build(rng):
            a, b = rng.normal(size=(2, 6))
            d = float(((a - b) ** 2).sum())
            m = d + (0.5 if rng.random() < 0.5 else -0.5)
            return (lambda x, y: L.pair_loss(x, y, similar, m), [a, b])
        return build

    def triplet(rng):
        a, p, n = rng.normal(size=(3, 6))
        gap = float(((a - p) ** 2).sum() - ((a - n) ** 2).sum())
        m = -gap + (0.5 if rng.random() < 0.5 else -0.5)
        if m < 0:
            m = max(-gap + 0.5, 0.0)    # gap + m >= 0.5 either way
        return (lambda x, y, z: L.triplet_loss(x, y, z, m), [a, p, n])

    def smooth(rng):
        t = rng.normal(size=(3, 4)) * 1.5
        t = np.where(np.abs(np.abs(t) - 1.0) < 1e-2, t * 1.05, t)
        target = rng.normal(size=(3, 4)) * 0.1
        t = np.where(np.abs(np.abs(t - target) - 1.0) < 1e-2, t + 0.05, t)
        return (lambda x: L.smooth_l1_loss(x, target), [t])

    def ce(rng):
        y = rng.integers(0, 2, 6)
        return (lambda q: L.cross_entropy(q, y), [rng.uniform(0.05, 0.95, 6)])

    def focal(rng):
        y = rng.integers(0, 2, 6)
        return (lambda q: L.focal_loss(q, y), [rng.uniform(0.05, 0.95, 6)])

    def composite(mode):
        def build(rng):
            labels = np.array([1, 0, 1, 0, 0])
            tgt = rng.normal(size=(5, 4)) * 0.3
            pairs = PairSet(np.array([0, 1, 2]), np.array([2, 3, 4]), np.array([1, 0, 0]))
            trips = TripletSet(np.array([0, 1]), np.array([2, 3]), np.array([4, 0]))

            def fn(off, sc, emb):
                return L.total_loss(off, T.logistic(sc), tgt, labels, embeddings=emb, mode=mode, pairs=pairs,
                                    triplets=trips, margin=50.0).total
            return fn, [rng.normal(size=(5, 4)) * 0.3, rng.normal(size=5), rng.normal(size=(5, 3))]
        return build

    return [
        ("pair_loss[s=1]", pair(1)), ("pair_loss[s=0]", pair(0)), ("triplet_loss", triplet),
        ("smooth_l1_loss", smooth), ("cross_entropy", ce), ("focal_loss", focal),
        ("total_loss[pair]", composite("pair")), ("total_loss[triplet]", composite("triplet")),
    ]


def run_model_check(seeds=2, tolerance=1e-3, eps=1e-5):
    """End-to-end check of the per-image training loss w.r.t. every network parameter.

    Uses a reduced network on a 16x16 image so every parameter can be perturbed.
    """
    from srpn.anchors import AnchorSpec, generate_array
    from srpn.head import HeadConfig, build
    from srpn.trainer import TrainConfig, image_loss

    spec = AnchorSpec(scales=(6.0, 10.0), ratios=(1.0,), stride=4)
    head = HeadConfig(backbone_channels=(3, 4), c2=4, num_anchor=2, dim_embedding=3, head_init_std=0.3)
    anchors = generate_array(spec, 4, 4)
    results = []
    for mode in ("none", "pair", "triplet"):
        cfg = TrainConfig(anchor_spec=spec, head=head, embed_mode=mode, margin=4.0, augment=False)
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            img = rng.uniform(size=(3, 16, 16))
            boxes = [tuple(np.r_[rng.uniform(0, 6, 2), rng.uniform(4, 8, 2)]) for _ in range(2)]
            model = build(head, seed)
            names = list(model.params)

            def fn(*params):
                for n, p in zip(names, params):
                    model.params[n] = p
                return image_loss(model, cfg, img, boxes, seed, anchors)[0].total

            worst = max(worst, check(fn, [p.data for p in model.parameters()], eps))
        results.append(CheckResult(f"network[{mode}]", seeds, worst, tolerance))
    return results
