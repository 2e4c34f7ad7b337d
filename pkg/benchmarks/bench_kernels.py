"""Compare the compiled and pure-numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]

Times conv2d and maxpool forward+backward on the layer shapes of the default
network (64x64 input), then one full training iteration (batch 4) per backend.
"""
import argparse
import time

import numpy as np

from srpn import kernels, tensor as T
from srpn.head import HeadConfig, build
from srpn.synth import SceneSpec, generate_dataset
from srpn.trainer import TrainConfig, batch_loss

CONV_SHAPES = [  # (cin, h, w, cout, k, pad)
    (3, 64, 64, 16, 3, 1),
    (16, 32, 32, 32, 3, 1),
    (32, 16, 16, 32, 3, 1),
    (32, 8, 8, 32, 3, 1),
    (32, 8, 8, 180, 1, 0),
]
POOL_SHAPES = [(16, 64, 64), (32, 32, 32), (32, 16, 16)]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def conv_case(shape, rng):
    cin, h, w, cout, k, pad = shape
    x = rng.normal(size=(cin, h, w))
    wt = rng.normal(size=(cout, cin, k, k))
    b = rng.normal(size=cout)

    def run():
        out, cols = kernels.conv2d_forward(x, wt, b, pad)
        kernels.conv2d_backward(np.ones_like(out), x.shape, wt, cols, pad)
    return run


def pool_case(shape, rng):
    x = rng.normal(size=shape)

    def run():
        out, arg = kernels.maxpool2d_forward(x, 2)
        kernels.maxpool2d_backward(np.ones_like(out), arg, x.shape)
    return run


def train_step_case():
    data = generate_dataset(SceneSpec(), 4, seed=0)
    cfg = TrainConfig(embed_mode="triplet", margin=2.0, head=HeadConfig())
    model = build(cfg.head, 0)

    def run():
        model.zero_grad()
        loss, _ = batch_loss(model, cfg, data, 0)
        T.backward(loss)
    return run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = sorted(kernels.BACKENDS)
    if len(backends) < 2:
        print("compiled backend not built; only", backends, "available")
    rng = np.random.default_rng(0)
    cases = [(f"conv {s[0]}->{s[3]} k{s[4]} @{s[1]}x{s[2]}", conv_case(s, rng)) for s in CONV_SHAPES]
    cases += [(f"maxpool {s[0]}x{s[1]}x{s[2]}", pool_case(s, rng)) for s in POOL_SHAPES]
    cases.append(("train iteration (batch 4)", train_step_case()))

    prev = kernels.BACKEND
    print(f"{'case':<30}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}")
    try:
        for name, fn in cases:
            ms = []
            for b in backends:
                kernels.use_backend(b)
                fn()
                ms.append(1e3 * best_of(fn, args.repeat if "train" not in name else max(3, args.repeat // 5)))
            speed = f"{ms[backends.index('python')] / ms[backends.index('compiled')]:.2f}x" \
                if len(backends) > 1 else "-"
            print(f"{name:<30}" + "".join(f"{m:>14.3f}" for m in ms) + f"{speed:>10}")
    finally:
        kernels.use_backend(prev)


if __name__ == "__main__":
    main()
