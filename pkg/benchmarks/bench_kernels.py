"""Compiled vs numpy kernel timings, plus one full training step.

    python benchmarks/bench_kernels.py [--size 32] [--repeat 3] [--step-size 64]
"""
import argparse
import time

import numpy as np

from autoseg3d import kernels
from autoseg3d.autodiff import LrSchedule, adam_step
from autoseg3d.network import build, supervised_loss
from autoseg3d.planner import make_plan
from autoseg3d.volume import DatasetFingerprint, Spacing


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(n, rng):
    """(label, callable) pairs shaped like level-0 and level-1 layers of a real plan."""
    x0 = rng.standard_normal((2, 6, n + 2, n + 2, n + 2)).astype(np.float32)
    w0 = rng.standard_normal((6, 6, 3, 3, 3)).astype(np.float32)
    g0 = rng.standard_normal((2, 6, n, n, n)).astype(np.float32)
    h = n // 2
    x1 = rng.standard_normal((2, 6, n + 1, n + 1, n + 1)).astype(np.float32)
    w1 = rng.standard_normal((12, 6, 3, 3, 3)).astype(np.float32)
    g1 = rng.standard_normal((2, 12, h, h, h)).astype(np.float32)
    flat = rng.standard_normal((12, n ** 3)).astype(np.float32)
    vec = flat.reshape(-1)
    gain, off = np.ones(6, np.float32), np.zeros(6, np.float32)
    vol = rng.standard_normal((n, n, n)).astype(np.float32)
    coords = np.ascontiguousarray(np.indices((n, n, n), dtype=np.float64) + rng.uniform(-1, 1, (3, n, n, n)))

    def inorm_bwd():
        y, mean, inv = kernels.instance_norm_forward(flat, gain, off, 6, 1e-5)
        kernels.instance_norm_backward(flat, flat, mean, inv, gain, 6)

    return [
        (f"conv fwd 6->6 {n}^3 s1", lambda: kernels.conv3d_forward(x0, w0, (1, 1, 1))),
        (f"conv grad_w 6->6 {n}^3 s1", lambda: kernels.conv3d_grad_weight(g0, x0, (1, 1, 1), (3, 3, 3))),
        (f"conv grad_in 6->12 {n}^3 s2", lambda: kernels.conv3d_grad_input(g1, w1, (2, 2, 2), x1.shape[2:])),
        (f"conv fwd 6->12 {n}^3 s2", lambda: kernels.conv3d_forward(x1, w1, (2, 2, 2))),
        (f"instance norm fwd+bwd {n}^3", inorm_bwd),
        (f"leaky relu fwd+bwd {n}^3", lambda: kernels.leaky_relu_backward(
            kernels.leaky_relu_forward(vec, 0.01), vec, 0.01)),
        (f"trilinear warp {n}^3", lambda: kernels.warp_linear(vol, coords)),
    ]


def train_step(n, seed=0):
    plan = make_plan(DatasetFingerprint(Spacing(1, 1, 1), (n, n, n), 2, 1))
    net = build(plan, seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 1) + plan.train_patch).astype(np.float32)
    y = (rng.random((2,) + plan.train_patch) < 0.1).astype(np.uint8)

    def step():
        loss = supervised_loss(net.forward(x), y, 2)
        loss.backward()
        adam_step(net.parameters, LrSchedule(), 0)
        net.zero_grad()

    return plan, step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=32, help="cube edge for the kernel timings")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--step-size", type=int, default=64, help="median shape used to plan the training step")
    args = ap.parse_args()

    backends = kernels.available()
    if "cython" not in backends:
        print("compiled backend not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    cases = kernel_cases(args.size, rng)
    print(f"{'kernel':34s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for label, fn in cases:
        row = {}
        for b in backends:
            with kernels.use(b):
                fn()  # warm up
                row[b] = best_of(fn, args.repeat)
        line = f"{label:34s}" + "".join(f"{row[b] * 1e3:10.2f}ms" for b in backends)
        if len(backends) > 1:
            line += f"{row['python'] / row['cython']:11.1f}x"
        print(line)

    plan, step = train_step(args.step_size)
    print(f"\ntraining step, batch 2, patch {plan.train_patch}, depths {plan.depths}")
    for b in backends:
        with kernels.use(b):
            step()
            print(f"  {b:8s} {best_of(step, max(1, args.repeat - 1)):8.2f}s")


if __name__ == "__main__":
    main()
