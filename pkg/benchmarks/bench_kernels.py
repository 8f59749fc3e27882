"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]

Kernel timings call both backends directly at the shapes of the default CNN
on a 128-image batch. ``--end-to-end`` also times one PGD-10 adversarial
training step per backend in a subprocess, since the backend is chosen once
at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from wotlab.kernels import backends

# (C_in, H, kernel, stride, pad) for the layers of the default CNN on 3x32x32
CNN_LAYERS = [(3, 32, 4, 2, 1), (8, 16, 3, 1, 1), (8, 16, 4, 2, 1), (16, 8, 3, 1, 1)]

STEP_SNIPPET = """
import time, numpy as np
from wotlab import KERNEL_BACKEND, GradTape, at_loss, backward, build_model
from wotlab.attacks import AttackConfig, attack
from wotlab.models import default_cnn_spec
model = build_model(default_cnn_spec(), 0)
rng = np.random.default_rng(0)
x = rng.random((128, 3, 32, 32), dtype=np.float32); y = rng.integers(0, 10, 128)
cfg = AttackConfig(epsilon=8 / 255, steps=10)
best = float("inf")
for _ in range({repeat}):
    t0 = time.perf_counter()
    adv = attack(model, x, y, cfg, 0)
    w = model.params.tensors(requires_grad=True)
    with GradTape():
        loss = at_loss(model, adv, y, w)
    backward(loss, w)
    best = min(best, time.perf_counter() - t0)
print(KERNEL_BACKEND, best)
"""


def kernel_rows(repeat, batch=128):
    rng = np.random.default_rng(0)
    mods = backends()
    rows = []
    for c, h, k, s, p in CNN_LAYERS:
        xp = np.pad(rng.random((batch, c, h, h), dtype=np.float32), ((0, 0), (0, 0), (p, p), (p, p)))
        ho = (h + 2 * p - k) // s + 1
        cols = rng.random((batch * ho * ho, c * k * k), dtype=np.float32)
        label = f"{c}x{h}x{h} k{k} s{s}"
        for kname, call in (
            ("im2col", lambda m: m.im2col(xp, k, k, s, ho, ho)),
            ("col2im", lambda m: m.col2im(cols, batch, c, h + 2 * p, h + 2 * p, k, k, s, ho, ho)),
        ):
            times = {name: min(timeit.repeat(lambda: call(m), number=1, repeat=repeat)) for name, m in mods.items()}
            rows.append((kname, label, times))
    deltas = rng.standard_normal((4, 15610)).astype(np.float32)
    grad = rng.standard_normal(15610).astype(np.float32)
    starts, stops, ids = [0, 392, 400, 976, 984, 3032, 3048, 5352, 5368, 15608], \
        [392, 400, 976, 984, 3032, 3048, 5352, 5368, 15608, 15610], [0, 0, 0, 0, 1, 1, 1, 1, 2, 2]
    alpha = rng.uniform(0, 1, (4, 3))
    for kname, call in (
        ("block_inner", lambda m: m.block_inner(grad, deltas, starts, stops, ids, 3)),
        ("block_combine", lambda m: m.block_combine(deltas, alpha, starts, stops, ids)),
    ):
        times = {name: min(timeit.repeat(lambda: call(m), number=10, repeat=repeat)) / 10 for name, m in mods.items()}
        rows.append((kname, "k=4, 15610 params", times))
    return rows


def end_to_end(repeat):
    out = {}
    for pure in ("0", "1"):
        env = dict(os.environ, WOTLAB_PURE_PYTHON=pure)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env,
                             capture_output=True, text=True, check=True)
        name, secs = res.stdout.split()
        out[name] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()
    names = sorted(backends())
    print(f"{'kernel':<14} {'shape':<18} " + " ".join(f"{n + ' ms':>11}" for n in names)
          + ("   speedup" if len(names) == 2 else ""))
    for kname, label, times in kernel_rows(args.repeat):
        line = f"{kname:<14} {label:<18} " + " ".join(f"{1e3 * times[n]:>11.3f}" for n in names)
        if len(names) == 2:
            line += f"   {times['python'] / times['cython']:>6.2f}x"
        print(line)
    if args.end_to_end:
        t = end_to_end(max(1, args.repeat // 2))
        print("\nPGD-10 + training step, 128 images, default CNN:")
        for name, secs in sorted(t.items()):
            print(f"  {name:<7} {secs:.3f} s")


if __name__ == "__main__":
    main()
