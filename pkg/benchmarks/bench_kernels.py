"""Compare the numba kernels against the pure-numpy fallback.

Each backend runs in its own subprocess (the flag is read at import time):

    python3 benchmarks/bench_kernels.py            # both backends, table
    python3 benchmarks/bench_kernels.py --worker   # one backend, JSON lines

Timings are the median of ``--repeats`` runs after one warm-up call, so
numba compilation time is excluded.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import subprocess
import sys
import time

import numpy as np


def _median_time(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def worker(repeats: int):
    from tgd import _accel, tda
    from tgd import tensor as T
    from tgd.data import gen_synthetic
    from tgd.distill import loss_ce
    from tgd.nets import NetSpec, build

    rng = np.random.default_rng(0)
    signals = [rng.random(1024) for _ in range(50)]
    images = gen_synthetic("bars", 8, seed=0).images
    x = rng.normal(size=(128, 16, 16, 8)).astype(np.float32)
    cols = T.im2col(x, 3, 1, 1, 16, 16)
    net = build(NetSpec(num_classes=4, stem_stride=2, base_width=4), seed=0)
    batch = gen_synthetic("bars", 128, seed=1)
    inputs, labels = batch.inputs(), batch.labels

    def step():
        net.zero_grad()
        T.backward(loss_ce(net.forward(T.Tensor(inputs)).logits, labels))

    cases = {
        "merge_pairs (50 x 1024)": lambda: [tda.merge_pairs(s) for s in signals],
        "extract_pi (8 images)": lambda: tda.extract_pi_batch(images),
        "col2im (128x16x16x8, k3)": lambda: T.col2im(cols, x.shape, 3, 1, 1, 16, 16),
        "train step (b=128)": step,
    }
    backend = "numba" if _accel.NUMBA_AVAILABLE else "numpy"
    for name, fn in cases.items():
        print(json.dumps({"backend": backend, "case": name, "seconds": _median_time(fn, repeats)}), flush=True)


def run_backend(disable: bool, repeats: int) -> dict[str, float]:
    env = dict(os.environ, TGD_DISABLE_NUMBA="1" if disable else "0")
    proc = subprocess.run([sys.executable, __file__, "--worker", "--repeats", str(repeats)], env=env, capture_output=True, text=True, check=True)
    rows = [json.loads(line) for line in proc.stdout.splitlines() if line.startswith("{")]
    return {r["case"]: r["seconds"] for r in rows}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--worker", action="store_true")
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    if args.worker:
        worker(args.repeats)
        return
    fast = run_backend(False, args.repeats)
    slow = run_backend(True, args.repeats)
    print(f"{'kernel':<28}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for case in fast:
        print(f"{case:<28}{fast[case] * 1e3:>12.2f}{slow[case] * 1e3:>12.2f}{slow[case] / fast[case]:>9.1f}x")


if __name__ == "__main__":
    main()
