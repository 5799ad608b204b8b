"""Numba vs numpy kernel timings, plus one training epoch under each backend.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

The per-kernel numbers call both implementations in one process. The
end-to-end numbers run a fresh interpreter per backend because the flag
is read at import time.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from acnorm import kernels

EPOCH_SNIPPET = """
import time
from acnorm.data import SyntheticTaskSpec, generate_task
from acnorm.model import ArchSpec, build_model
from acnorm.training import TrainConfig, train
d = generate_task(SyntheticTaskSpec(image_size=(32, 32), n_train=64, n_val=4, n_test=4, seed=0))
m = build_model(ArchSpec(widths=[8, 16, 32]))
train(m, d["train"], TrainConfig(epochs=1, batch_size=16))  # warm-up and jit
t = time.perf_counter()
train(m, d["train"], TrainConfig(epochs=2, batch_size=16))
print((time.perf_counter() - t) / 2)
"""


def bench(fn, repeat):
    fn()  # compile
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(rng):
    x = rng.normal(size=(16, 34, 34, 16)).astype(np.float32)
    cols = rng.normal(size=(16, 32, 32, 3, 3, 16)).astype(np.float32)
    pool_in = rng.normal(size=(16, 32, 32, 16)).astype(np.float32)
    _, idx = kernels.NUMPY.maxpool2(pool_in)
    g = rng.normal(size=(16, 16, 16, 16)).astype(np.float32)
    return {
        "im2col": lambda k: k.im2col(x, 3, 3, 1),
        "col2im": lambda k: k.col2im(cols, 34, 34, 1),
        "maxpool2": lambda k: k.maxpool2(pool_in),
        "maxpool2_backward": lambda k: k.maxpool2_backward(g, idx),
    }


def epoch_seconds(flag):
    env = dict(os.environ, ACNORM_USE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json")
    ap.add_argument("--skip-epoch", action="store_true")
    args = ap.parse_args()
    if kernels.NUMBA is None:
        sys.exit("numba is not importable; nothing to compare")

    rows = []
    for name, call in kernel_cases(np.random.default_rng(0)).items():
        t_np = bench(lambda: call(kernels.NUMPY), args.repeat)
        t_nb = bench(lambda: call(kernels.NUMBA), args.repeat)
        rows.append({"case": name, "numpy_ms": 1e3 * t_np, "numba_ms": 1e3 * t_nb, "speedup": t_np / t_nb})
    if not args.skip_epoch:
        t_np, t_nb = epoch_seconds("0"), epoch_seconds("1")
        rows.append({"case": "train_epoch", "numpy_ms": 1e3 * t_np, "numba_ms": 1e3 * t_nb, "speedup": t_np / t_nb})

    print(f"{'case':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for r in rows:
        print(f"{r['case']:<20}{r['numpy_ms']:>12.2f}{r['numba_ms']:>12.2f}{r['speedup']:>10.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
