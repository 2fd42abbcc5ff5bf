"""Time the numba and numpy kernel backends side by side.

Usage:
    python benchmarks/bench_kernels.py [--repeat 5] [--batch 64] [--step]

Each kernel runs on the shapes the CNN detector and the audited model see at
32x32.  Outputs of the two backends are compared before timing.  ``--step``
also times one full detector training step in a subprocess per backend,
selected through ``MINTLAB_DISABLE_NUMBA``.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from mintlab import _kernels

STEP_SNIPPET = """
import time, numpy as np
from mintlab import mint, tensor as T
rng = np.random.default_rng(0)
x = rng.standard_normal(({batch}, 32, 32, 16)).astype(np.float32)
y = (np.arange({batch}) % 2).astype(np.float32)
m = mint.build_cnn(mint.CnnMintConfig(), (32, 32, 16), seed=0)
def step():
    with T.Tape() as tape:
        loss = m.loss(x, y, rng)
    tape.backward(loss)
    T.adam_step(m.parameters())
step()
t = time.perf_counter()
for _ in range({repeat}):
    step()
print((time.perf_counter() - t) / {repeat})
"""


def best_of(fn, repeat):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(batch, rng):
    x = rng.standard_normal((batch, 36, 36, 16)).astype(np.float32)
    k, stride = 5, 1
    cols = _kernels.im2col_np(x, k, k, stride)
    ho = wo = 32
    act = rng.standard_normal((batch, 32, 32, 64)).astype(np.float32)
    pooled, arg = _kernels.maxpool_fwd_np(act, 2, 2)
    grad = rng.standard_normal(pooled.shape).astype(np.float32)
    return {
        "im2col": lambda ks: ks["im2col"](x, k, k, stride),
        "col2im": lambda ks: ks["col2im"](cols, np.zeros_like(x), k, k, stride, ho, wo),
        "maxpool_fwd": lambda ks: ks["maxpool_fwd"](act, 2, 2),
        "maxpool_bwd": lambda ks: ks["maxpool_bwd"](grad, arg, act.shape, 2, 2),
        "channel_max": lambda ks: ks["channel_max"](act),
    }


def time_step(use_numba, batch, repeat):
    env = dict(os.environ, MINTLAB_DISABLE_NUMBA="0" if use_numba else "1")
    code = STEP_SNIPPET.format(batch=batch, repeat=repeat)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5, help="timed repetitions (best is kept)")
    parser.add_argument("--batch", type=int, default=64, help="batch size of the test tensors")
    parser.add_argument("--seed", type=int, default=0, help="seed for the test tensors")
    parser.add_argument("--step", action="store_true", help="also time a full training step")
    args = parser.parse_args(argv)

    if _kernels.numba is None:
        print("numba is not installed; only the numpy backend is available")
        return 1
    rng = np.random.default_rng(args.seed)
    nb = _kernels.select(True, numba_im2col=True)
    npk = _kernels.select(False)
    print(f"{'kernel':<14}{'numpy s':>12}{'numba s':>12}{'speedup':>10}")
    for name, run in cases(args.batch, rng).items():
        a, b = run(npk), run(nb)
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            if not np.array_equal(u, v):
                print(f"{name}: backends disagree")
                return 1
        t_np = best_of(lambda: run(npk), args.repeat)
        t_nb = best_of(lambda: run(nb), args.repeat)
        print(f"{name:<14}{t_np:>12.5f}{t_nb:>12.5f}{t_np / t_nb:>9.2f}x")
    if args.step:
        t_np = time_step(False, args.batch, args.repeat)
        t_nb = time_step(True, args.batch, args.repeat)
        print(f"{'train step':<14}{t_np:>12.5f}{t_nb:>12.5f}{t_np / t_nb:>9.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
