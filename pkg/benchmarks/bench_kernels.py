"""Compare the numba kernels with their numpy fallbacks.

Part one times each kernel in-process on both backends. Part two runs one
training step of a small network in two subprocesses, one per value of
``R2UPP_NUMBA``, so the backend choice made at import is exercised end to end.

    python benchmarks/bench_kernels.py [--repeat 20] [--skip-step]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from r2upp import _kernels as K

STEP = """
import json, time
import numpy as np
from r2upp import _kernels
from r2upp.data import synth_dataset
from r2upp.graph import ArchitectureConfig, NestedUNet
from r2upp.metrics import total_loss
from r2upp.trainer import stack_samples

x, y = stack_samples(synth_dataset(0, 4, 64))
model = NestedUNet(ArchitectureConfig(depth=4, filters=(8, 16, 32, 64, 128), t=2), seed=0)

def step():
    model.zero_grad()
    res = model.forward(x, train=True)
    total_loss(y, [res.heads[q] for q in sorted(res.heads)]).backward()

step()  # compile / warm caches
times = []
for _ in range({repeat}):
    t0 = time.perf_counter()
    step()
    times.append(time.perf_counter() - t0)
print(json.dumps({{"backend": _kernels.BACKEND, "best": min(times)}}))
"""


def kernel_cases(rng):
    xp = rng.normal(size=(4, 32, 34, 34))
    cols = K.im2col_numpy(xp, 3, 3, 1)
    x = rng.normal(size=(4, 32, 64, 64))
    _, idx = K.maxpool2x2_numpy(x)
    g = rng.normal(size=(4, 32, 32, 32))
    patches = rng.uniform(size=(400, 48, 48))
    anchors = np.array([(r, c) for r in range(0, 209, 8) for c in range(0, 209, 8)][:400])
    return {
        "im2col 4x32x34x34 k3": lambda b: getattr(K, f"im2col_{b}")(xp, 3, 3, 1),
        "col2im 4x32x34x34 k3": lambda b: getattr(K, f"col2im_{b}")(cols, xp.shape, 3, 3, 1),
        "maxpool 4x32x64x64": lambda b: getattr(K, f"maxpool2x2_{b}")(x),
        "maxpool backward": lambda b: getattr(K, f"maxpool2x2_backward_{b}")(g, idx),
        "stitch 400x48x48": lambda b: getattr(K, f"stitch_accumulate_{b}")(patches, anchors, 256, 256),
    }


def bench_kernels(repeat):
    if not K.HAVE_NUMBA:
        print("numba not available (or R2UPP_NUMBA=0); kernel comparison skipped")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24} {'numpy ms':>10} {'numba ms':>10} {'speed-up':>9}")
    for name, fn in kernel_cases(rng).items():
        fn("numba")  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: fn("numpy"), number=1, repeat=repeat))
        t_nb = min(timeit.repeat(lambda: fn("numba"), number=1, repeat=repeat))
        print(f"{name:<24} {t_np * 1e3:>10.2f} {t_nb * 1e3:>10.2f} {t_np / t_nb:>8.2f}x")


def bench_step(repeat):
    print(f"\n{'training step, D=4, 4x1x64x64':<32} {'best s':>8}")
    results = {}
    for flag in ("0", "1"):
        env = dict(os.environ, R2UPP_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", STEP.format(repeat=repeat)], env=env, capture_output=True, text=True, check=True)
        info = json.loads(out.stdout.strip().splitlines()[-1])
        results[info["backend"]] = info["best"]
        print(f"{'R2UPP_NUMBA=' + flag + ' (' + info['backend'] + ')':<32} {info['best']:>8.3f}")
    if len(results) == 2:
        print(f"{'speed-up':<32} {results['numpy'] / results['numba']:>7.2f}x")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--skip-step", action="store_true", help="only time the kernels")
    args = parser.parse_args()
    bench_kernels(args.repeat)
    if not args.skip_step:
        bench_step(max(1, args.repeat // 5))


if __name__ == "__main__":
    main()
