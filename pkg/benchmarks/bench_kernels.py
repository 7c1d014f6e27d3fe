"""Compare the numba and numpy paths of the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeats 20] [--skip-e2e]

Per-kernel timings call both implementations in one process on equal
inputs. The end-to-end rows time one pretraining epoch in two fresh
processes, with and without MSPE_DISABLE_NUMBA=1.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from mspe import _accel

# activations of the desk-scale model: (batch, tokens, width)
SHAPES = [(64, 17, 32), (64, 17, 128), (256, 17, 128)]

E2E = """
import time
from mspe.pipeline import ModelConfig, init_model, synthetic_split
from mspe.train import TrainConfig, pretrain
ds = synthetic_split(0, "train", 250)
p, k, b = init_model(ModelConfig(), 0)
ds.at_resolution(32)
cfg = TrainConfig(learning_rate=0.05, epochs=1, seed=0, base_resolution=32)
pretrain(p, k, b, ds.subset(range(64)), cfg)
t0 = time.perf_counter()
pretrain(p, k, b, ds, cfg)
print(time.perf_counter() - t0)
"""


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(shape, dtype, rng):
    x = rng.normal(size=shape).astype(dtype)
    d = shape[-1]
    g = rng.normal(size=d).astype(dtype)
    b = rng.normal(size=d).astype(dtype)
    _, xhat, inv = _accel.layernorm_forward_numpy(x, g, b, 1e-6)
    return [
        ("ln fwd", lambda: _accel.layernorm_forward_numpy(x, g, b, 1e-6)[0],
         lambda: _accel.layernorm_forward(x, g, b, 1e-6)[0]),
        ("ln bwd", lambda: _accel.layernorm_backward_numpy(x, g, xhat, inv),
         lambda: _accel.layernorm_backward(x, g, xhat, inv)),
        ("gelu fwd", lambda: _accel.gelu_forward_numpy(x)[0], lambda: _accel.gelu_forward(x)[0]),
    ]


def run_e2e(disable):
    env = dict(os.environ, MSPE_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--skip-e2e", action="store_true", help="skip the pretraining-epoch timing")
    args = ap.parse_args()
    if not _accel.USE_NUMBA:
        sys.exit("numba is disabled or missing; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'shape':<18}{'dtype':<9}{'kernel':<10}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  max |diff|")
    for shape in SHAPES:
        for dtype in (np.float32, np.float64):
            for name, ref, fast in kernel_cases(shape, dtype, rng):
                t_np, t_nb = best_of(ref, args.repeats), best_of(fast, args.repeats)
                diff = float(np.abs(ref() - fast()).max())
                print(f"{str(shape):<18}{np.dtype(dtype).name:<9}{name:<10}"
                      f"{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.2f}x  {diff:.2e}")
    if not args.skip_e2e:
        t_np, t_nb = run_e2e(True), run_e2e(False)
        print(f"\npretraining epoch (1000 images, float32): numpy {t_np:.2f} s, numba {t_nb:.2f} s, "
              f"speedup {t_np / t_nb:.2f}x")


if __name__ == "__main__":
    main()
