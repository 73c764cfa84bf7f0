"""Compiled versus numpy kernels on training-sized batches.

    python benchmarks/bench_kernels.py [--repeat N] [--train-steps N]

Prints one line per kernel and shape with the best time of each backend and
the speedup, after checking that both backends agree, then times a short
training run end to end under each backend (one subprocess per backend, since
the backend is fixed at import).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dropgen_lab import _kernels_py as py

try:
    from dropgen_lab import _kernels as cy
except ImportError:
    cy = None

SHAPES = [
    # (batch, in channels, out channels, length, kernel size)
    (32, 3, 16, 16, 1),
    (32, 16, 16, 16, 1),
    (64, 3, 16, 16, 3),
    (512, 16, 2, 16, 1),
]


def cases(rng, B, C, O, L, K):
    x = rng.standard_normal((B, C, L))
    w = rng.standard_normal((O, C, K))
    b = rng.standard_normal(O)
    gy = rng.standard_normal((B, O, L))
    logits = rng.standard_normal((B, O, L))
    labels = rng.integers(0, O, (B, L))
    return {
        "conv1d_forward": lambda m: m.conv1d_forward(x, w, b),
        "conv1d_backward": lambda m: m.conv1d_backward(gy, x, w),
        "softmax_xent": lambda m: m.softmax_xent(logits, labels),
    }


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(np.asarray(o)) for o in out])
    return np.ravel(out)


TRAIN_SNIPPET = """
import time
from dropgen_lab import BACKEND
from dropgen_lab.envs import shortcut_bench
from dropgen_lab.experiments import DataConfig, bench_config, make_data, make_model, ModelConfig
from dropgen_lab.representation import identity_extractor
from dropgen_lab.training import train
spec = shortcut_bench()
data = make_data(spec, DataConfig(n_train=500, n_val=100, n_test=100))
ex = identity_extractor(2)
for name, mc in (("mlp", ModelConfig()), ("conv k=3", ModelConfig(kernel_size=3))):
    m = make_model(spec, ex, mc, 0)
    t = time.perf_counter()
    train(bench_config(0.5, 0, steps={steps}, eval_every={steps}), data.train, data.val, m, ex)
    print(f"{{BACKEND:<9}} {{name:<9}} {{1e3 * (time.perf_counter() - t) / {steps}:8.3f}} ms/step")
"""


def train_benchmark(steps):
    for pure in ("1", "0"):
        env = dict(os.environ, DROPGEN_LAB_PURE=pure)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET.format(steps=steps)],
                             env=env, capture_output=True, text=True, check=True)
        sys.stdout.write(out.stdout)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--number", type=int, default=200)
    ap.add_argument("--train-steps", type=int, default=300)
    args = ap.parse_args()
    if cy is None:
        print("compiled extension not built; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16} {'shape (B,C,O,L,K)':<22} {'python us':>10} {'compiled us':>12} {'speedup':>8}")
    for shape in SHAPES:
        for name, fn in cases(rng, *shape).items():
            err = np.max(np.abs(_flat(fn(py)) - _flat(fn(cy))))
            assert err < 1e-10, f"{name} backends disagree by {err}"
            t_py = min(timeit.repeat(lambda: fn(py), number=args.number, repeat=args.repeat))
            t_cy = min(timeit.repeat(lambda: fn(cy), number=args.number, repeat=args.repeat))
            us_py, us_cy = 1e6 * t_py / args.number, 1e6 * t_cy / args.number
            print(f"{name:<16} {str(shape):<22} {us_py:>10.1f} {us_cy:>12.1f} {us_py / us_cy:>8.2f}")
    if args.train_steps > 0:
        print()
        train_benchmark(args.train_steps)


if __name__ == "__main__":
    main()
