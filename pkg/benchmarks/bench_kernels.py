"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Each row reports the best-of-N wall time per backend and the speedup of the
compiled one. A full training step on the toy network is timed in a
subprocess per backend, since the backend is fixed at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from infarctseg.kernels import backends

STEP = """
import timeit, numpy as np
from infarctseg import network as net, training as tr
cfg = net.NetworkConfig.toy()
params = net.init_params(cfg)
rng = np.random.default_rng(0)
x = rng.normal(size=(8, 1, 64, 64)).astype(np.float32)
y = (rng.random((8, 64, 64)) > 0.7).astype(np.uint8)
def step():
    res = net.forward(cfg, params, x, train=True)
    _, g = tr.dice_loss_from_logits(res.logits, y)
    net.backward(cfg, params, res, g)
step()
print(min(timeit.repeat(step, number=1, repeat={repeat})))
"""


def cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 16, 128, 128)).astype(np.float32)
    cols = rng.normal(size=(8, 16 * 9, 128 * 128)).astype(np.float32)
    pred = rng.random((32, 256, 256)) > 0.5
    gt = rng.random((32, 256, 256)) > 0.5
    return [
        ("im2col 8x16x128^2 k3", lambda b: b.im2col(x, 3, 1, 1)),
        ("col2im 8x16x128^2 k3", lambda b: b.col2im(cols, x.shape, 3, 1, 1)),
        ("confusion 32x256^2", lambda b: b.confusion_counts(pred, gt)),
    ]


def train_step(backend: str, repeat: int) -> float:
    env = dict(os.environ, INFARCTSEG_PURE_PYTHON="1" if backend == "python" else "0")
    out = subprocess.run([sys.executable, "-c", STEP.format(repeat=repeat)], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--no-step", action="store_true", help="skip the training-step timing")
    args = ap.parse_args(argv)
    found = backends()
    names = list(found)
    print(f"{'kernel':<24}" + "".join(f"{n + ' ms':>12}" for n in names) + ("  speedup" if "cython" in found else ""))
    rows = [(label, {n: min(timeit.repeat(lambda: fn(found[n]), number=1, repeat=args.repeat)) for n in names}) for label, fn in cases()]
    if not args.no_step:
        rows.append(("train step toy b8 64^2", {n: train_step(n, args.repeat) for n in names}))
    for label, t in rows:
        line = f"{label:<24}" + "".join(f"{t[n] * 1e3:>12.1f}" for n in names)
        if "cython" in t:
            line += f"  {t['python'] / t['cython']:>6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
