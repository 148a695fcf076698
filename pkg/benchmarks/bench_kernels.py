"""Time the numba and numpy backends of the hot loops.

Each backend runs in its own interpreter because the backend is fixed at
import time by ``GRADAMP_DISABLE_NUMBA``. Compilation happens in a warm-up
call that is excluded from the timings.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from gradamp import _kernels
from gradamp.specialfn import bessel_j

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
pts = rng.uniform(-3, 3, (20000, 2))
ang = 2 * np.pi * np.arange(128) / 128
nodes = np.stack([np.cos(ang), np.sin(ang)], 1)
coeffs = rng.normal(size=128) + 1j * rng.normal(size=128)
powers = np.array([[0, 0], [1, 0], [0, 1]])
hpts = rng.uniform(0, 1, (3000, 2))
grads = rng.normal(size=(3000, 2)) + 1j * rng.normal(size=(3000, 2))
first, second = rng.integers(0, 3000, 2_000_000), rng.integers(0, 3000, 2_000_000)
xs = np.linspace(0.01, 40.0, 20000)

cases = {
    "plane_wave_sum 20000x128x3": lambda: _kernels.plane_wave_sum(pts, nodes, coeffs, powers),
    "holder_all_pairs 3000": lambda: _kernels.holder_all_pairs(hpts, grads),
    "holder_listed_pairs 2e6": lambda: _kernels.holder_listed_pairs(hpts, grads, first, second),
    "bessel_j order 7.5, 20000 points": lambda: bessel_j(7.5, xs),
}
out = {"numba": _kernels.USE_NUMBA}
for name, fn in cases.items():
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    out[name] = best
print(json.dumps(out))
"""


def run_backend(disable: bool, repeat: int) -> dict:
    env = dict(os.environ, GRADAMP_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True,
                         text=True, check=True)
    return json.loads(res.stdout)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    fast = run_backend(False, args.repeat)
    slow = run_backend(True, args.repeat)
    if not fast.pop("numba"):
        print("numba is unavailable; both columns use numpy")
    slow.pop("numba")
    print(f"{'kernel':36s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speed-up':>9s}")
    for name in slow:
        print(f"{name:36s} {fast[name]:10.4f} {slow[name]:10.4f} {slow[name] / fast[name]:9.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
