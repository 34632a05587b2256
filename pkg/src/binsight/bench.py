"""Time each kernel under both backends.

    python -m binsight.bench [--repeat N]

The first numba call of each kernel (JIT compile or cache load) is excluded.
"""
from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import kernels


def _cases(rng: np.random.Generator) -> dict:
    data = rng.integers(0, 256, 64 * 1024, dtype=np.uint8)
    centers = (np.arange(4096, dtype=np.int64) * data.size) // 4096
    x = rng.standard_normal((32, 64, 64, 64)).astype(np.float32)
    pooled, idx = kernels.get("maxpool2_forward", "numpy")(x)
    d = np.arange(4096, dtype=np.int64)
    xs, ys = kernels.get("hilbert_d2xy", "numpy")(6, d)
    gcols = rng.standard_normal((8, 32, 32, 3, 3, 16)).astype(np.float32)
    return {
        "hilbert_d2xy": (6, d),
        "hilbert_xy2d": (6, xs, ys),
        "window_entropies": (data, centers, 64),
        "maxpool2_forward": (x,),
        "maxpool2_backward": (pooled, idx),
        "col2im": (gcols, 3, 1),
    }


def _best(fn, args, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def run(repeat: int = 5, seed: int = 0) -> list:
    """Return ``(kernel, numpy_seconds, numba_seconds or None)`` rows."""
    cases = _cases(np.random.default_rng(seed))
    rows = []
    for name, args in cases.items():
        t_np = _best(kernels.get(name, "numpy"), args, repeat)
        t_nb = None
        if kernels.HAVE_NUMBA:
            fast = kernels.get(name, "numba")
            fast(*args)
            t_nb = _best(fast, args, repeat)
        rows.append((name, t_np, t_nb))
    return rows


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m binsight.bench", description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, t_np, t_nb in run(args.repeat, args.seed):
        if t_nb is None:
            print(f"{name:<20}{t_np * 1e3:>12.3f}{'n/a':>12}{'':>10}")
        else:
            print(f"{name:<20}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
