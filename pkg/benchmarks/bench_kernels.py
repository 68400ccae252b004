"""Compiled vs pure-numpy kernels: counter normals and the affine Euler-Maruyama loop.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both backends must give bit-identical output; the script checks that before
timing.  Exits non-zero if the compiled extension is not built.
"""
import argparse
import sys
import timeit

import numpy as np

from latentsde import _backend, _rng
from latentsde.sde import catalog, uniform_times


def cases():
    key = _rng.stream_key(0, "wiener")
    ou = catalog("ou4d")
    B, c, M = ou.affine
    times = uniform_times(100_000, 0.01)
    z0 = np.zeros(4)
    return {
        "normals 1e6": lambda k: k.normals(key, 0, 1_000_000),
        "uniforms 1e6": lambda k: k.uniforms(key, 0, 1_000_000),
        "em_affine ou4d 1e5 steps": lambda k: k.em_affine(z0, times, B, c, M, key),
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if not _backend.compiled_available():
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    py, cy = _backend.get("python"), _backend.get("compiled")
    print(f"{'case':28s} {'python [ms]':>12s} {'compiled [ms]':>14s} {'speed-up':>9s}")
    for name, fn in cases().items():
        if not np.array_equal(fn(py), fn(cy)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 2
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat))
        print(f"{name:28s} {t_py * 1e3:12.1f} {t_cy * 1e3:14.1f} {t_py / t_cy:8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
