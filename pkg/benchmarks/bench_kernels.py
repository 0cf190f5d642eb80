"""Time the compiled and pure-Python kernel backends on representative inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel with the best-of-``repeat`` wall time for each
available backend and the speedup of the compiled one.
"""

import argparse
import time

import numpy as np

from segnl.kernels import available_backends, load_backend


def cases(rng):
    surface = rng.uniform(size=(64, 64, 32))
    mask = np.ones(surface.shape, dtype=np.uint8)
    seeds = np.array([[20, 32, 16], [44, 32, 16]], dtype=np.intp)
    labels = np.array([1, 2], dtype=np.uint8)
    level = 1.0  # floods the whole grid
    x = rng.normal(size=(8, 64, 64, 16)).astype(np.float32)
    cols = rng.normal(size=(8 * 64 * 64, 9 * 16)).astype(np.float32)
    out, arg = load_backend("python").maxpool2_forward(x)
    dout = rng.normal(size=out.shape).astype(np.float32)
    return {
        "flood 64x64x32": lambda k: k.flood(surface, mask, seeds, labels, level, False),
        "im2col3x3 8x64x64x16": lambda k: k.im2col3x3(x),
        "col2im3x3 8x64x64x16": lambda k: k.col2im3x3(cols, 8, 64, 64),
        "maxpool2 fwd 8x64x64x16": lambda k: k.maxpool2_forward(x),
        "maxpool2 bwd 8x64x64x16": lambda k: k.maxpool2_backward(dout, arg),
    }


def best_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    backends = available_backends()
    mods = {name: load_backend(name) for name in backends}
    print(f"{'kernel':<26}" + "".join(f"{b + ' (ms)':>14}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        t = {b: best_time(lambda: fn(mods[b]), args.repeat) for b in backends}
        row = f"{name:<26}" + "".join(f"{1e3 * t[b]:14.2f}" for b in backends)
        if len(backends) == 2:
            row += f"{t['python'] / t['cython']:9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
