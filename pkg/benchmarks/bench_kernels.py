"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel and backend, plus the speedup, and checks that
both backends return identical results on the benchmark inputs.
"""

import argparse
import timeit

import numpy as np

from handqa import kernels
from handqa.forge import sample_clean_hand
from handqa.render import render_hand


def hand_joints(seed):
    """Joints of one clean hand; rendering them is the realistic workload."""
    rng = np.random.default_rng([seed, 0])
    return sample_clean_hand(rng, False).keypoints.joints


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "compiled" not in kernels.BACKENDS:
        print("compiled extension not built; only the python backend is available")
    rng = np.random.default_rng(0)
    joints = [hand_joints(i) for i in range(20)]
    segs = rng.uniform(0, 64, (40, 4))
    radii = rng.uniform(0.5, 3.0, 40)
    x = rng.integers(0, 20, 2000).astype(float)
    y = rng.normal(size=2000).round(2)

    cases = {
        "render_segments (40 segments, 64x64)": lambda: kernels.render_segments(segs, radii, 64),
        "render_hand (20 hands)": lambda: [render_hand(j) for j in joints],
        "kendall_counts (n=2000)": lambda: kernels.kendall_counts(x, y),
    }
    start = kernels.backend_name()
    try:
        for label, fn in cases.items():
            times, outs = {}, {}
            for name in kernels.BACKENDS:
                kernels.use_backend(name)
                number = 3
                times[name] = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
                outs[name] = fn()
                print(f"{label:<40} {name:<9} {times[name] * 1e3:9.3f} ms")
            if len(times) == 2:
                a, b = outs["python"], outs["compiled"]
                same = all(np.array_equal(u, v) for u, v in zip(a, b)) if isinstance(a, list) \
                    else np.array_equal(np.asarray(a), np.asarray(b))
                print(f"{'':<40} speedup {times['python'] / times['compiled']:6.1f}x, identical output {same}")
    finally:
        kernels.use_backend(start)


if __name__ == "__main__":
    main()
