"""Compiled vs pure-numpy patch kernels, alone and inside a conv2d forward/backward.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from maskd import _kernels_py, kernels
from maskd import autodiff as ad

try:
    from maskd import _kernels as compiled
except ImportError:
    compiled = None

SHAPES = [  # (N, C, H, W, k): a toy-net layer at the default map size, a 1x1 head, a wide small map
    (8, 16, 64, 64, 3),
    (8, 32, 64, 64, 1),
    (8, 32, 32, 32, 3),
]


def use(backend) -> None:
    kernels.im2col, kernels.col2im = backend.im2col, backend.col2im


def conv_step(x: np.ndarray, w: np.ndarray) -> None:
    xt, wt = ad.tensor(x, requires_grad=True), ad.tensor(w, requires_grad=True)
    ad.backward(ad.reduce(ad.conv2d(xt, wt)))


def best_of(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if compiled is None:
        raise SystemExit("compiled kernels are not built; run `pip install --no-build-isolation -e .` first")

    rng = np.random.default_rng(0)
    backends = {"cython": compiled, "python": _kernels_py}
    print(f"{'shape':<22}{'kernel':<10}{'cython ms':>11}{'python ms':>11}{'speedup':>9}")
    for N, C, H, W, k in SHAPES:
        x = rng.normal(size=(N, C, H, W))
        w = rng.normal(size=(C, C, k, k))
        cols = compiled.im2col(x, k)
        jobs = {
            "im2col": lambda b: b.im2col(x, k),
            "col2im": lambda b: b.col2im(cols, k, x.shape),
        }
        label = f"{N}x{C}x{H}x{W} k={k}"
        for name, job in jobs.items():
            t = {b: best_of(lambda: job(mod), args.repeat) for b, mod in backends.items()}
            print(f"{label:<22}{name:<10}{t['cython']:>11.3f}{t['python']:>11.3f}{t['python'] / t['cython']:>8.2f}x")
        t = {}
        for b, mod in backends.items():
            use(mod)
            t[b] = best_of(lambda: conv_step(x, w), max(3, args.repeat // 4))
        print(f"{label:<22}{'conv f+b':<10}{t['cython']:>11.3f}{t['python']:>11.3f}{t['python'] / t['cython']:>8.2f}x")
    use(compiled)


if __name__ == "__main__":
    main()
