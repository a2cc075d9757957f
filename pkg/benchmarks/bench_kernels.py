"""Time the numpy and numba kernel backends side by side.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs once untimed (so numba compilation is excluded), then the
best of ``--repeat`` timings is reported per backend, together with the
max-abs difference between the two outputs.
"""

import argparse
import timeit

import numpy as np

from coarl.kernels import numba_backend, numpy_backend


def cases(rng):
    x = rng.normal(size=(512, 259))
    h = rng.normal(size=(512, 64))
    g, b = rng.normal(size=64), rng.normal(size=64)
    targets = rng.integers(0, 259, 512)
    targets[::7] = -100
    logp = numpy_backend.log_softmax_fwd(x)
    sm = numpy_backend.softmax_fwd(x)
    _, xhat, rstd = numpy_backend.layer_norm_fwd(h, g, b, 1e-5)
    flat = h.ravel()
    a_ids, b_ids = rng.integers(0, 50, 300), rng.integers(0, 50, 300)
    return {
        "layer_norm_fwd": lambda k: k.layer_norm_fwd(h, g, b, 1e-5)[0],
        "layer_norm_bwd": lambda k: k.layer_norm_bwd(h, xhat, rstd, g)[0],
        "softmax_fwd": lambda k: k.softmax_fwd(x),
        "softmax_bwd": lambda k: k.softmax_bwd(x, sm),
        "log_softmax_fwd": lambda k: k.log_softmax_fwd(x),
        "log_softmax_bwd": lambda k: k.log_softmax_bwd(x, logp),
        "gelu_fwd": lambda k: k.gelu_fwd(flat),
        "gelu_bwd": lambda k: k.gelu_bwd(flat, flat),
        "cross_entropy_fwd": lambda k: k.cross_entropy_fwd(x, targets, -100)[0],
        "cross_entropy_bwd": lambda k: k.cross_entropy_bwd(logp, targets, -100, 1.0 / 512),
        "lcs_length": lambda k: k.lcs_length(a_ids, b_ids),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if numba_backend is None:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max diff':>11}")
    for name, fn in cases(rng).items():
        ref, fast = fn(numpy_backend), fn(numba_backend)
        diff = float(np.max(np.abs(np.asarray(ref, dtype=float) - np.asarray(fast, dtype=float))))
        t_np = min(timeit.repeat(lambda: fn(numpy_backend), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn(numba_backend), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x{diff:>11.1e}")


if __name__ == "__main__":
    main()
