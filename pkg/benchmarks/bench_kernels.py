"""Compare the compiled kernel core against the pure-numpy fallback.

Times each hot kernel on representative shapes, verifies the two
backends agree bit-for-bit, and prints min-of-repeats timings::

    python3 benchmarks/bench_kernels.py
"""
import sys
import time

import numpy as np

from salmask._kernels import _np as numpy_impl
from salmask.rng import Rng

try:
    from salmask._kernels import _core as cython_impl
except ImportError:
    cython_impl = None


def _time(fn, args, repeats=7):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _kernel2d(size, rng):
    k = np.abs(rng.normal(1.0, (size, size))) + 0.1
    return (k / k.sum()).astype(np.float32)


def cases():
    rng = Rng(7, 91)
    img_small = rng.normal(0.3, (32, 32, 3)).astype(np.float32)
    img_big = rng.normal(0.3, (224, 224, 3)).astype(np.float32)
    batch = rng.normal(0.3, (16, 32, 32, 8)).astype(np.float32)
    cols = numpy_impl.im2col(batch, 3, 3, 2, 2, 1, 1)
    yield ("correlate 32x32x3 k5", "correlate2d_replicate",
           (img_small, _kernel2d(5, rng.fold_in(1))))
    yield ("correlate 224x224x3 k13", "correlate2d_replicate",
           (img_big, _kernel2d(13, rng.fold_in(2))))
    yield ("im2col 16x32x32x8 k3s2", "im2col", (batch, 3, 3, 2, 2, 1, 1))
    yield ("col2im 16x32x32x8 k3s2", "col2im",
           (cols, 16, 32, 32, 8, 3, 3, 2, 2, 1, 1))


def main():
    if cython_impl is None:
        print("compiled core not built; timing the numpy fallback only")
    rows = []
    for label, name, args in cases():
        np_fn = getattr(numpy_impl, name)
        t_np = _time(np_fn, args)
        if cython_impl is None:
            rows.append((label, t_np, None, None))
            continue
        cy_fn = getattr(cython_impl, name)
        if not np.array_equal(np_fn(*args), cy_fn(*args)):
            print(f"MISMATCH: backends disagree on {label}")
            return 1
        t_cy = _time(cy_fn, args)
        rows.append((label, t_np, t_cy, t_np / t_cy))

    width = max(len(r[0]) for r in rows)
    print(f"{'case':<{width}}  {'numpy':>10}  {'cython':>10}  speedup")
    for label, t_np, t_cy, ratio in rows:
        cy = f"{t_cy * 1e3:9.3f}ms" if t_cy is not None else "       --"
        sp = f"{ratio:6.1f}x" if ratio is not None else "     --"
        print(f"{label:<{width}}  {t_np * 1e3:9.3f}ms  {cy}  {sp}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
