"""Compare the compiled and numpy GRU kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints per-call times for the forward scan and BPTT at a few shapes, the
speedup, and the max abs difference between the two backends' outputs.
"""
import argparse
import time

import numpy as np

from ratlab import kernels

SHAPES = [(32, 20, 16), (32, 60, 32), (64, 120, 64)]   # (batch, length, hidden)


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(shape, repeat):
    B, L, H = shape
    rng = np.random.default_rng(0)
    gx = rng.normal(size=(B, L, 3 * H))
    U = rng.normal(scale=0.3, size=(H, 3 * H))
    dhs = rng.normal(size=(B, L, H))
    out = {}
    for backend in ("python", "cython"):
        kernels.use(backend)
        fwd = kernels.gru_forward(gx, U)
        bwd = kernels.gru_backward(dhs, U, *fwd)
        tf = _time(lambda: kernels.gru_forward(gx, U), repeat)
        tb = _time(lambda: kernels.gru_backward(dhs, U, *fwd), repeat)
        out[backend] = (tf, tb, fwd, bwd)
    diff = max(float(np.max(np.abs(a - b))) for a, b in
               zip(out["python"][2] + out["python"][3], out["cython"][2] + out["cython"][3]))
    return out, diff


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    try:
        kernels.use("cython")
    except ImportError:
        print("compiled kernel not built; only the numpy backend is available")
        return
    print(f"{'B,L,H':>12} {'fwd py ms':>10} {'fwd cy ms':>10} {'x':>6} "
          f"{'bwd py ms':>10} {'bwd cy ms':>10} {'x':>6} {'max|diff|':>10}")
    for shape in SHAPES:
        res, diff = bench(shape, args.repeat)
        fp, bp = res["python"][:2]
        fc, bc = res["cython"][:2]
        print(f"{','.join(map(str, shape)):>12} {fp * 1e3:10.2f} {fc * 1e3:10.2f} {fp / fc:6.1f} "
              f"{bp * 1e3:10.2f} {bc * 1e3:10.2f} {bp / bc:6.1f} {diff:10.1e}")


if __name__ == "__main__":
    main()
