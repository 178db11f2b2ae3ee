"""Time the numba kernels against their numpy fallbacks and check they agree.

Usage:
    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --sizes 100 400 1600 --repeat 5
    python3 benchmarks/bench_kernels.py --json results.json
"""

import argparse
import json
import time

import numpy as np

from stainpool import _kernels as K


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n, rng):
    pts = rng.normal(size=(n, 16))
    cand = rng.random((n, n)) < 0.5
    logits = rng.normal(size=(n, n))
    mask = rng.random((n, n)) < 0.1
    np.fill_diagonal(mask, True)
    y = K.masked_softmax_numpy(logits, mask)
    g = rng.normal(size=(n, n))
    scores = rng.random(10 * n)
    labels = (rng.random(10 * n) < 0.3).astype(np.int64)
    return {
        "knn_select": ((pts, cand, 8), K.knn_select_numpy, K.knn_select_numba),
        "masked_softmax": ((logits, mask), K.masked_softmax_numpy, K.masked_softmax_numba),
        "softmax_rows_backward": ((y, g), K.softmax_rows_backward_numpy, K.softmax_rows_backward_numba),
        "average_precision": ((scores, labels), K.average_precision_numpy, K.average_precision_numba),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[100, 400, 1600])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args()

    if not K.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    rng = np.random.default_rng(args.seed)
    # compile once on a tiny input so timings exclude JIT cost
    for inputs, _, fast in cases(8, rng).values():
        fast(*inputs)

    rows = []
    print(f"{'kernel':<24}{'n':>6}{'numpy s':>12}{'numba s':>12}{'speedup':>9}  agree")
    for n in args.sizes:
        for name, (inputs, slow, fast) in cases(n, rng).items():
            a, b = slow(*inputs), fast(*inputs)
            agree = bool(np.array_equal(a, b)) if name == "knn_select" else bool(np.allclose(a, b, rtol=1e-12, atol=1e-14))
            t_np = best_of(slow, inputs, args.repeat)
            t_nb = best_of(fast, inputs, args.repeat)
            rows.append({"kernel": name, "n": n, "numpy": t_np, "numba": t_nb, "agree": agree})
            print(f"{name:<24}{n:>6}{t_np:>12.5f}{t_nb:>12.5f}{t_np / t_nb:>9.1f}  {agree}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
