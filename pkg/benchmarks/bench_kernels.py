"""Times the compiled and numpy kernel backends on training-sized inputs.

    python3 benchmarks/bench_kernels.py --repeat 20
"""
import argparse
import json
import sys
import timeit

import numpy as np

from domclp import kernels


def cases(rng):
    n = 256
    logits = rng.standard_normal((n, n)) / 0.07
    dom = rng.integers(0, 3, n // 2)
    dom = np.concatenate([dom, dom])
    mask = (dom[:, None] == dom[None, :]) & ~np.eye(n, dtype=bool)
    target = (np.arange(n) + n // 2) % n
    X = rng.standard_normal((600, 16))
    C = rng.standard_normal((16, 16))
    return {
        "masked_xent 256x256": lambda b: kernels.masked_xent(logits, mask, target, backend=b),
        "assign_nearest 600x16, k=16": lambda b: kernels.assign_nearest(X, C, backend=b),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", action="store_true", help="print results as JSON")
    args = ap.parse_args(argv)

    backends = ["numpy"]
    try:
        from domclp import _ckernels  # noqa: F401
        backends.insert(0, "cython")
    except ImportError:
        print("compiled extension not built; timing the numpy backend only", file=sys.stderr)

    rng = np.random.default_rng(0)
    rows = []
    for name, fn in cases(rng).items():
        times = {}
        for b in backends:
            fn(b)
            times[b] = min(timeit.repeat(lambda: fn(b), number=5, repeat=args.repeat)) / 5
        rows.append({"kernel": name, **{f"{b}_ms": 1e3 * t for b, t in times.items()}})
        if "cython" in times:
            rows[-1]["speedup"] = times["numpy"] / times["cython"]
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    for r in rows:
        parts = [f"{k}={v:.3f}" for k, v in r.items() if k != "kernel"]
        print(f"{r['kernel']:<30} " + "  ".join(parts))


if __name__ == "__main__":
    main()
