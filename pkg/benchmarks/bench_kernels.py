"""Time the compiled kernels against the numpy fallback.

Each case calls the public function that dispatches to the kernel, so the
numbers include the same argument preparation a real run pays.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
import argparse
import json
import timeit

import numpy as np

from rpnbf import kernels
from rpnbf.forest import TrainSet, boost
from rpnbf.geometry import nms_indices
from rpnbf.tensors import FeatureMap, roi_pool_many


def cases(rng: np.random.Generator) -> dict:
    xy = rng.uniform(0, 600, (2000, 2))
    boxes = np.concatenate([xy, rng.uniform(16, 120, (2000, 2))], axis=1)
    scores = rng.random(2000)

    fm = FeatureMap(rng.normal(size=(64, 45, 80)), 8)
    rxy = rng.uniform(0, [500, 220], (300, 2))
    rois = np.concatenate([rxy, rng.uniform(20, 140, (300, 2))], axis=1)

    X = rng.normal(size=(4000, 200)).astype(np.float32)
    y = np.where(X[:, 0] + 0.5 * X[:, 7] > 0, 1, -1)
    ts = TrainSet(X, y, np.full(4000, 0.5))
    forest = boost(ts, 32, 2, 0)
    Xs = rng.normal(size=(20000, 200)).astype(np.float32)

    return {
        "nms 2000 boxes": lambda: nms_indices(boxes, scores, 0.7),
        "roi_pool 300 rois x 64ch": lambda: roi_pool_many(fm, rois),
        "boost 32 depth-2 trees, 4000x200": lambda: boost(ts, 32, 2, 0),
        "forest score 20000 rows": lambda: forest.score_many(Xs),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    backends = sorted(kernels.available_backends())
    if "cython" not in backends:
        print("compiled kernels unavailable; timing the fallback only")
    work = cases(np.random.default_rng(0))
    prev = kernels.backend
    results: dict = {}
    try:
        for name, fn in work.items():
            for b in backends:
                kernels.use(b)
                fn()  # warm up
                results.setdefault(name, {})[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    finally:
        kernels.backend = prev

    print(f"{'case':36s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, t in results.items():
        row = f"{name:36s}" + "".join(f"{t[b] * 1e3:10.2f}ms" for b in backends)
        if len(backends) > 1:
            row += f"{t['python'] / t['cython']:11.1f}x"
        print(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
