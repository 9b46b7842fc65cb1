"""Compare the compiled and numpy kernel backends on representative workloads.

    python benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0] [--json out.json]
"""

import argparse
import json
import sys
import timeit

import numpy as np

from amoekit import kernels


def workloads(scale, rng):
    n_img = int(4000 * scale)
    lengths = np.sort(rng.integers(69, 2310, size=n_img))[::-1].copy()
    loads = rng.integers(1000, 2600, size=int(2000 * scale))
    points = rng.normal(size=(int(50_000 * scale), 64)).astype(np.float32)
    centroids = rng.normal(size=(256, 64))
    summaries = rng.normal(size=(int(512 * scale), 256))
    return {
        "ffd_assign": lambda impl: kernels.ffd_assign(lengths, 2600, 16, impl=impl),
        "lpt_assign": lambda impl: kernels.lpt_assign(loads, 64, impl=impl),
        "nearest_centroid": lambda impl: kernels.nearest_centroid(points, centroids, impl=impl),
        "pairwise_distances": lambda impl: kernels.pairwise_distances(summaries, impl=impl),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="multiply workload sizes")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; timing the numpy fallback only", file=sys.stderr)
    jobs = workloads(args.scale, np.random.default_rng(args.seed))
    results = {}
    print(f"{'kernel':<20}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, job in jobs.items():
        row = {}
        for bname, impl in backends.items():
            job(impl)  # warm-up
            row[bname] = min(timeit.repeat(lambda: job(impl), number=1, repeat=args.repeat))
        speedup = row["python"] / row["cython"] if "cython" in row else float("nan")
        results[name] = dict(row, speedup=speedup)
        print(f"{name:<20}" + "".join(f"{row[b] * 1e3:>10.2f}ms" for b in backends) + f"{speedup:>9.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
