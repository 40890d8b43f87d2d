"""Timing comparison of the jitted kernels against the pure-numpy fallback.

Covers the two hot kernels (BFS hop distances over a CSR adjacency and
bulk prefix proximity) plus one protocol-level consumer, the full-world
invariant audit, which runs one BFS per node and a proximity block per
node. Both implementations are cross-checked for equal output before any
timing is reported.

Run from the repository root:

    python3 benchmarks/kernel_bench.py [--n 2000] [--repeat 5]

The numba columns require numba importable and UIPSIM_PURE_NUMPY unset.
"""

import argparse
import statistics
import time
from random import Random

import numpy as np

from uipsim import _kernels
from uipsim.routing import ProtocolParams, World, derive_seed
from uipsim.underlay import TopologySpec, build_topology


def best_of(fn, repeat, warmup=2):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), statistics.median(times)


def report_row(name, numpy_best, numba_best):
    if numba_best is None:
        print(f"{name:<28} numpy {numpy_best * 1e3:9.3f} ms   numba     n/a")
        return
    speedup = numpy_best / numba_best if numba_best > 0 else float("inf")
    print(
        f"{name:<28} numpy {numpy_best * 1e3:9.3f} ms   "
        f"numba {numba_best * 1e3:9.3f} ms   x{speedup:.1f}"
    )


def bench_bfs(underlay, repeat):
    indptr, indices = underlay._csr()
    n = underlay.n
    sources = list(range(0, n, max(1, n // 64)))

    def run_numpy():
        for s in sources:
            _kernels.bfs_distances_numpy(indptr, indices, n, s)

    numba_best = None
    if _kernels.USING_NUMBA:
        out = np.empty(n, dtype=np.int32)

        def run_numba():
            for s in sources:
                _kernels.bfs_distances_numba(indptr, indices, n, s, out)

        got = _kernels.bfs_distances_numba(indptr, indices, n, 0, np.empty(n, np.int32))
        want = _kernels.bfs_distances_numpy(indptr, indices, n, 0)
        assert np.array_equal(got, want), "bfs implementations disagree"
        numba_best, _ = best_of(run_numba, repeat)
    numpy_best, _ = best_of(run_numpy, repeat)
    report_row(f"bfs x{len(sources)} (n={n})", numpy_best, numba_best)


def bench_proximity(repeat, count=200_000):
    rng = Random(7)
    values = np.array([rng.getrandbits(64) for _ in range(count)], dtype=np.uint64)
    other = rng.getrandbits(64)

    def run_numpy():
        _kernels.proximity_block_numpy(values, other, 64)

    numba_best = None
    if _kernels.USING_NUMBA:
        out = np.empty(count, dtype=np.int32)

        def run_numba():
            _kernels.proximity_block_numba(values, np.uint64(other), 64, out)

        got = _kernels.proximity_block_numba(values, np.uint64(other), 64, np.empty(count, np.int32))
        want = _kernels.proximity_block_numpy(values, other, 64)
        assert np.array_equal(got, want), "proximity implementations disagree"
        numba_best, _ = best_of(run_numba, repeat)
    numpy_best, _ = best_of(run_numpy, repeat)
    report_row(f"proximity block ({count})", numpy_best, numba_best)


def bench_audit(n, repeat):
    # the audit is the heaviest kernel consumer: n BFS runs plus one
    # proximity block per node. build the world once, audit repeatedly.
    underlay = build_topology(TopologySpec(kind="preferential-attachment", n=n, m=2, seed=3))
    w = World(underlay, ProtocolParams(), seed=1)
    order = list(range(underlay.n))
    Random(derive_seed(1, "order")).shuffle(order)
    w.run_joins(order)
    w.repair_round()

    selected_best, _ = best_of(lambda: w.audit(), repeat, warmup=1)
    label = "numba" if _kernels.USING_NUMBA else "numpy"
    print(f"{f'full-world audit (n={n})':<28} {label} {selected_best * 1e3:9.3f} ms   "
          f"(selected path; set UIPSIM_PURE_NUMPY=1 to compare)")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=2000, help="graph size for the kernel rows")
    parser.add_argument("--audit-n", type=int, default=400, help="world size for the audit row")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    print(f"numba available and selected: {_kernels.USING_NUMBA}")
    spec = TopologySpec(kind="preferential-attachment", n=args.n, m=2, seed=3)
    underlay = build_topology(spec)

    bench_bfs(underlay, args.repeat)
    bench_proximity(args.repeat)
    bench_audit(args.audit_n, args.repeat)


if __name__ == "__main__":
    main()
