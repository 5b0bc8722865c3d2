"""Compare the compiled and pure-numpy kernel backends on spmm and matmul.

    python3 benchmarks/bench_kernels.py --nodes 20000 --degree 10 --width 64
"""

import argparse
import time

import numpy as np

from gnnprune import kernels as K
from gnnprune import synth
from gnnprune.graph import normalize


def timeit(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--nodes", type=int, default=20000)
    ap.add_argument("--degree", type=float, default=10.0)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    g = synth.random_graph(args.nodes, args.degree / args.nodes, attr_dim=args.width, seed=0)
    adj = normalize(g)
    h = g.attributes
    w = np.random.default_rng(1).standard_normal((args.width, args.width)).astype(np.float32)
    backends = ["python"] + (["c"] if K.compiled_available() else [])
    results = {}
    print(f"threads={K.num_threads()} nodes={g.num_nodes} nnz={g.num_edges} width={args.width}")
    print(f"{'kernel':8} {'backend':8} {'seconds':>10} {'GMAC/s':>8}")
    for name in backends:
        with K.backend(name):
            t_spmm = timeit(lambda: K.spmm(adj, h), args.repeats)
            t_mm = timeit(lambda: K.matmul(h, w), args.repeats)
            results[name] = (K.spmm(adj, h), K.matmul(h, w))
        for kernel, t, macs in (("spmm", t_spmm, g.num_edges * args.width),
                                ("matmul", t_mm, g.num_nodes * args.width * args.width)):
            print(f"{kernel:8} {name:8} {t:10.5f} {macs / t / 1e9:8.3f}")
    if len(results) == 2:
        same = all(np.array_equal(a, b) for a, b in zip(results["python"], results["c"]))
        print(f"bitwise identical outputs: {same}")


if __name__ == "__main__":
    main()
