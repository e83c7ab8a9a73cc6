"""Time the compiled and pure-Python kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--nodes 41]
"""
import argparse
import time

import numpy as np
import scipy.sparse as sp

from ntfkmix import kernels
from ntfkmix.ntf import NtfOptions, decompose
from ntfkmix.rdsim import (SimulationConfig, assemble_operator, greedy_coloring,
                           lumped_mass, simulate_invariants)
from ntfkmix.synthetic import bump_tensor


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(nodes):
    cfg = SimulationConfig(nodes=nodes)
    K, _ = assemble_operator(cfg, 0.0)
    A = (sp.diags(lumped_mass(cfg) / cfg.dt) + K).tocsr()
    A.sort_indices()
    order, ptr = greedy_coloring(A)
    rng = np.random.default_rng(0)
    n = A.shape[0]
    rhs = rng.normal(size=n)
    pgs = (A.indptr.astype(np.int32), A.indices.astype(np.int32), A.data.copy(),
           A.diagonal().copy(), order, ptr, rhs, np.zeros(n), np.ones(n))

    ranks = (4, 8, 8)
    grams = [np.ascontiguousarray(M.T @ M) for M in (rng.random((50, r)) for r in ranks)]
    G0 = rng.random(ranks)
    T = rng.random(ranks) * 10
    grad0 = np.einsum("ap,bq,cr,pqr->abc", *grams, G0) - T

    F0 = rng.random((400, 8))
    P = rng.random((400, 8)) * 20
    M = rng.random((30, 8))
    Q = np.ascontiguousarray(M.T @ M)

    X, _ = bump_tensor((50, 20, 20), k=3, noise=0.005)
    small = SimulationConfig(nodes=nodes, horizon=0.1)

    def run_pgs():
        kernels.pgs_solve(*pgs, np.zeros(n), 1e-10, 100000)

    def run_core():
        kernels.core_cd(G0.copy(), grad0.copy(), *grams, 0.0)

    def run_hals():
        kernels.hals_columns(F0.copy(), P, Q, 10)

    def run_decompose():
        decompose(X, NtfOptions(ranks=(3, 9, 9), seed=0, max_sweeps=100, tolerance=1e-300))

    def run_sim():
        simulate_invariants(small)

    return [("pgs_solve", run_pgs), ("core_cd", run_core), ("hals_columns", run_hals),
            ("decompose 50x20x20 (100 sweeps)", run_decompose),
            (f"simulate {nodes}x{nodes} (20 steps)", run_sim)]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--nodes", type=int, default=41)
    args = p.parse_args()
    backends = kernels.available_backends()
    start = kernels.BACKEND
    table = {}
    for name, fn in cases(args.nodes):
        for b in backends:
            kernels.use_backend(b)
            table[name, b] = best_of(fn, args.repeat)
    kernels.use_backend(start)
    print(f"{'case':36s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, _ in cases(args.nodes):
        line = f"{name:36s}" + "".join(f"{table[name, b]:11.4f}s" for b in backends)
        if len(backends) > 1:
            line += f"{table[name, 'python'] / table[name, 'compiled']:11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
