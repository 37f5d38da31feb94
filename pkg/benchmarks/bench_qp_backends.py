#!/usr/bin/env python3
"""Benchmark the compiled QP kernel against the pure-Python fallback.

Generates batches of random strictly convex QPs shaped like the ones the
pipeline solves (wrench certification: few variables, tens of inequality
rows) and times both backends on identical problem sets, checking that
they agree to tight tolerance.

Usage: python3 benchmarks/bench_qp_backends.py [--n 300] [--seed 0]
"""
import argparse
import time

import numpy as np

from reachtraj.qp import (QpProblem, available_backends,
                          solve_qp_with_backend)


def random_problem(rng, n, m_in):
    A = rng.standard_normal((n, n))
    H = A @ A.T + n * np.eye(n)
    g = rng.standard_normal(n)
    A_in = rng.standard_normal((m_in, n))
    # keep the origin strictly feasible so every problem is solvable
    b_in = rng.uniform(0.5, 2.0, size=m_in)
    return QpProblem(H, g, A_in=A_in, b_in=b_in)


def run(n_problems, seed):
    rng = np.random.default_rng(seed)
    sizes = [(3, 11), (6, 25), (12, 60)]
    problems = {sz: [random_problem(rng, *sz) for _ in range(n_problems)]
                for sz in sizes}
    backends = available_backends()
    print(f"backends available: {backends}")
    results = {}
    for backend in backends:
        for sz, batch in problems.items():
            t0 = time.perf_counter()
            sols = [solve_qp_with_backend(p, backend) for p in batch]
            dt = time.perf_counter() - t0
            assert all(s.optimal for s in sols)
            results[(backend, sz)] = (dt, sols)
            print(f"{backend:>7}  n={sz[0]:>2} m={sz[1]:>2}  "
                  f"{dt * 1e3 / len(batch):8.3f} ms/solve  "
                  f"({len(batch)} problems in {dt:.3f} s)")
    if "cython" in backends:
        for sz in sizes:
            zs_py = np.array([s.z for s in results[("python", sz)][1]])
            zs_cy = np.array([s.z for s in results[("cython", sz)][1]])
            worst = float(np.abs(zs_py - zs_cy).max())
            assert worst <= 1e-9, worst
            t_py = results[("python", sz)][0]
            t_cy = results[("cython", sz)][0]
            print(f"n={sz[0]:>2}: backends agree to {worst:.2e}; "
                  f"speedup x{t_py / t_cy:.1f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    run(args.n, args.seed)
