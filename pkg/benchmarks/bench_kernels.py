"""Wall-clock comparison of the numba and numpy kernel paths.

Run ``python benchmarks/bench_kernels.py``; each kernel is warmed up once
(numba compilation) and then timed as the best of several repeats.
"""

import argparse
import time

import numpy as np

from twophase import fem, kernels


def best_of(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(n_nodes, n_steps, resolution):
    mass = np.full(n_nodes, 1.0 / n_nodes)
    kdiag = np.full(n_nodes, 2.0 * n_nodes)
    koff = np.full(n_nodes - 1, -1.0 * n_nodes)
    load = np.zeros(n_nodes)
    load[-1] = n_nodes
    times = np.concatenate([[0.0], np.geomspace(1e-6, 1.0, n_steps)])
    store = np.ones(times.size, dtype=bool)
    u0 = np.zeros(n_nodes)
    rng = np.random.default_rng(1)
    rhs = rng.normal(size=n_nodes)
    mesh = fem.reference_mesh(0.5, resolution)
    tris = mesh.triangles.astype(np.int64)
    return {
        "tridiagonal solve": (lambda: kernels._thomas_nb(np.r_[0.0, koff], kdiag, np.r_[koff, 0.0], rhs),
                              lambda: kernels._thomas_np(np.r_[0.0, koff], kdiag, np.r_[koff, 0.0], rhs)),
        "backward Euler march": (lambda: kernels._march_nb(mass, kdiag, koff, load, u0, times, store),
                                 lambda: kernels._march_np(mass, kdiag, koff, load, u0, times, store)),
        "P1 element matrices": (lambda: kernels._p1_local_nb(mesh.points, tris),
                                lambda: kernels._p1_local_np(mesh.points, tris)),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--nodes", type=int, default=2000, help="1D grid size")
    parser.add_argument("--steps", type=int, default=1000, help="time steps of the march")
    parser.add_argument("--resolution", type=int, default=96, help="mesh resolution for the P1 kernel")
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args(argv)
    print(f"{'kernel':<24}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for name, (nb, np_) in cases(args.nodes, args.steps, args.resolution).items():
        t_nb = best_of(nb, args.repeats)
        t_np = best_of(np_, args.repeats)
        print(f"{name:<24}{1e3 * t_nb:>12.3f}{1e3 * t_np:>12.3f}{t_np / t_nb:>10.2f}")


if __name__ == "__main__":
    main()
