"""Numba vs numpy timings for the two hot kernels.

Run: python3 benchmarks/bench_kernels.py [--repeat N]

Cases:
  dykstra-2d   full 2D correction of a Clayton n_max=4 expansion (200x200 grid)
  dykstra-1d   univariate product correction (200 cells)
  marginal     piecewise-Gaussian CDF of a rotated marginal (2000 points x 200 cells)
"""
from __future__ import annotations

import argparse
import time

import numpy as np
from scipy.special import ndtr

from hermicop import kernels
from hermicop._jit import USE_NUMBA
from hermicop.copulas import ClassicalCopula, joint_density_normal_marginals, spearman_to_theta
from hermicop.correction import MomentMatch, NonNegativity, Normalization, dykstra, hermite_moment_constraints
from hermicop.expansion import basis_values, estimate_coefficients, evaluate_expansion
from hermicop.polybasis import hermite_orthonormal_all
from hermicop.quadrature import GridDensity, build_grid, default_grid


def _best(fn, repeat: int) -> float:
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def case_dykstra_2d():
    g = default_grid()
    x1, x2 = g.mesh()
    th = spearman_to_theta("clayton", 0.6)
    target = GridDensity(g, joint_density_normal_marginals(ClassicalCopula("clayton", th), x1, x2),
                         np.ones(g.shape), "absolute")
    model = estimate_coefficients(target, 0.0, 4, basis="cholesky")
    raw = evaluate_expansion(model, g)
    cons = [Normalization()]
    cons += [MomentMatch(e, float(model.coef[k]), degree=k[0]) for k, e in basis_values(model, g).items()]
    cons.append(NonNegativity())
    return lambda numpy: dykstra(raw.values, cons, raw.weight_density, g, max_sweeps=300, force_numpy=numpy)


def case_dykstra_1d():
    g = build_grid([(-6.0, 6.0)], [200])
    x = g.axes[0]
    m = np.array([0.0, 0.0, 0.0, -0.35 / 6, 0.96 / 24, 0.08 / 120, -2.05 / 720])
    h = hermite_orthonormal_all(6, x)
    phi0 = 1.0 + np.tensordot(m[1:], h[1:], axes=1)
    p = np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)
    cons = hermite_moment_constraints(6, g, m)
    return lambda numpy: dykstra(phi0, cons, p, g, max_sweeps=2000, force_numpy=numpy)


def case_marginal():
    edges = np.linspace(-6, 6, 201)
    f = 1.0 + 0.3 * np.sin(edges[:-1])
    cum = np.concatenate(([0.0], np.cumsum(f * (ndtr(edges[1:]) - ndtr(edges[:-1])))))
    nodes = 0.5 * (edges[1:] + edges[:-1])
    w = ndtr(edges[1:]) - ndtr(edges[:-1])
    t = np.linspace(-9, 9, 2001)
    return lambda numpy: kernels.piecewise_gauss_cdf(t, 0.6 * nodes, w, edges, cum, f, 0.8, force_numpy=numpy)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not USE_NUMBA:
        print("numba disabled (HERMICOP_NO_JIT set); both columns run numpy")
    print(f"{'case':<14}{'numba s':>12}{'numpy s':>12}{'speedup':>10}")
    for name, make in (("dykstra-2d", case_dykstra_2d), ("dykstra-1d", case_dykstra_1d), ("marginal", case_marginal)):
        run = make()
        t_nb = _best(lambda: run(False), args.repeat)
        t_np = _best(lambda: run(True), args.repeat)
        print(f"{name:<14}{t_nb:>12.4f}{t_np:>12.4f}{t_np / t_nb:>10.1f}x")


if __name__ == "__main__":
    main()
