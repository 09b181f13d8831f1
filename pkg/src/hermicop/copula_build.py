"""Copulas built from corrected Hermite expansions.

A :class:`HermiteCopula` keeps the corrected joint density on an x-grid, the
marginals recomputed from that density, and (for model-built copulas) the
corrected ratio as a function of the rotated coordinates, which the
integrator uses on an independent-Gaussian grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import ndtr, ndtri

from . import kernels
from .correction import (
    DEFAULT_MAX_SWEEPS, DEFAULT_TOL, DykstraReport, MomentMatch, NonNegativity, Normalization,
    correct_1d_product, dykstra,
)
from .expansion import ExpansionModel, basis_values, evaluate_expansion
from .quadrature import CartesianGrid, GridDensity, build_grid, default_grid, gaussian_weight_2d

MASS_TOL = 1e-3
MARGINAL_CELLS = 2000
WIDE = 40.0
ATOM_SPLIT = 4
# the factor grid is wider than the x-grid so Hermite truncation stays below 1e-9
FACTOR_BOUND = 8.0


@dataclass
class DiscreteMarginal:
    """Piecewise-linear CDF on cell edges (piecewise-constant density)."""

    edges: np.ndarray
    cdf: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        cdf = np.maximum.accumulate(np.clip(np.asarray(self.cdf, dtype=float), 0.0, None))
        if cdf[-1] <= 0:
            raise ValueError("marginal has no mass")
        self.cdf = cdf / cdf[-1]
        # strictly increasing interior knots for the inverse
        keep = np.concatenate(([True], np.diff(self.cdf) > 0))
        self._u = self.cdf[keep]
        self._x = self.edges[keep]
        inner = (self._u > 0) & (self._u < 1)
        self._zu = ndtri(self._u[inner])
        self._zx = self._x[inner]

    @property
    def nodes(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def density(self) -> np.ndarray:
        return np.diff(self.cdf) / np.diff(self.edges)

    @property
    def bounds(self) -> tuple[float, float]:
        return float(self.edges[0]), float(self.edges[-1])

    def cdf_at(self, x):
        return np.interp(x, self.edges, self.cdf)

    def pdf_at(self, x):
        return np.interp(x, self.nodes, self.density, left=0.0, right=0.0)

    def moment(self, k: int) -> float:
        x = self.nodes
        return float(np.sum(x**k * np.diff(self.cdf)))

    def quantile(self, u):
        """Inverse CDF; beyond the outermost knots it extrapolates linearly in normal scores."""
        u = np.asarray(u, dtype=float)
        out = np.interp(u, self._u, self._x)
        lo_u, hi_u = self._u[1] if self._u.size > 1 else 0.0, self._u[-2] if self._u.size > 1 else 1.0
        zu, zx = self._zu, self._zx
        if zu.size >= 2:
            z = ndtri(np.clip(u, 1e-300, 1 - 1e-16))
            lo_slope = (zx[1] - zx[0]) / (zu[1] - zu[0])
            hi_slope = (zx[-1] - zx[-2]) / (zu[-1] - zu[-2])
            out = np.where(u < lo_u, zx[0] + (z - zu[0]) * lo_slope, out)
            out = np.where(u > hi_u, zx[-1] + (z - zu[-1]) * hi_slope, out)
        return out if out.ndim else float(out)


def marginals_from_density(density: GridDensity) -> tuple[DiscreteMarginal, ...]:
    grid = density.grid
    dens = density.density
    if np.min(dens) < -1e-12:
        raise ValueError("density has negative nodes; correct it first")
    mass = density.mass()
    if abs(mass - 1.0) > MASS_TOL:
        raise ValueError(f"density mass {mass:.6f} is not normalized")
    out = []
    for a in range(grid.ndim):
        other = tuple(k for k in range(grid.ndim) if k != a)
        cell_mass = np.sum(np.maximum(dens, 0.0), axis=other) * grid.weight
        cdf = np.concatenate(([0.0], np.cumsum(cell_mass)))
        out.append(DiscreteMarginal(grid.edges[a], cdf))
    return tuple(out)


def inverse_cdf(m: DiscreteMarginal, u) -> float:
    u_arr = np.asarray(u, dtype=float)
    if np.any((u_arr <= 0) | (u_arr >= 1)):
        raise ValueError("u must lie strictly inside (0, 1)")
    return m.quantile(u)


@lru_cache(maxsize=256)
def _corrected_factor(coefs: tuple, sections: int, bound: float, tol: float, max_sweeps: int):
    grid = build_grid([(-bound, bound)], [sections])
    vals, reps = correct_1d_product([np.array((0.0,) + coefs)], [grid], tol, max_sweeps)
    vals[0].setflags(write=False)
    return vals[0], reps[0]


def corrected_factor(model: ExpansionModel, sections: int = 200, bound: float = 6.0,
                     tol: float = DEFAULT_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS):
    """Corrected univariate factor of a diagonal model on a 1D midpoint grid.

    Only m_{n,0} are nonzero, so the ratio depends on v2 alone. The result is
    cached by coefficient vector; it does not depend on rho.
    """
    if not model.is_diagonal():
        raise ValueError("product correction needs a model with only m_{n,0} nonzero")
    coefs = tuple(float(c) for c in model.coef[1:, 0])
    return _corrected_factor(coefs, sections, bound, tol, max_sweeps)


def _split_normal_cells(edges: np.ndarray, parts: int):
    """Split each cell into ``parts``; return (sub-edges, N(0,1) mass and conditional mean per sub-cell)."""
    frac = np.arange(parts) / parts
    sub = (edges[:-1, None] + np.diff(edges)[:, None] * frac).ravel()
    sub = np.append(sub, edges[-1])
    mass = np.diff(ndtr(sub))
    pdf = np.exp(-0.5 * sub * sub) / np.sqrt(2 * np.pi)
    mid = 0.5 * (sub[1:] + sub[:-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = np.where(mass > 1e-300, (pdf[:-1] - pdf[1:]) / mass, mid)
    return sub, mass, np.clip(mean, sub[:-1], sub[1:])


def _rotated_marginal(c1: float, c2: float, vedges: np.ndarray, fvals: np.ndarray, bound: float) -> DiscreteMarginal:
    """Law of c1 * v1 + c2 * v2, v1 ~ N(0,1) and v2 with density f(v2) phi(v2) (f piecewise constant).

    One coordinate is discretized into atoms at sub-cell conditional means; the
    other is integrated exactly. The missing within-sub-cell variance is added
    to the Gaussian kernel when v1 is the kernel coordinate.
    """
    span = bound * (abs(c1) + abs(c2))
    t = np.linspace(-span, span, MARGINAL_CELLS + 1)
    if abs(c1) >= abs(c2):
        sub, mass, mean = _split_normal_cells(vedges, ATOM_SPLIT)
        w = np.repeat(fvals, ATOM_SPLIT) * mass
        h = np.diff(sub)
        scale = np.sqrt(c1 * c1 + c2 * c2 * float(np.mean(h * h)) / 12.0)
        cdf = kernels.piecewise_gauss_cdf(t, c2 * mean, w, np.array([-WIDE, WIDE]),
                                          np.array([0.0, 1.0]), np.array([1.0]), scale)
    else:
        _, w1, mean = _split_normal_cells(vedges, ATOM_SPLIT)
        edges, dens = (vedges, fvals) if c2 > 0 else (-vedges[::-1], fvals[::-1])
        cum = np.concatenate(([0.0], np.cumsum(dens * (ndtr(edges[1:]) - ndtr(edges[:-1])))))
        cdf = kernels.piecewise_gauss_cdf(t, c1 * mean, w1, edges, cum, dens, abs(c2))
    return DiscreteMarginal(t, cdf)


def correct_expansion(model: ExpansionModel, grid: CartesianGrid | None = None, tol: float = DEFAULT_TOL,
                      max_sweeps: int = DEFAULT_MAX_SWEEPS) -> tuple[GridDensity, GridDensity, DykstraReport]:
    """Uncorrected and corrected expansion on the x-grid.

    The corrected ratio is the nearest non-negative function with unit mass
    that keeps every coefficient of ``model``.
    """
    grid = grid or default_grid()
    raw = evaluate_expansion(model, grid)
    cons = [Normalization()]
    for (n, i), e in basis_values(model, grid).items():
        cons.append(MomentMatch(e, float(model.coef[n, i]), degree=n, label=f"m{n}{i}"))
    cons.append(NonNegativity())
    phi, rep = dykstra(raw.values, cons, raw.weight_density, grid, tol, max_sweeps)
    dens = GridDensity(grid, phi, raw.weight_density, "ratio", {"rho": model.rho, "basis": model.basis})
    return raw, dens, rep


@dataclass
class HermiteCopula:
    density: GridDensity
    marginals: tuple
    model: ExpansionModel | None = None
    report: DykstraReport | None = None
    factor: np.ndarray | None = None
    factor_grid: CartesianGrid | None = None
    ratio_grid: GridDensity | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_density(cls, density: GridDensity) -> "HermiteCopula":
        return cls(density, marginals_from_density(density))

    @classmethod
    def from_model(cls, model: ExpansionModel, grid: CartesianGrid | None = None,
                   tol: float = DEFAULT_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS) -> "HermiteCopula":
        """Correct ``model`` and rebuild marginals from the corrected density.

        Diagonal models use the univariate product correction; other models are
        corrected on the x-grid under the correlated Gaussian weight.
        """
        grid = grid or default_grid()
        weight = gaussian_weight_2d(grid, model.rho)
        x1, x2 = grid.mesh()
        gi = model.gamma_inv
        if model.is_diagonal():
            lo, hi = grid.bounds[1]
            hi = max(hi, -lo, FACTOR_BOUND)
            sections = int(np.ceil(grid.sections[1] * 2 * hi / (grid.bounds[1][1] - lo)))
            fgrid = build_grid([(-hi, hi)], [sections])
            fvals, rep = corrected_factor(model, sections, hi, tol, max_sweeps)
            v2 = gi[1, 0] * x1 + gi[1, 1] * x2
            ratio = np.interp(v2, fgrid.axes[0], fvals)
            dens = GridDensity(grid, ratio, weight, "ratio", {"rho": model.rho})
            g = model.gamma
            marg = tuple(_rotated_marginal(g[a, 0], g[a, 1], fgrid.edges[0], fvals, hi) for a in range(2))
            return cls(dens, marg, model, rep, fvals, fgrid)
        _, dens, rep = correct_expansion(model, grid, tol, max_sweeps)
        return cls(dens, marginals_from_density(dens), model, rep, ratio_grid=dens)

    # -- rotated-coordinate view -------------------------------------------------
    def ratio_v(self, v1, v2):
        """Corrected ratio as a function of the rotated coordinates (model-built copulas)."""
        if self.model is None:
            raise ValueError("copula was not built from an expansion model")
        if self.factor is not None:
            return np.interp(v2, self.factor_grid.axes[0], self.factor)
        g = self.model.gamma
        x1 = g[0, 0] * v1 + g[0, 1] * v2
        x2 = g[1, 0] * v1 + g[1, 1] * v2
        interp = RegularGridInterpolator(self.density.grid.axes, self.density.ratio, bounds_error=False, fill_value=0.0)
        return interp(np.stack([np.ravel(x1), np.ravel(x2)], axis=-1)).reshape(np.shape(x1))

    def node_grid(self, vgrid: CartesianGrid | None = None) -> CartesianGrid:
        """Grid whose cells carry the integration nodes: the x-grid or the rotated v-grid."""
        return self.density.grid if self.model is None else (vgrid or self.density.grid)

    def cell_nodes(self, cells, refine: int = 1, vgrid: CartesianGrid | None = None):
        """(x1, x2, weights) at refine x refine sub-cell midpoints of the given flat cell indices.

        Output arrays have shape (len(cells), refine**2). For grid-built copulas
        the density is held constant inside a cell, matching :meth:`cdf`.
        """
        if refine < 1:
            raise ValueError("refine must be a positive integer")
        grid = self.node_grid(vgrid)
        cells = np.asarray(cells)
        offs = (np.arange(refine) + 0.5) / refine - 0.5
        o1, o2 = np.meshgrid(offs * grid.deltas[0], offs * grid.deltas[1], indexing="ij")
        c1, c2 = (m.ravel()[cells] for m in grid.mesh())
        s1 = c1[:, None] + o1.ravel()
        s2 = c2[:, None] + o2.ravel()
        if self.model is None:
            cell = self.density.density.ravel()[cells] * grid.weight / refine**2
            return s1, s2, np.repeat(cell[:, None], refine**2, axis=1)
        g = self.model.gamma
        pw = np.exp(-0.5 * (s1 * s1 + s2 * s2)) / (2 * np.pi)
        w = self.ratio_v(s1, s2) * pw * grid.weight / refine**2
        return g[0, 0] * s1 + g[0, 1] * s2, g[1, 0] * s1 + g[1, 1] * s2, w

    def integration_nodes(self, vgrid: CartesianGrid | None = None, refine: int = 1):
        """Flat (x1, x2, weights) whose weighted sums integrate against the corrected joint law."""
        cells = np.arange(self.node_grid(vgrid).size)
        return tuple(a.ravel() for a in self.cell_nodes(cells, refine, vgrid))

    # -- copula queries -------------------------------------------------------------
    def _cum_interp(self):
        if "cum" not in self.meta:
            grid = self.density.grid
            cell = np.maximum(self.density.density, 0.0) * grid.weight
            cum = np.zeros((grid.shape[0] + 1, grid.shape[1] + 1))
            cum[1:, 1:] = np.cumsum(np.cumsum(cell, axis=0), axis=1)
            cum /= cum[-1, -1]
            self.meta["cum"] = RegularGridInterpolator(grid.edges, cum)
        return self.meta["cum"]

    def _map(self, u1, u2):
        x1 = inverse_cdf(self.marginals[0], u1)
        x2 = inverse_cdf(self.marginals[1], u2)
        grid = self.density.grid
        (lo1, hi1), (lo2, hi2) = grid.bounds
        outside = (np.asarray(x1) < lo1) | (np.asarray(x1) > hi1) | (np.asarray(x2) < lo2) | (np.asarray(x2) > hi2)
        self.meta["clamped"] = bool(np.any(outside))
        return np.clip(x1, lo1, hi1), np.clip(x2, lo2, hi2)

    def cdf(self, u1, u2):
        x1, x2 = self._map(u1, u2)
        b1, b2 = np.broadcast_arrays(x1, x2)
        pts = np.stack([b1.ravel(), b2.ravel()], axis=-1)
        out = np.clip(self._cum_interp()(pts), 0.0, 1.0).reshape(b1.shape)
        return out if out.ndim else float(out)

    def joint_pdf(self, x1, x2):
        if self.model is not None and self.factor is not None:
            gi = self.model.gamma_inv
            v2 = gi[1, 0] * x1 + gi[1, 1] * x2
            r = self.model.rho
            q = (x1 * x1 - 2 * r * x1 * x2 + x2 * x2) / (1 - r * r)
            return np.interp(v2, self.factor_grid.axes[0], self.factor) * np.exp(-0.5 * q) / (2 * np.pi * np.sqrt(1 - r * r))
        interp = RegularGridInterpolator(self.density.grid.axes, self.density.density, bounds_error=False, fill_value=None)
        return np.maximum(interp(np.stack(np.broadcast_arrays(x1, x2), axis=-1)), 0.0)

    def pdf(self, u1, u2):
        x1, x2 = self._map(u1, u2)
        g1 = self.marginals[0].pdf_at(x1)
        g2 = self.marginals[1].pdf_at(x2)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(g1 * g2 > 0, self.joint_pdf(x1, x2) / (g1 * g2), 0.0)
        return out if out.ndim else float(out)


def copula_cdf(c: HermiteCopula, u1, u2):
    return c.cdf(u1, u2)


def copula_density(c: HermiteCopula, u1, u2):
    return c.pdf(u1, u2)


def integrate_with_copula(c: HermiteCopula, payoff, external_marginals, vgrid: CartesianGrid | None = None,
                          fine: int = 16, jump: float = 0.05) -> float:
    """E[payoff(Y1, Y2)] where Y_a = Q_a(G_a(X_a)) and X follows the corrected joint law.

    ``external_marginals`` is a pair of quantile functions Q_a. Cells whose
    payoff differs from a neighbour by more than ``jump`` times the payoff range
    (indicators, digital edges) are resampled at fine x fine sub-cells.
    """
    def evaluate(cells, r):
        x1, x2, w = c.cell_nodes(cells, r, vgrid)
        u1 = np.clip(c.marginals[0].cdf_at(x1), 1e-15, 1 - 1e-15)
        u2 = np.clip(c.marginals[1].cdf_at(x2), 1e-15, 1 - 1e-15)
        h = np.asarray(payoff(external_marginals[0](u1), external_marginals[1](u2)), dtype=float)
        if not np.all(np.isfinite(h)):
            raise ValueError("payoff is not finite at some node")
        return h, w

    grid = c.node_grid(vgrid)
    h, w = evaluate(np.arange(grid.size), 1)
    parts = (h * w).ravel()
    hg = h.reshape(grid.shape)
    limit = jump * (np.max(hg) - np.min(hg))
    rough = np.zeros(grid.shape, dtype=bool)
    if limit > 0 and fine > 1:
        for axis in (0, 1):
            step = np.abs(np.diff(hg, axis=axis)) > limit
            lo = [slice(None)] * 2
            hi = [slice(None)] * 2
            lo[axis] = slice(None, -1)
            hi[axis] = slice(1, None)
            rough[tuple(lo)] |= step
            rough[tuple(hi)] |= step
    cells = np.flatnonzero(rough)
    total = float(np.sum(parts)) - float(np.sum(parts[cells]))
    for chunk in np.array_split(cells, max(1, cells.size // 4096)):
        if chunk.size:
            hf, wf = evaluate(chunk, fine)
            total += float(np.sum(hf * wf))
    return total
