"""Projection of grid functions onto intersections of convex sets.

All projections are orthogonal in the discrete inner product
``<f, g> = sum(w * f * g * p)`` where ``w`` is the cell weight and ``p`` the
weight density. Equality, half-space and marginal sets are affine or
polyhedral; the non-negativity cone is not affine, which is why the cyclic
scheme carries Dykstra increments instead of plain alternating projections.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .polybasis import hermite_orthonormal_all
from .quadrature import CartesianGrid, build_grid

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_SWEEPS = 5000
VIOLATION_TOL = 1e-6
PLATEAU_SWEEPS = 500
MIN_NORM2 = 1e-14


@dataclass
class Normalization:
    target: float = 1.0
    label: str = "normalization"


@dataclass
class NonNegativity:
    label: str = "nonnegativity"


@dataclass
class MomentMatch:
    test: np.ndarray
    target: float
    degree: int = 0
    label: str = "moment"


@dataclass
class MomentBound:
    """Half-space <phi, test> <= bound (``upper=True``) or >= bound."""

    test: np.ndarray
    bound: float
    upper: bool = True
    degree: int = 0
    label: str = "moment_bound"


@dataclass
class MarginalMatch:
    """Marginal density along ``axis`` must equal ``target`` at every slice."""

    axis: int
    target: np.ndarray
    label: str = "marginal"


_RANK = {Normalization: 0, MomentMatch: 1, MomentBound: 2, MarginalMatch: 3, NonNegativity: 4}


def order_constraints(constraints):
    """Sweep order: normalization, moments by degree, bounds, marginals, cone last."""
    def key(c):
        return (_RANK[type(c)], getattr(c, "degree", 0))
    return sorted(constraints, key=key)


@dataclass
class DykstraReport:
    iterations: int
    violations: dict
    converged: bool
    last_change: float
    infeasible: bool = False
    history: list = field(default_factory=list)

    @property
    def max_violation(self) -> float:
        return max(self.violations.values(), default=0.0)

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def _omega(weight, grid: CartesianGrid) -> np.ndarray:
    w = np.broadcast_to(np.asarray(weight, dtype=float), grid.shape)
    return (grid.weight * w).ravel()


def project_equality(phi, test, target: float, weight, grid: CartesianGrid) -> np.ndarray:
    omega = _omega(weight, grid)
    t = np.asarray(test, dtype=float).ravel()
    f = np.asarray(phi, dtype=float)
    n2 = float(np.dot(omega * t, t))
    if n2 <= MIN_NORM2:
        raise ValueError("test function has zero norm under the weight")
    a = float(np.dot(omega * f.ravel(), t))
    return f - ((a - target) / n2) * t.reshape(f.shape)


def project_halfspace(phi, test, bound: float, weight, grid: CartesianGrid, upper: bool = True) -> np.ndarray:
    omega = _omega(weight, grid)
    t = np.asarray(test, dtype=float).ravel()
    f = np.asarray(phi, dtype=float)
    n2 = float(np.dot(omega * t, t))
    if n2 <= MIN_NORM2:
        raise ValueError("test function has zero norm under the weight")
    excess = float(np.dot(omega * f.ravel(), t)) - bound
    excess = max(excess, 0.0) if upper else min(excess, 0.0)
    return f - (excess / n2) * t.reshape(f.shape)


def project_nonneg(phi) -> np.ndarray:
    return np.maximum(np.asarray(phi, dtype=float), 0.0)


def marginal_of(phi, axis: int, weight, grid: CartesianGrid) -> np.ndarray:
    """Marginal density along ``axis`` of the absolute density phi * weight."""
    f = np.asarray(phi, dtype=float).reshape(grid.shape) * np.broadcast_to(weight, grid.shape)
    other = tuple(k for k in range(grid.ndim) if k != axis)
    return np.sum(f, axis=other) * grid.weight / grid.deltas[axis]


def project_marginal(phi, axis: int, target_slices, weight, grid: CartesianGrid) -> np.ndarray:
    f = np.asarray(phi, dtype=float)
    omega = _omega(weight, grid).reshape(grid.shape)
    other = tuple(k for k in range(grid.ndim) if k != axis)
    norms = np.sum(omega, axis=other)
    if np.any(norms <= MIN_NORM2):
        raise ValueError("a marginal slice has zero weight mass")
    cur = np.sum(omega * f.reshape(grid.shape), axis=other)
    tgt = np.asarray(target_slices, dtype=float) * grid.deltas[axis]
    shift = (cur - tgt) / norms
    shape = [1] * grid.ndim
    shape[axis] = grid.shape[axis]
    return (f.reshape(grid.shape) - shift.reshape(shape)).reshape(f.shape)


class _Packed:
    """Flat arrays consumed by :func:`hermicop.kernels.dykstra_chunk`."""

    def __init__(self, constraints, omega: np.ndarray, grid: CartesianGrid):
        n = omega.size
        self.constraints = constraints
        affine = [c for c in constraints if isinstance(c, (Normalization, MomentMatch, MomentBound))]
        marg = [c for c in constraints if isinstance(c, MarginalMatch)]
        self.use_cone = any(isinstance(c, NonNegativity) for c in constraints)
        self.rows = np.empty((len(affine), n))
        self.targets = np.empty(len(affine))
        self.kinds = np.zeros(len(affine), dtype=np.int64)
        for r, c in enumerate(affine):
            if isinstance(c, Normalization):
                self.rows[r] = 1.0
                self.targets[r] = c.target
            elif isinstance(c, MomentMatch):
                self.rows[r] = np.asarray(c.test, dtype=float).ravel()
                self.targets[r] = c.target
            else:
                self.rows[r] = np.asarray(c.test, dtype=float).ravel()
                self.targets[r] = c.bound
                self.kinds[r] = kernels.LE if c.upper else kernels.GE
        self.row_norm2 = np.einsum("rj,j,rj->r", self.rows, omega, self.rows)
        if np.any(self.row_norm2 <= MIN_NORM2):
            raise ValueError("a moment test function has zero norm under the weight")
        self.lam = np.zeros(len(affine))
        nslice = max([grid.shape[c.axis] for c in marg], default=1)
        self.slice_ids = np.zeros((len(marg), n), dtype=np.int64)
        self.slice_targets = np.zeros((len(marg), nslice))
        self.slice_norm2 = np.zeros((len(marg), nslice))
        self.slice_lam = np.zeros((len(marg), nslice))
        idx = np.indices(grid.shape).reshape(grid.ndim, -1)
        for m, c in enumerate(marg):
            tgt = np.asarray(c.target, dtype=float)
            if tgt.shape != (grid.shape[c.axis],):
                raise ValueError("marginal target length differs from the axis node count")
            if np.any(tgt < 0) or abs(np.sum(tgt) * grid.deltas[c.axis] - 1.0) > 1e-6:
                raise ValueError("marginal target must be non-negative and integrate to 1")
            ids = idx[c.axis]
            self.slice_ids[m] = ids
            k = grid.shape[c.axis]
            self.slice_targets[m, :k] = tgt * grid.deltas[c.axis]
            self.slice_norm2[m, :k] = np.bincount(ids, weights=omega, minlength=k)
            if np.any(self.slice_norm2[m, :k] <= MIN_NORM2):
                raise ValueError("a marginal slice has zero weight mass")
        self.affine = affine
        self.marg = marg
        self.cone_inc = np.zeros(n)

    def violations(self, phi: np.ndarray, omega: np.ndarray, grid: CartesianGrid) -> dict:
        out = {}
        vals = self.rows @ (omega * phi) if len(self.affine) else np.zeros(0)
        for r, c in enumerate(self.affine):
            d = vals[r] - self.targets[r]
            if self.kinds[r] == kernels.LE:
                d = max(d, 0.0)
            elif self.kinds[r] == kernels.GE:
                d = min(d, 0.0)
            out[_unique(out, c.label)] = abs(float(d))
        for m, c in enumerate(self.marg):
            k = grid.shape[c.axis]
            sums = np.bincount(self.slice_ids[m], weights=omega * phi, minlength=k)
            err = np.max(np.abs(sums - self.slice_targets[m, :k])) / grid.deltas[c.axis]
            out[_unique(out, c.label)] = float(err)
        if self.use_cone:
            out["nonnegativity"] = float(max(-np.min(phi), 0.0))
        return out


def _unique(d: dict, label: str) -> str:
    if label not in d:
        return label
    k = 2
    while f"{label}#{k}" in d:
        k += 1
    return f"{label}#{k}"


def dykstra(phi0, constraints, weight, grid: CartesianGrid, tol: float = DEFAULT_TOL,
            max_sweeps: int = DEFAULT_MAX_SWEEPS, chunk: int = 25, force_numpy: bool = False):
    """Cyclic Dykstra projection of ``phi0`` onto the intersection of ``constraints``.

    Stops when the weighted L2 change over one full sweep and the worst
    constraint residual both drop below ``tol``, or after ``max_sweeps``. A constraint set whose worst violation stalls above
    1e-6 for 500 sweeps is reported as infeasible. Returns ``(values, report)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    phi0 = np.asarray(phi0, dtype=float)
    shape = phi0.shape
    omega = _omega(weight, grid)
    if phi0.size != omega.size:
        raise ValueError("phi0 does not match the grid node count")
    packed = _Packed(order_constraints(constraints), omega, grid)
    phi = phi0.ravel().copy()
    sweeps = 0
    change = np.inf
    history = []
    infeasible = False
    while sweeps < max_sweeps:
        n = min(chunk, max_sweeps - sweeps)
        done, change = kernels.dykstra_chunk(
            phi, omega, packed.rows, packed.row_norm2, packed.targets, packed.kinds, packed.lam,
            packed.slice_ids, packed.slice_targets, packed.slice_norm2, packed.slice_lam,
            packed.use_cone, packed.cone_inc, n, tol, force_numpy=force_numpy)
        sweeps += done
        viol = max(packed.violations(phi, omega, grid).values(), default=0.0)
        history.append((sweeps, float(viol)))
        # a sweep can return to its start while an affine residual is still above tol
        if change < tol and viol <= tol:
            break
        old = [v for s, v in history if s <= sweeps - PLATEAU_SWEEPS]
        if viol > VIOLATION_TOL and old and viol >= 0.999 * old[-1]:
            infeasible = True
            log.warning("constraint violations stalled at %.3g; intersection looks empty", viol)
            break
    violations = packed.violations(phi, omega, grid)
    converged = bool(change < tol and max(violations.values(), default=0.0) <= VIOLATION_TOL)
    report = DykstraReport(sweeps, violations, converged, float(change), infeasible, history)
    return phi.reshape(shape), report


def hermite_moment_constraints(n_max: int, grid: CartesianGrid, targets) -> list:
    """1D constraints: normalization, <phi, Hebar_j> = targets[j] for j = 1..n_max, cone."""
    x = grid.axes[0]
    h = hermite_orthonormal_all(n_max, x)
    cons = [Normalization()]
    for j in range(1, n_max + 1):
        cons.append(MomentMatch(h[j], float(targets[j]), degree=j, label=f"m{j}"))
    cons.append(NonNegativity())
    return cons


def correct_1d_product(factors, grids=None, tol: float = DEFAULT_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS):
    """Correct each univariate factor 1 + sum_j m_j Hebar_j independently.

    ``factors[k]`` lists coefficients m_0..m_n (m_0 is ignored, it is always 1).
    Returns ``(values, reports)`` with one corrected array per factor on its
    1D grid (default: 200 midpoints on [-6, 6]).
    """
    out, reports = [], []
    for k, m in enumerate(factors):
        m = np.asarray(m, dtype=float)
        grid = grids[k] if grids is not None else build_grid([(-6.0, 6.0)], [200])
        x = grid.axes[0]
        n = m.size - 1
        p = np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)
        if n < 1:
            out.append(np.ones_like(x))
            reports.append(DykstraReport(0, {}, True, 0.0))
            continue
        h = hermite_orthonormal_all(n, x)
        phi0 = 1.0 + np.tensordot(m[1:], h[1:], axes=1)
        vals, rep = dykstra(phi0, hermite_moment_constraints(n, grid, m), p, grid, tol, max_sweeps)
        out.append(vals)
        reports.append(rep)
    return out, reports
