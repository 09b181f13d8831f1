"""Midpoint grids, discrete inner products and Gauss-Hermite rules.

Node storage is row-major by dimension index: a field on a 2D grid is an
array of shape ``(sections[0], sections[1])`` whose first index runs along
x1. Flattening with C order gives the CSV row order.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

DEFAULT_BOUNDS = (-6.0, 6.0)
DEFAULT_SECTIONS = 200


@dataclass(frozen=True)
class CartesianGrid:
    bounds: tuple[tuple[float, float], ...]
    sections: tuple[int, ...]

    def __post_init__(self):
        if len(self.bounds) != len(self.sections):
            raise ValueError("bounds and sections differ in dimension")
        for (lo, hi), m in zip(self.bounds, self.sections):
            if not hi > lo:
                raise ValueError(f"degenerate bounds [{lo}, {hi}]")
            if m < 2:
                raise ValueError("need at least 2 sections per dimension")

    @property
    def ndim(self) -> int:
        return len(self.sections)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.sections)

    @property
    def size(self) -> int:
        return int(np.prod(self.sections))

    @property
    def deltas(self) -> tuple[float, ...]:
        return tuple((hi - lo) / m for (lo, hi), m in zip(self.bounds, self.sections))

    @property
    def weight(self) -> float:
        return float(np.prod(self.deltas))

    @property
    def axes(self) -> list[np.ndarray]:
        return [lo + (np.arange(m) + 0.5) * d for (lo, _), m, d in zip(self.bounds, self.sections, self.deltas)]

    @property
    def edges(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, m + 1) for (lo, hi), m in zip(self.bounds, self.sections)]

    def mesh(self) -> list[np.ndarray]:
        """Node coordinates, one array of shape ``self.shape`` per dimension."""
        return np.meshgrid(*self.axes, indexing="ij")

    def axis_grid(self, axis: int) -> "CartesianGrid":
        return CartesianGrid((self.bounds[axis],), (self.sections[axis],))

    def to_json(self) -> dict:
        return {"bounds": [list(b) for b in self.bounds], "sections": list(self.sections)}

    @classmethod
    def from_json(cls, d: dict) -> "CartesianGrid":
        return cls(tuple(tuple(float(v) for v in b) for b in d["bounds"]), tuple(int(s) for s in d["sections"]))


def build_grid(bounds, sections) -> CartesianGrid:
    """Midpoint grid. ``bounds`` is one ``(low, high)`` pair per dimension."""
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    sections = np.atleast_1d(np.asarray(sections, dtype=int))
    if sections.size == 1 and bounds.shape[0] > 1:
        sections = np.repeat(sections, bounds.shape[0])
    return CartesianGrid(tuple((float(a), float(b)) for a, b in bounds), tuple(int(s) for s in sections))


def default_grid(ndim: int = 2, sections: int = DEFAULT_SECTIONS, bound: float = 6.0) -> CartesianGrid:
    return build_grid([(-bound, bound)] * ndim, [sections] * ndim)


def inner_product(f, g, weight_density, grid: CartesianGrid) -> float:
    """Midpoint approximation of <f, g> under the measure with density ``weight_density``."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    p = np.asarray(weight_density, dtype=float)
    f, g, p = (np.broadcast_to(a, grid.shape) if a.ndim == 0 else a for a in (f, g, p))
    if not (f.size == g.size == p.size == grid.size):
        raise ValueError("array sizes do not match the grid node count")
    # np.sum uses pairwise summation: deterministic, no parallel reduction order issues
    return grid.weight * float(np.sum((f * g * p).ravel()))


def gauss_hermite_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights integrating against the standard normal density."""
    if not 1 <= n <= 64:
        raise ValueError("node count must be in [1, 64]")
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w / np.sqrt(2.0 * np.pi)


def gaussian_density(grid: CartesianGrid, sigma) -> np.ndarray:
    """Centered normal density with covariance ``sigma`` at every node."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    pts = np.stack([m.ravel() for m in grid.mesh()], axis=1)
    prec = np.linalg.inv(sigma)
    q = np.einsum("ij,jk,ik->i", pts, prec, pts)
    norm = np.sqrt((2 * np.pi) ** grid.ndim * np.linalg.det(sigma))
    return (np.exp(-0.5 * q) / norm).reshape(grid.shape)


def gaussian_weight_2d(grid: CartesianGrid, rho: float) -> np.ndarray:
    if not abs(rho) < 1.0:
        raise ValueError("need |rho| < 1")
    x1, x2 = grid.mesh()
    r2 = 1.0 - rho * rho
    q = (x1 * x1 - 2 * rho * x1 * x2 + x2 * x2) / r2
    return np.exp(-0.5 * q) / (2 * np.pi * np.sqrt(r2))


def standard_normal_weight(grid: CartesianGrid) -> np.ndarray:
    out = np.ones(grid.shape)
    for k, m in enumerate(grid.mesh()):
        out = out * np.exp(-0.5 * m * m) / np.sqrt(2 * np.pi)
    return out


@dataclass
class GridDensity:
    """A grid function plus the weight density it is measured against.

    ``kind='ratio'`` means ``values`` is phi = density / weight density;
    ``kind='absolute'`` means ``values`` is the density itself.
    """

    grid: CartesianGrid
    values: np.ndarray
    weight_density: np.ndarray
    kind: Literal["ratio", "absolute"] = "ratio"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        self.weight_density = np.asarray(self.weight_density, dtype=float).reshape(self.grid.shape)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite grid values")
        if not np.all(self.weight_density > 0):
            raise ValueError("weight density must be strictly positive")
        if self.kind not in ("ratio", "absolute"):
            raise ValueError(f"unknown kind {self.kind!r}")

    @property
    def density(self) -> np.ndarray:
        return self.values * self.weight_density if self.kind == "ratio" else self.values

    @property
    def ratio(self) -> np.ndarray:
        return self.values if self.kind == "ratio" else self.values / self.weight_density

    @property
    def has_negative(self) -> bool:
        return bool(np.min(self.values) < 0.0)

    def mass(self) -> float:
        return self.grid.weight * float(np.sum(self.density))

    def moment(self, powers) -> float:
        """E[prod x_k ** powers[k]] under the (absolute) density on the grid."""
        f = np.ones(self.grid.shape)
        for m, p in zip(self.grid.mesh(), powers):
            if p:
                f = f * m**p
        return self.grid.weight * float(np.sum(f * self.density))

    def moment_table(self, max_order: int = 8) -> np.ndarray:
        """``table[j, i] = E[x1**i x2**j]`` for i + j <= max_order, NaN elsewhere (2D only)."""
        if self.grid.ndim != 2:
            raise ValueError("moment tables are 2D only")
        x1, x2 = self.grid.mesh()
        dens = self.density * self.grid.weight
        p1 = [np.ones_like(x1)]
        p2 = [np.ones_like(x2)]
        for _ in range(max_order):
            p1.append(p1[-1] * x1)
            p2.append(p2[-1] * x2)
        out = np.full((max_order + 1, max_order + 1), np.nan)
        for j in range(max_order + 1):
            for i in range(max_order + 1 - j):
                out[j, i] = float(np.sum(p1[i] * p2[j] * dens))
        return out

    def save(self, csv_path) -> None:
        """CSV ``x1,...,value`` plus a JSON sidecar next to it."""
        csv_path = Path(csv_path)
        cols = [m.ravel() for m in self.grid.mesh()]
        header = [f"x{k + 1}" for k in range(self.grid.ndim)] + ["value"]
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in zip(*cols, self.values.ravel()):
                w.writerow([repr(float(v)) for v in row])
        side = {"grid": self.grid.to_json(), "kind": self.kind, **self.meta}
        csv_path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))

    @classmethod
    def load(cls, csv_path, weight_density=None) -> "GridDensity":
        """Read a density written by :meth:`save`.

        The weight density is rebuilt from the sidecar's ``rho`` (bivariate
        normal) unless given explicitly. Raises ``ValueError`` naming the
        offending row on malformed input.
        """
        csv_path = Path(csv_path)
        side = json.loads(csv_path.with_suffix(".json").read_text())
        grid = CartesianGrid.from_json(side["grid"])
        values = np.empty(grid.size)
        with csv_path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            expected = [f"x{k + 1}" for k in range(grid.ndim)] + ["value"]
            if header != expected:
                raise ValueError(f"{csv_path}: bad header {header}, expected {expected}")
            n = 0
            for lineno, row in enumerate(reader, start=2):
                if len(row) != grid.ndim + 1:
                    raise ValueError(f"{csv_path}: row {lineno} has {len(row)} fields")
                try:
                    values[n] = float(row[-1])
                except (ValueError, IndexError) as exc:
                    raise ValueError(f"{csv_path}: row {lineno}: {exc}") from None
                n += 1
                if n > grid.size:
                    raise ValueError(f"{csv_path}: row {lineno}: more rows than grid nodes")
        if n != grid.size:
            raise ValueError(f"{csv_path}: {n} rows, grid has {grid.size} nodes")
        meta = {k: v for k, v in side.items() if k not in ("grid", "kind")}
        if weight_density is None:
            rho = float(meta.get("rho", 0.0))
            weight_density = gaussian_weight_2d(grid, rho) if grid.ndim == 2 else standard_normal_weight(grid)
        return cls(grid, values, weight_density, side.get("kind", "ratio"), meta)
