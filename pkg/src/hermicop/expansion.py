"""Truncated Hermite expansion of a bivariate density around a correlated Gaussian."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import factorial
from pathlib import Path

import numpy as np

from .polybasis import RHO_GUARD, cholesky_factor, hermite_orthonormal_all, rotation_factors
from .quadrature import CartesianGrid, GridDensity, gaussian_weight_2d

MIN_SECTIONS = 50
STANDARDIZED_TOL = 1e-3


@dataclass
class ExpansionModel:
    """phi(x) = 1 + sum_{n>=1} sum_i coef[n, i] * e_{n,i}(Gamma^-1 x).

    ``coef`` is a dense (n_max + 1, n_max + 1) array; entries with i > n and
    the n = 0 row are ignored. ``basis`` selects Gamma: ``'rotation'`` is the
    symmetric square root, ``'cholesky'`` the lower-triangular factor (the
    identity at rho = 0).
    """

    n_max: int
    rho: float
    coef: np.ndarray = None
    basis: str = "rotation"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_max < 2:
            raise ValueError("n_max must be at least 2")
        if not abs(self.rho) <= RHO_GUARD:
            raise ValueError(f"rho={self.rho} outside the guard band")
        if self.basis not in ("rotation", "cholesky"):
            raise ValueError(f"unknown basis {self.basis!r}")
        if self.coef is None:
            self.coef = np.zeros((self.n_max + 1, self.n_max + 1))
        self.coef = np.array(self.coef, dtype=float)
        if self.coef.shape != (self.n_max + 1, self.n_max + 1):
            raise ValueError("coefficient array has the wrong shape")
        self.coef[0, :] = 0.0
        self.coef[np.triu_indices(self.n_max + 1, 1)] = 0.0

    @property
    def gamma(self) -> np.ndarray:
        if self.basis == "rotation":
            return rotation_factors(self.rho).gamma
        return cholesky_factor(self.rho)

    @property
    def gamma_inv(self) -> np.ndarray:
        if self.basis == "rotation":
            return rotation_factors(self.rho).gamma_inv
        return np.linalg.inv(cholesky_factor(self.rho))

    @property
    def sigma(self) -> np.ndarray:
        return np.array([[1.0, self.rho], [self.rho, 1.0]])

    def indices(self):
        for n in range(1, self.n_max + 1):
            for i in range(n + 1):
                yield n, i

    def with_rho(self, rho: float) -> "ExpansionModel":
        return ExpansionModel(self.n_max, rho, self.coef.copy(), self.basis, dict(self.meta))

    def is_diagonal(self) -> bool:
        """True when only the m_{n,0} entries are nonzero (the pricing configuration)."""
        off = self.coef.copy()
        off[:, 0] = 0.0
        return not np.any(off)

    def ratio_in_v(self, v1, v2) -> np.ndarray:
        """phi evaluated at x = Gamma v, i.e. as a function of the rotated coordinates."""
        h1 = hermite_orthonormal_all(self.n_max, v1)
        h2 = hermite_orthonormal_all(self.n_max, v2)
        out = np.ones(np.broadcast(np.asarray(v1), np.asarray(v2)).shape)
        for n, i in self.indices():
            c = self.coef[n, i]
            if c:
                out = out + c * h1[i] * h2[n - i]
        return out

    def ratio(self, x1, x2) -> np.ndarray:
        g = self.gamma_inv
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        return self.ratio_in_v(g[0, 0] * x1 + g[0, 1] * x2, g[1, 0] * x1 + g[1, 1] * x2)

    def to_json(self) -> dict:
        coefs = [[n, i, float(self.coef[n, i])] for n, i in self.indices()]
        return {"n_max": self.n_max, "rho": float(self.rho), "basis": self.basis, "coefficients": coefs}

    @classmethod
    def from_json(cls, d: dict) -> "ExpansionModel":
        try:
            n_max = int(d["n_max"])
            model = cls(n_max, float(d["rho"]), basis=d.get("basis", "rotation"))
            for n, i, val in d["coefficients"]:
                n, i = int(n), int(i)
                if not (1 <= n <= n_max and 0 <= i <= n):
                    raise ValueError(f"coefficient index ({n}, {i}) out of range")
                model.coef[n, i] = float(val)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed expansion model: {exc}") from None
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "ExpansionModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def basis_values(model: ExpansionModel, grid: CartesianGrid) -> dict[tuple[int, int], np.ndarray]:
    """e_{n,i}(Gamma^-1 x) at every node, for 1 <= n <= n_max."""
    x1, x2 = grid.mesh()
    g = model.gamma_inv
    v1 = g[0, 0] * x1 + g[0, 1] * x2
    v2 = g[1, 0] * x1 + g[1, 1] * x2
    h1 = hermite_orthonormal_all(model.n_max, v1)
    h2 = hermite_orthonormal_all(model.n_max, v2)
    return {(n, i): h1[i] * h2[n - i] for n, i in model.indices()}


def estimate_coefficients(target: GridDensity, rho: float, n_max: int, basis: str = "rotation") -> ExpansionModel:
    """Project a standardized target density onto the orthonormal basis.

    Order-1 coefficients must vanish for a standardized target and are set to
    exactly zero; order-2 coefficients are zeroed when ``rho`` equals the
    target's correlation to within 1e-3.
    """
    if target.grid.ndim != 2:
        raise ValueError("expansion targets are bivariate")
    if min(target.grid.sections) < MIN_SECTIONS:
        raise ValueError(f"grid too coarse: need at least {MIN_SECTIONS} sections per dimension")
    if n_max < 3:
        raise ValueError("n_max must be at least 3")
    model = ExpansionModel(n_max, rho, basis=basis)
    dens = target.density * target.grid.weight
    for (n, i), e in basis_values(model, target.grid).items():
        model.coef[n, i] = float(np.sum(e * dens))
    if np.max(np.abs(model.coef[1, :2])) > STANDARDIZED_TOL:
        raise ValueError("target is not centred: first-order coefficients exceed 1e-3")
    model.coef[1, :] = 0.0
    corr = target.moment((1, 1))
    if abs(corr - rho) <= STANDARDIZED_TOL:
        model.coef[2, :] = 0.0
    return model


def evaluate_expansion(model: ExpansionModel, grid: CartesianGrid) -> GridDensity:
    """Uncorrected expansion on the grid as a ratio density; may go negative."""
    x1, x2 = grid.mesh()
    values = model.ratio(x1, x2)
    gd = GridDensity(grid, values, gaussian_weight_2d(grid, model.rho), "ratio", {"rho": model.rho})
    gd.meta["negative"] = gd.has_negative
    return gd


@dataclass(frozen=True)
class ScaledCoefficients:
    """m_check_i = i! * m_hat_{i,0} for i = 3..n_max."""

    values: tuple[float, ...]

    @property
    def n_max(self) -> int:
        return len(self.values) + 2


def scale_coefficients(model: ExpansionModel) -> ScaledCoefficients:
    return ScaledCoefficients(tuple(factorial(i) * float(model.coef[i, 0]) for i in range(3, model.n_max + 1)))


def unscale(scaled, n_max: int, rho: float, basis: str = "rotation") -> ExpansionModel:
    vals = scaled.values if isinstance(scaled, ScaledCoefficients) else tuple(scaled)
    if len(vals) != n_max - 2:
        raise ValueError(f"expected {n_max - 2} scaled coefficients, got {len(vals)}")
    model = ExpansionModel(n_max, rho, basis=basis)
    for i, v in zip(range(3, n_max + 1), vals):
        model.coef[i, 0] = float(v) / factorial(i)
    return model
