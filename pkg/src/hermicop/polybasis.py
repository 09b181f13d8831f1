"""Probabilists' Hermite polynomials and the 2D rotated tensor basis."""
from __future__ import annotations

from dataclasses import dataclass
from math import factorial, sqrt

import numpy as np

MAX_DEGREE = 16
RHO_GUARD = 1.0 - 1e-6


@dataclass(frozen=True)
class HermiteTable:
    """Exact integer monomial coefficients of He_0 .. He_max_degree.

    ``rows[n][k]`` is the coefficient of x**k in He_n.
    """

    max_degree: int
    rows: tuple[tuple[int, ...], ...]

    @classmethod
    def build(cls, max_degree: int) -> "HermiteTable":
        if not 0 <= max_degree <= MAX_DEGREE:
            raise ValueError(f"max_degree must be in [0, {MAX_DEGREE}]")
        rows: list[list[int]] = [[1]]
        if max_degree >= 1:
            rows.append([0, 1])
        for n in range(1, max_degree):
            nxt = [0] + rows[n]  # x * He_n
            for k, c in enumerate(rows[n - 1]):
                nxt[k] -= n * c
            rows.append(nxt)
        return cls(max_degree, tuple(tuple(r) for r in rows))

    def evaluate(self, n: int, x):
        return np.polynomial.polynomial.polyval(x, np.asarray(self.rows[n], dtype=float))


def _check_degree(n: int) -> None:
    if n < 0 or n > MAX_DEGREE:
        raise ValueError(f"degree {n} outside [0, {MAX_DEGREE}]")


def hermite(n: int, x):
    """He_n(x) by the three-term recurrence."""
    _check_degree(n)
    x = np.asarray(x, dtype=float)
    prev = np.ones_like(x)
    if n == 0:
        return prev if prev.ndim else float(prev)
    cur = x.copy()
    for k in range(1, n):
        prev, cur = cur, x * cur - k * prev
    return cur if cur.ndim else float(cur)


def hermite_orthonormal(n: int, x):
    """He_n(x) / sqrt(n!)."""
    out = hermite(n, x) / sqrt(factorial(n))
    return out


def hermite_orthonormal_all(n_max: int, x) -> np.ndarray:
    """Stack of normalized polynomials, shape ``(n_max + 1,) + x.shape``.

    Uses the normalized recurrence so nothing grows like n!.
    """
    _check_degree(n_max)
    x = np.asarray(x, dtype=float)
    out = np.empty((n_max + 1,) + x.shape)
    out[0] = 1.0
    if n_max >= 1:
        out[1] = x
    for k in range(1, n_max):
        out[k + 1] = (x * out[k] - sqrt(k) * out[k - 1]) / sqrt(k + 1)
    return out


def tensor_basis_2d(n: int, i: int, v1, v2):
    """e_{n,i}(v1, v2) = Hebar_i(v1) * Hebar_{n-i}(v2)."""
    if not 0 <= i <= n:
        raise ValueError(f"index i={i} outside [0, {n}]")
    return hermite_orthonormal(i, v1) * hermite_orthonormal(n - i, v2)


def hermite_shift_expand(i: int, shift: float) -> np.ndarray:
    """Coefficients c_k with Hebar_i(x + shift) = sum_k c_k Hebar_k(x)."""
    _check_degree(i)
    return np.array(
        [sqrt(factorial(i) / factorial(k)) * shift ** (i - k) / factorial(i - k) for k in range(i + 1)]
    )


def shifted_gaussian_moment(i: int, c: float) -> float:
    """Integral of Hebar_i(v) against the N(c, 1) density, which is c**i / sqrt(i!)."""
    _check_degree(i)
    return c**i / sqrt(factorial(i))


@dataclass(frozen=True)
class RotationFactors:
    """Symmetric square root of the 2x2 correlation matrix.

    x = Gamma v with Gamma = [[a1, -a2], [a1, a2]], so v1 loads the common
    direction x1 + x2 and v2 the spread x2 - x1.
    """

    rho: float
    alpha1: float
    alpha2: float
    beta1: float
    beta2: float

    @property
    def sigma(self) -> np.ndarray:
        return np.array([[1.0, self.rho], [self.rho, 1.0]])

    @property
    def gamma(self) -> np.ndarray:
        return np.array([[self.alpha1, -self.alpha2], [self.alpha1, self.alpha2]])

    @property
    def gamma_inv(self) -> np.ndarray:
        return np.array([[self.beta1, self.beta1], [-self.beta2, self.beta2]])


def rotation_factors(rho: float) -> RotationFactors:
    rho = float(rho)
    if not abs(rho) <= RHO_GUARD:
        raise ValueError(f"rho={rho} outside the guard band |rho| <= {RHO_GUARD}")
    a1 = sqrt((1.0 + rho) / 2.0)
    a2 = sqrt((1.0 - rho) / 2.0)
    return RotationFactors(rho, a1, a2, 1.0 / (2.0 * a1), 1.0 / (2.0 * a2))


def cholesky_factor(rho: float) -> np.ndarray:
    """Lower-triangular Gamma; the identity at rho = 0."""
    if not abs(rho) <= RHO_GUARD:
        raise ValueError(f"rho={rho} outside the guard band |rho| <= {RHO_GUARD}")
    return np.array([[1.0, 0.0], [rho, sqrt(1.0 - rho * rho)]])
