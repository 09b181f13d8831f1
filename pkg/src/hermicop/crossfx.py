"""Cross-pair option pricing from two straight-pair smiles joined by a copula.

With X1 = log S_XZ(T) and X2 = log S_YZ(T) under the Z measure, a call on
the cross X/Y struck at K is worth D_Z * E[(exp(X1) - K exp(X2))+] in Z.
Dividing by D_Z * E[exp(X2)] turns it into an undiscounted Black call on the
cross forward E[exp(X1)] / E[exp(X2)].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from math import factorial, sqrt

import numpy as np
from scipy.special import ndtr

from .copula_build import HermiteCopula
from .copulas import ClassicalCopula, copula_density
from .expansion import ExpansionModel
from .polybasis import hermite_orthonormal_all, rotation_factors
from .quadrature import CartesianGrid, default_grid
from .smile import PILLARS, PILLAR_DELTA, SmileCurve, SmilePillars, implied_vol, strike_from_delta

GL_PANELS = 40
GL_NODES = 10
PANEL_Z = 8.0
FIXED_POINT_ITERS = 20


@dataclass
class CrossSetup:
    """Marginal curves of X/Z and Y/Z, a copula, and the Z and Y discounts.

    ``copula`` is a :class:`ClassicalCopula`, a :class:`HermiteCopula`, or an
    :class:`ExpansionModel` (corrected on first use).
    """

    curve_xz: SmileCurve
    curve_yz: SmileCurve
    copula: object
    D_Z: float | None = None
    D_Y: float | None = None
    S_YZ: float | None = None

    def __post_init__(self):
        if abs(self.curve_xz.T - self.curve_yz.T) > 1e-12:
            raise ValueError("both straight curves must share the tenor")
        if self.D_Z is None:
            self.D_Z = self.curve_xz.pillars.D_dom
        if self.D_Y is None:
            self.D_Y = self.curve_yz.pillars.D_for
        if self.S_YZ is None:
            # forward parity F_YZ = S_YZ * D_Y / D_Z
            self.S_YZ = self.curve_yz.F * self.D_Z / self.D_Y
        if isinstance(self.copula, ExpansionModel):
            self.copula = HermiteCopula.from_model(self.copula)

    @property
    def T(self) -> float:
        return self.curve_xz.T


def gl_panel_nodes(panels: int = GL_PANELS, nodes: int = GL_NODES, zmax: float = PANEL_Z):
    """Gauss-Legendre nodes on (0, 1) with panel breaks at Phi(linspace(-zmax, zmax, panels+1))."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    breaks = ndtr(np.linspace(-zmax, zmax, panels + 1))
    a, b = breaks[:-1, None], breaks[1:, None]
    u = (0.5 * (b - a) * (x + 1) + a).ravel()
    wu = (0.5 * (b - a) * w).ravel()
    return u, wu


@dataclass
class CrossPricer:
    """Node mappings for one setup; only the payoff depends on the strike."""

    setup: CrossSetup
    vgrid: CartesianGrid | None = None
    y1: np.ndarray = field(init=False)
    y2: np.ndarray = field(init=False)
    w: np.ndarray = field(init=False)
    path: str = field(init=False)

    def __post_init__(self):
        s = self.setup
        if isinstance(s.copula, ClassicalCopula):
            self.path = "classical"
            u, wu = gl_panel_nodes()
            y1 = s.curve_xz.quantile(u)
            y2 = s.curve_yz.quantile(u)
            U1, U2 = np.meshgrid(u, u, indexing="ij")
            self.w = np.outer(wu, wu) * copula_density(s.copula, U1, U2)
            self.y1, self.y2 = np.meshgrid(y1, y2, indexing="ij")
        elif isinstance(s.copula, HermiteCopula):
            self.path = "hermite"
            self._build_hermite(s.copula)
        else:
            raise TypeError(f"unsupported copula type {type(s.copula).__name__}")
        self.F1 = float(np.sum(self.w * np.exp(self.y1)))
        self.F2 = float(np.sum(self.w * np.exp(self.y2)))

    def _map(self, cop: HermiteCopula, x1, x2):
        s = self.setup
        u1 = np.clip(cop.marginals[0].cdf_at(x1), 1e-15, 1 - 1e-15)
        u2 = np.clip(cop.marginals[1].cdf_at(x2), 1e-15, 1 - 1e-15)
        return s.curve_xz.quantile(u1), s.curve_yz.quantile(u2)

    def _build_hermite(self, cop: HermiteCopula):
        if cop.model is None:
            x1, x2, w = cop.integration_nodes()
            self.y1, self.y2 = self._map(cop, x1, x2)
            self.w = w
            return
        vgrid = self.vgrid or cop.density.grid
        v1, v2 = vgrid.mesh()
        g = cop.model.gamma
        self.y1, self.y2 = self._map(cop, g[0, 0] * v1 + g[0, 1] * v2, g[1, 0] * v1 + g[1, 1] * v2)
        pw = np.exp(-0.5 * (v1 * v1 + v2 * v2)) / (2 * np.pi)
        self.w = cop.ratio_v(v1, v2) * pw * vgrid.weight

    def call_undiscounted(self, K: float) -> float:
        """E[(exp(X1) - K exp(X2))+] under the joint law."""
        if not K > 0:
            raise ValueError("strike must be positive")
        gap = np.exp(self.y1) - K * np.exp(self.y2)
        return float(np.sum(self.w * np.maximum(gap, 0.0)))

    def call(self, K: float) -> float:
        return self.setup.D_Z * self.call_undiscounted(K)

    def put(self, K: float) -> float:
        # parity under the same quadrature
        return self.call(K) - self.setup.D_Z * (self.F1 - K * self.F2)

    @property
    def forward(self) -> float:
        return self.F1 / self.F2

    def implied_vol(self, K: float) -> float:
        c = self.call_undiscounted(K) / self.F2
        return implied_vol(c, K, self.forward, self.setup.T, 1.0, call=True)

    def smile_pillars(self, atm_guess: float = 0.1) -> SmilePillars:
        """Cross pillars; each pillar strike solves strike = K(delta, vol(strike)) by fixed point."""
        T = self.setup.T
        F = self.forward
        vols = {}
        self.fixed_point_converged = True
        for name in PILLARS:
            sig = vols.get("atm", atm_guess)
            for _ in range(FIXED_POINT_ITERS):
                K = strike_from_delta(F, sig, T, PILLAR_DELTA[name], name.startswith("c"))
                new = self.implied_vol(K)
                done = abs(new - sig) < 1e-10
                sig = new
                if done:
                    break
            else:
                self.fixed_point_converged = False
            vols[name] = sig
        s = self.setup
        xz, yz = s.curve_xz.pillars, s.curve_yz.pillars
        pair = xz.pair[:3] + yz.pair[:3] if len(xz.pair) == 6 and len(yz.pair) == 6 else ""
        # quote currency Y: its discount is D_Y; D_X follows from forward parity
        d_x = F * s.D_Y * s.S_YZ / (s.curve_xz.F * s.D_Z / xz.D_for) if xz.D_for else 1.0
        return SmilePillars(T, F, s.D_Y, vols["atm"], vols["c25"], vols["p25"], vols["c10"], vols["p10"],
                            d_x, xz.date, pair, xz.tenor)


def price_cross_call(s: CrossSetup, K: float, pricer: CrossPricer | None = None) -> float:
    return (pricer or CrossPricer(s)).call(K)


def cross_implied_vol(s: CrossSetup, K: float, pricer: CrossPricer | None = None) -> float:
    return (pricer or CrossPricer(s)).implied_vol(K)


def cross_smile_pillars(s: CrossSetup, pricer: CrossPricer | None = None) -> SmilePillars:
    return (pricer or CrossPricer(s)).smile_pillars()


def forward_consistency(s: CrossSetup, pricer: CrossPricer | None = None) -> float:
    """|D_Z E[exp(X2)] - S_YZ(0) D_Y| / (S_YZ(0) D_Y)."""
    p = pricer or CrossPricer(s)
    ref = s.S_YZ * s.D_Y
    return abs(s.D_Z * p.F2 - ref) / ref


def triangular_vol(s1: float, s2: float, rho: float) -> float:
    return math.sqrt(max(s1 * s1 + s2 * s2 - 2 * rho * s1 * s2, 0.0))


@dataclass
class LambdaDiagnostic:
    coefficients: np.ndarray
    shift: float
    log_rate_scale: float
    log_rate_mean: float

    def density(self, v2):
        """Normalized density of v2 (the spread coordinate)."""
        v = np.asarray(v2, dtype=float) - self.shift
        h = hermite_orthonormal_all(len(self.coefficients) - 1, v)
        poly = np.tensordot(self.coefficients, h, axes=1)
        return poly * np.exp(-0.5 * v * v) / sqrt(2 * np.pi) / self.coefficients[0]

    def log_rate(self, v2):
        """Approximate log S_XY(T) at spread coordinate v2."""
        return self.log_rate_mean - self.log_rate_scale * np.asarray(v2, dtype=float)


def lambda_diagnostic(model: ExpansionModel, sigma: float, nu_xz: float = 0.0, nu_yz: float = 0.0) -> LambdaDiagnostic:
    """Approximate cross log-rate density implied by an uncorrected expansion.

    Both legs are taken Gaussian-standardized with the common scale ``sigma``.
    Coefficient k multiplies Hebar_k; coefficient 0 includes the constant 1.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    f = rotation_factors(model.rho)
    a1, a2 = f.alpha1, f.alpha2
    nm = model.n_max
    c = np.zeros(nm + 1)
    c[0] = 1.0
    for k in range(nm + 1):
        for n in range(max(3, k), nm + 1):
            for i in range(n - k + 1):
                m = model.coef[n, i]
                if m:
                    c[k] += (m * sqrt(factorial(n - i) / (factorial(i) * factorial(k)))
                             * sigma ** (n - k) * a1**i * a2 ** (n - i - k) / factorial(n - i - k))
    return LambdaDiagnostic(c, sigma * a2, 2 * sigma * a2, nu_xz - nu_yz)
