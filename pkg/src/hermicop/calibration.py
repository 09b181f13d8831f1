"""Copula calibration to cross smiles and the monthly backtest protocol.

Classical families have one parameter and are fitted with bounded Brent.
The Hermite copula is fitted over (rho, m3, m4, m5, m6) with BFGS, where
m_i = i! * m_hat_{i,0} and all other coefficients are zero.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from ._jit import thread_cap
from .copulas import THETA_BRACKETS, ClassicalCopula
from .crossfx import CrossPricer, CrossSetup
from .expansion import ExpansionModel, unscale
from .smile import PILLARS, SmileCurve, SmilePillars, build_curve

log = logging.getLogger(__name__)

HERMITE_N_MAX = 6
RHO_BOUND = 0.999
HERMITE_PARAMS = ("rho", "m3", "m4", "m5", "m6")
REPORT_HEADER = ["date", "setting", "family", "tenor", "rmse", "atm_err", "c25_err", "p25_err", "c10_err", "p10_err"]


# -- optimizers -------------------------------------------------------------------

def brent_minimize(f: Callable[[float], float], bracket, tol: float = 1e-10) -> float:
    lo, hi = float(bracket[0]), float(bracket[1])
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ValueError(f"invalid bracket [{lo}, {hi}]")
    res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": tol, "maxiter": 500})
    return float(res.x)


@dataclass
class QNResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool
    line_search_failed: bool = False
    evaluations: int = 0


def numeric_gradient(f, x: np.ndarray, rel_step: float = 1e-5, f_cache: dict | None = None) -> np.ndarray:
    g = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def quasi_newton_minimize(f: Callable[[np.ndarray], float], x0, tol: float = 1e-10, max_iter: int = 200,
                          rel_step: float = 1e-5, gtol: float = 1e-9) -> QNResult:
    """BFGS with central-difference gradients and a backtracking line search.

    The line search also tries the minimizer of the quadratic through f(0),
    f'(0) and f(alpha), which makes it exact on quadratics. Returns the best
    point seen.
    """
    evals = 0

    def fx(x):
        nonlocal evals
        evals += 1
        return float(f(x))

    x = np.array(x0, dtype=float)
    n = x.size
    fval = fx(x)
    if not np.isfinite(fval):
        raise ValueError("objective is not finite at the starting point")
    g = numeric_gradient(fx, x, rel_step)
    H = np.eye(n)
    failed = False
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(g, np.inf) < gtol:
            converged = True
            it -= 1
            break
        d = -H @ g
        slope = float(g @ d)
        if slope >= 0:
            H = np.eye(n)
            d = -g
            slope = float(g @ d)
        alpha = 1.0
        accepted = None
        for _ in range(40):
            xn = x + alpha * d
            fn = fx(xn)
            if np.isfinite(fn) and fn <= fval + 1e-4 * alpha * slope:
                accepted = (alpha, xn, fn)
                break
            alpha *= 0.5
        if accepted is None:
            failed = True
            break
        alpha, xn, fn = accepted
        curv = fn - fval - slope * alpha
        # interpolated step kept only when f along d confirms the quadratic model
        if curv > 0:
            a_star = -slope * alpha * alpha / (2 * curv)
            if 0 < a_star and abs(a_star - alpha) > 1e-12 * alpha:
                xq = x + a_star * d
                fq = fx(xq)
                pred = fval + 0.5 * slope * a_star
                if np.isfinite(fq) and fq < fn and abs(fq - pred) <= 1e-3 * (fval - pred):
                    alpha, xn, fn = a_star, xq, fq
        gn = numeric_gradient(fx, xn, rel_step)
        s = xn - x
        y = gn - g
        sy = float(s @ y)
        small = abs(fval - fn) <= tol * max(1.0, abs(fval)) and np.linalg.norm(s, np.inf) <= 1e-10 * max(1.0, np.linalg.norm(x, np.inf))
        x, fval, g = xn, fn, gn
        if sy > 1e-300:
            rho = 1.0 / sy
            I = np.eye(n)
            if it == 1:
                H = (sy / float(y @ y)) * I
            H = (I - rho * np.outer(s, y)) @ H @ (I - rho * np.outer(y, s)) + rho * np.outer(s, s)
        if small:
            converged = True
            break
    return QNResult(x, fval, it, converged, failed, evals)


# -- model plumbing --------------------------------------------------------------------

def _logit(r: float) -> float:
    r = min(max(r / RHO_BOUND, -1 + 1e-15), 1 - 1e-15)
    return math.atanh(r)


def _expit(z: float) -> float:
    return RHO_BOUND * math.tanh(z)


def make_copula(family: str, params: dict):
    family = family.lower()
    if family == "hermite":
        m = [params[k] for k in HERMITE_PARAMS[1:]]
        return unscale(m, HERMITE_N_MAX, params["rho"])
    return ClassicalCopula(family, params["theta"])


def model_pillars(family: str, params: dict, curve_xz: SmileCurve, curve_yz: SmileCurve) -> SmilePillars:
    setup = CrossSetup(curve_xz, curve_yz, make_copula(family, params))
    return CrossPricer(setup).smile_pillars()


def objective_from_vols(model_vols, target_vols) -> float:
    r = np.asarray(model_vols, float) - np.asarray(target_vols, float)
    return float(np.mean(r * r))


@dataclass
class CalibrationResult:
    family: str
    params: dict
    objective: float
    residuals: np.ndarray
    iterations: int
    converged: bool
    model: SmilePillars | None = None
    meta: dict = field(default_factory=dict)

    @property
    def rmse(self) -> float:
        return math.sqrt(self.objective)

    def to_json(self) -> dict:
        return {"family": self.family, "params": self.params, "objective": self.objective,
                "residuals": dict(zip(PILLARS, map(float, self.residuals))),
                "iterations": self.iterations, "converged": self.converged}


def _result(family, params, target: SmilePillars, curves, iterations, converged) -> CalibrationResult:
    try:
        model = model_pillars(family, params, *curves)
        res = model.vols - target.vols
    except ValueError as exc:
        log.warning("model smile failed at %s: %s", params, exc)
        return CalibrationResult(family, params, math.inf, np.full(5, np.nan), iterations, False)
    return CalibrationResult(family, params, float(np.mean(res * res)), res, iterations, converged, model)


def _penalized_objective(family, target, curves, to_params):
    def f(z):
        try:
            vols = model_pillars(family, to_params(z), *curves).vols
        except ValueError:
            return 1.0  # outside the attainable region: a flat, large value
        return objective_from_vols(vols, target.vols)
    return f


def calibrate_smile(target: SmilePillars, curve_xz: SmileCurve, curve_yz: SmileCurve, family: str,
                    start: dict | None = None, tol: float = 1e-12, max_iter: int = 200) -> CalibrationResult:
    family = family.lower()
    curves = (curve_xz, curve_yz)
    if family != "hermite":
        lo, hi = THETA_BRACKETS[family]
        segments = [(lo, hi)]
        if family == "frank":
            segments = [(lo, -1e-4), (1e-4, hi)]
        best = None
        for a, b in segments:
            f = _penalized_objective(family, target, curves, lambda t: {"theta": float(t)})
            th = brent_minimize(f, (a, b), tol=1e-10)
            r = _result(family, {"theta": th}, target, curves, 0, True)
            if best is None or r.objective < best.objective:
                best = r
        return best
    if start is None:
        gauss = calibrate_smile(target, curve_xz, curve_yz, "gauss")
        start = {"rho": gauss.params["theta"], "m3": 0.0, "m4": 0.0, "m5": 0.0, "m6": 0.0}

    def to_params(z):
        return {"rho": _expit(z[0]), **{k: float(v) for k, v in zip(HERMITE_PARAMS[1:], z[1:])}}

    z0 = np.array([_logit(start["rho"])] + [start[k] for k in HERMITE_PARAMS[1:]])
    f = _penalized_objective("hermite", target, curves, to_params)
    qn = quasi_newton_minimize(f, z0, tol=tol, max_iter=max_iter)
    out = _result("hermite", to_params(qn.x), target, curves, qn.iterations, qn.converged)
    out.meta["line_search_failed"] = qn.line_search_failed
    out.meta["z"] = qn.x.tolist()
    return out


def _bracket_root(f, x0: float, lo: float, hi: float, step: float = 0.02):
    """Expand outward from x0 until f changes sign; points where f raises end the search on that side.

    Returns (a, b) bracketing a root, (x0, None) if x0 is itself a root, or (None, None).
    """
    x0 = min(max(x0, lo), hi)
    f0 = f(x0)
    if f0 == 0:
        return x0, None
    live = {-1: True, 1: True}
    last = {-1: (x0, f0), 1: (x0, f0)}
    h = step * max(1.0, abs(x0))
    while any(live.values()):
        for side in (-1, 1):
            if not live[side]:
                continue
            xp, fp = last[side]
            x = min(max(x0 + side * h, lo), hi)
            try:
                fx = f(x)
            except ValueError:
                live[side] = False
                continue
            if fx * fp <= 0:
                return (x, xp) if side < 0 else (xp, x)
            last[side] = (x, fx)
            if x in (lo, hi):
                live[side] = False
        h *= 2
    return None, None


def recalibrate_rho_to_atm(prev: CalibrationResult, atm_target: float, curve_xz: SmileCurve,
                           curve_yz: SmileCurve, target: SmilePillars | None = None) -> CalibrationResult:
    """Solve ATM(rho) = atm_target holding the smile-shape parameters fixed.

    Classical families recalibrate theta instead. Raises ``ValueError`` when
    the target is outside the attainable ATM range.
    """
    fam = prev.family
    key = "rho" if fam == "hermite" else "theta"
    lo, hi = (-RHO_BOUND, RHO_BOUND) if fam == "hermite" else THETA_BRACKETS[fam]
    if fam == "frank":
        lo, hi = (1e-4, hi) if prev.params["theta"] > 0 else (lo, -1e-4)

    def atm_err(v):
        p = dict(prev.params)
        p[key] = float(v)
        setup = CrossSetup(curve_xz, curve_yz, make_copula(fam, p))
        pr = CrossPricer(setup)
        F = pr.forward
        sig = atm_target
        for _ in range(20):
            K = F * math.exp(0.5 * sig * sig * setup.T)
            new = pr.implied_vol(K)
            if abs(new - sig) < 1e-12:
                sig = new
                break
            sig = new
        return sig - atm_target

    a, b = _bracket_root(atm_err, prev.params[key], lo, hi)
    if a is None:
        raise ValueError(f"ATM target {atm_target} not attainable for {key} in [{lo}, {hi}]")
    v = a if b is None else brentq(atm_err, a, b, xtol=1e-12)
    params = dict(prev.params)
    params[key] = float(v)
    tgt = target if target is not None else (prev.model.with_vols([atm_target] * 5) if prev.model else None)
    if tgt is None:
        return CalibrationResult(fam, params, math.nan, np.full(5, np.nan), 0, True)
    return _result(fam, params, tgt, (curve_xz, curve_yz), 0, True)


# -- backtest -----------------------------------------------------------------------

@dataclass
class MarketDay:
    date: str
    xz: SmilePillars
    yz: SmilePillars
    cross: SmilePillars | None = None

    def curves(self) -> tuple[SmileCurve, SmileCurve]:
        return build_curve(self.xz), build_curve(self.yz)


@dataclass
class BacktestRow:
    date: str
    setting: str
    family: str
    tenor: str
    rmse: float
    errors: np.ndarray

    def to_row(self) -> list:
        return [self.date, self.setting, self.family, self.tenor, repr(float(self.rmse))] + [repr(float(e)) for e in self.errors]


@dataclass
class BacktestReport:
    rows: list
    setting: str
    family: str
    tenor: str
    month_end: CalibrationResult | None = None
    skipped: list = field(default_factory=list)

    @property
    def rmse(self) -> np.ndarray:
        return np.array([r.rmse for r in self.rows])

    def save(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow(r.to_row())


def read_backtest_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_HEADER:
            raise ValueError(f"{path}: header must be {','.join(REPORT_HEADER)}")
        return [{k: (v if k in ("date", "setting", "family", "tenor") else float(v)) for k, v in row.items()} for row in reader]


def rmse(model_vols, target_vols) -> float:
    return math.sqrt(objective_from_vols(model_vols, target_vols))


def backtest(month_end: MarketDay, days: list, setting: str, family: str,
             fitted: CalibrationResult | None = None) -> BacktestReport:
    """Setting 'c': daily ATM recalibration of rho (theta); 'd': frozen month-end parameters."""
    setting = setting.lower()
    if setting not in ("c", "d"):
        raise ValueError("setting must be 'c' or 'd'")
    if month_end.cross is None:
        raise ValueError("month-end cross smile is required")
    if fitted is None:
        fitted = calibrate_smile(month_end.cross, *month_end.curves(), family)
    def one(day):
        if day.cross is None:
            return day.date, None, "no cross smile"
        try:
            cx, cy = day.curves()
            if setting == "c":
                vols = recalibrate_rho_to_atm(fitted, day.cross.atm, cx, cy, day.cross).model.vols
            else:
                vols = model_pillars(family, fitted.params, cx, cy).vols
        except ValueError as exc:
            return day.date, None, str(exc)
        err = vols - day.cross.vols
        return day.date, BacktestRow(day.date, setting, family, day.cross.tenor, rmse(vols, day.cross.vols), err), ""

    workers = min(thread_cap(), max(1, len(days)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, days))
    else:
        results = [one(d) for d in days]
    rows, skipped = [], []
    # results keep input order, so the report does not depend on scheduling
    for date, row, why in results:
        if row is None:
            log.warning("%s: %s, day skipped", date, why)
            skipped.append(date)
        else:
            rows.append(row)
    return BacktestReport(rows, setting, family, month_end.cross.tenor, fitted, skipped)


# -- synthetic data -------------------------------------------------------------------

def synthetic_month(n_days: int = 21, rho_start: float = 0.3661, rho_end: float = 0.3661,
                    m: tuple = (-0.3535, 0.9641, 0.0827, -2.0537), tenor: str = "1Y", T: float = 1.0,
                    xz_vols=(0.075, 0.077, 0.080, 0.080, 0.086), yz_vols=(0.085, 0.081, 0.092, 0.080, 0.101),
                    vol_drift: float = 0.002, family: str = "hermite") -> tuple[MarketDay, list]:
    """A month-end day plus ``n_days`` business days whose cross smiles come
    from a Hermite copula with fixed shape and linearly drifting rho.

    For a classical ``family`` the drifting quantity is theta and ``m`` is unused.

    Straight vols drift by up to ``vol_drift`` over the month. Deterministic.
    """
    def day(k: int, rho: float) -> MarketDay:
        frac = k / max(n_days, 1)
        bump = vol_drift * math.sin(0.7 * k) * frac
        xz = SmilePillars(T, 1.16 * (1 + 0.001 * k), 0.995, *[v + bump for v in xz_vols],
                          D_for=0.99, date=f"d{k:02d}", pair="EURUSD", tenor=tenor)
        yz = SmilePillars(T, 0.0088 * (1 - 0.0005 * k), 0.995, *[v - 0.5 * bump for v in yz_vols],
                          D_for=0.9995, date=f"d{k:02d}", pair="JPYUSD", tenor=tenor)
        cx, cy = build_curve(xz), build_curve(yz)
        if family == "hermite":
            params = {"rho": rho, **dict(zip(HERMITE_PARAMS[1:], m))}
        else:
            params = {"theta": rho}
        cross = model_pillars(family, params, cx, cy)
        cross = SmilePillars(cross.T, cross.F, cross.D_dom, *cross.vols, D_for=cross.D_for,
                             date=f"d{k:02d}", pair="EURJPY", tenor=tenor)
        return MarketDay(f"d{k:02d}", xz, yz, cross)

    end = day(0, rho_start)
    days = [day(k, rho_start + (rho_end - rho_start) * k / n_days) for k in range(1, n_days + 1)]
    return end, days


def params_table_json(date: str, tenor: str, results: dict) -> dict:
    """Fitted parameters in the layout date, tenor, one entry per family."""
    out = {"date": date, "tenor": tenor, "classical": {}, "hermite": None}
    for fam, r in results.items():
        if fam == "hermite":
            out["hermite"] = {k: r.params[k] for k in HERMITE_PARAMS}
        else:
            out["classical"][fam] = r.params["theta"]
    return out


def save_params_json(path, tables: list) -> None:
    Path(path).write_text(json.dumps(tables, indent=2))
