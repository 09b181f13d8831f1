"""Batch front end.

Every command takes an optional ``--config`` JSON file whose keys are the
long option names (dashes or underscores); explicit flags override it.
Outputs are tidy CSV/JSON files in ``--out``.

Exit codes: 0 ok, 2 input error, 3 missing data, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .calibration import (
    HERMITE_PARAMS, REPORT_HEADER, CalibrationResult, MarketDay, backtest, calibrate_smile, make_copula,
    model_pillars, params_table_json, save_params_json,
)
from .copula_build import correct_expansion
from .copulas import FAMILIES, ClassicalCopula, joint_density_normal_marginals, spearman_to_theta
from .correction import MomentMatch, NonNegativity, Normalization, dykstra
from .crossfx import CrossPricer, CrossSetup, forward_consistency
from .expansion import ExpansionModel, basis_values, estimate_coefficients
from .quadrature import GridDensity, build_grid
from .smile import SmilePillars, build_curve, read_pillars_csv, write_pillars_csv

log = logging.getLogger("hermicop")

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
ALL_FAMILIES = ("clayton", "frank", "gumbel", "plackett", "gauss", "hermite")
MOMENT_ORDER = 8
MOMENT_HEADER = ["power_x1", "power_x2", "target", "uncorrected", "corrected"]
SWEEP_HEADER = ["parameter", "shift", "value", "atm"]
SMILE_HEADER = ["strike", "vol", "call", "put"]

DEFAULTS = {
    "out": "out",
    "family": "clayton",
    "spearman": 0.6,
    "input": None,
    "n_max": 4,
    "sections": 200,
    "bound": 6.0,
    "tol": 1e-10,
    "max_sweeps": 5000,
    "cases": "a,b",
    "xz": None,
    "yz": None,
    "cross": None,
    "date": None,
    "tenor": None,
    "families": ",".join(ALL_FAMILIES),
    "params": None,
    "theta": None,
    "strikes": 41,
    "width": 2.5,
    "points": 11,
    "parameters": ",".join(HERMITE_PARAMS),
    "settings": "c,d",
    "month_end": None,
    "output": None,
}


class MissingData(Exception):
    pass


class NumericalFailure(Exception):
    pass


# -- config ------------------------------------------------------------------------

def _merge(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{args.config}: invalid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
        for k, v in loaded.items():
            key = k.replace("-", "_")
            if key not in DEFAULTS:
                raise ValueError(f"{args.config}: unknown key {k!r}")
            cfg[key] = v
    for k, v in vars(args).items():
        if k in DEFAULTS and v is not None:
            cfg[k] = v
    if int(cfg["n_max"]) < 1 or int(cfg["sections"]) < 2 or float(cfg["bound"]) <= 0:
        raise ValueError("n_max, sections and bound must be positive")
    if float(cfg["tol"]) <= 0 or int(cfg["max_sweeps"]) < 1:
        raise ValueError("tol and max_sweeps must be positive")
    return cfg


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _csv_list(s) -> list[str]:
    if isinstance(s, (list, tuple)):
        return [str(x).strip().lower() for x in s]
    return [x.strip().lower() for x in str(s).split(",") if x.strip()]


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return repr(float(x))


# -- market data -------------------------------------------------------------------

def _require(cfg, key) -> Path:
    if not cfg.get(key):
        raise ValueError(f"--{key.replace('_', '-')} is required")
    p = Path(cfg[key])
    if not p.exists():
        raise MissingData(f"{p}: file not found")
    return p


def _load_pillars(cfg, key) -> list[SmilePillars]:
    return read_pillars_csv(_require(cfg, key))


def _pick(rows: list[SmilePillars], date, tenor, what: str) -> SmilePillars:
    hits = [r for r in rows if (date is None or r.date == date) and (tenor is None or r.tenor == tenor)]
    if not hits:
        raise MissingData(f"no {what} pillars for date={date} tenor={tenor}")
    return hits[-1]


def _default_date(rows: list[SmilePillars]) -> str:
    if not rows:
        raise MissingData("empty pillar file")
    return sorted(r.date for r in rows)[-1]


def _tenors(rows, date) -> list[str]:
    seen = []
    for r in rows:
        if r.date == date and r.tenor not in seen:
            seen.append(r.tenor)
    return seen


def _load_params(cfg, date, tenor) -> dict:
    path = _require(cfg, "params")
    try:
        tables = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON: {exc}") from None
    if isinstance(tables, dict):
        tables = [tables]
    hits = [t for t in tables if (date is None or t.get("date") == date) and (tenor is None or t.get("tenor") == tenor)]
    if not hits:
        hits = [t for t in tables if tenor is None or t.get("tenor") == tenor]
    if not hits:
        raise MissingData(f"{path}: no parameters for date={date} tenor={tenor}")
    return hits[-1]


def _family_params(table: dict, family: str) -> dict:
    if family == "hermite":
        h = table.get("hermite")
        if not h:
            raise MissingData("parameter table has no hermite entry")
        return {k: float(h[k]) for k in HERMITE_PARAMS}
    cl = table.get("classical", {})
    if family not in cl:
        raise MissingData(f"parameter table has no {family} entry")
    return {"theta": float(cl[family])}


# -- commands ----------------------------------------------------------------------

def _target_density(cfg, grid) -> GridDensity:
    if cfg["input"]:
        return GridDensity.load(_require(cfg, "input"))
    fam = str(cfg["family"]).lower()
    if fam == "placett":
        fam = "plackett"
    if fam not in FAMILIES:
        raise ValueError(f"unknown family {cfg['family']!r}")
    theta = spearman_to_theta(fam, float(cfg["spearman"]))
    x1, x2 = grid.mesh()
    dens = joint_density_normal_marginals(ClassicalCopula(fam, theta), x1, x2)
    return GridDensity(grid, dens, np.ones(grid.shape), "absolute", {"family": fam, "theta": theta,
                                                                     "spearman": float(cfg["spearman"])})


def cmd_fit_density(cfg) -> int:
    out = _out_dir(cfg)
    b = float(cfg["bound"])
    n = int(cfg["sections"])
    grid = build_grid([(-b, b), (-b, b)], [n, n])
    target = _target_density(cfg, grid)
    if target.grid.ndim != 2:
        raise ValueError("fit-density needs a bivariate target")
    grid = target.grid
    target.save(out / "target.csv")
    tgt_tab = target.moment_table(MOMENT_ORDER)
    for case in _csv_list(cfg["cases"]):
        if case == "a":
            rho, basis = 0.0, "cholesky"
        elif case == "b":
            rho, basis = target.moment((1, 1)), "rotation"
        else:
            raise ValueError(f"unknown case {case!r}; use a or b")
        model = estimate_coefficients(target, rho, int(cfg["n_max"]), basis)
        raw, corr, rep = correct_expansion(model, grid, float(cfg["tol"]), int(cfg["max_sweeps"]))
        if rep.infeasible:
            raise NumericalFailure(f"case {case}: correction constraints infeasible")
        model.save(out / f"model_{case}.json")
        raw.save(out / f"uncorrected_{case}.csv")
        corr.save(out / f"corrected_{case}.csv")
        rep.save(out / f"report_{case}.json")
        raw_tab, cor_tab = raw.moment_table(MOMENT_ORDER), corr.moment_table(MOMENT_ORDER)
        rows = []
        for j in range(MOMENT_ORDER + 1):
            for i in range(MOMENT_ORDER + 1 - j):
                rows.append([i, j, _fmt(tgt_tab[j, i]), _fmt(raw_tab[j, i]), _fmt(cor_tab[j, i])])
        _write_csv(out / f"moments_{case}.csv", MOMENT_HEADER, rows)
        log.info("case %s: %d sweeps, max violation %.3g", case, rep.iterations, rep.max_violation)
    return EXIT_OK


def cmd_correct(cfg) -> int:
    src = GridDensity.load(_require(cfg, "input"))
    if src.grid.ndim != 2:
        raise ValueError("correct needs a bivariate density")
    rho = float(src.meta.get("rho", 0.0))
    model = ExpansionModel(int(cfg["n_max"]), rho, basis=str(src.meta.get("basis", "rotation")))
    ratio = src.ratio
    cons = [Normalization()]
    omega = src.weight_density * src.grid.weight
    for (n, i), e in basis_values(model, src.grid).items():
        cons.append(MomentMatch(e, float(np.sum(omega * ratio * e)), degree=n, label=f"m{n}{i}"))
    cons.append(NonNegativity())
    phi, rep = dykstra(ratio, cons, src.weight_density, src.grid, float(cfg["tol"]), int(cfg["max_sweeps"]))
    if rep.infeasible:
        raise NumericalFailure("correction constraints infeasible")
    target = Path(cfg["output"]) if cfg["output"] else _out_dir(cfg) / "corrected.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    meta = {k: v for k, v in src.meta.items() if k != "negative"}
    GridDensity(src.grid, phi, src.weight_density, "ratio", meta).save(target)
    rep.save(target.with_name(target.stem + "_report.json"))
    return EXIT_OK


def _market(cfg):
    xz, yz = _load_pillars(cfg, "xz"), _load_pillars(cfg, "yz")
    return xz, yz


def cmd_calibrate(cfg) -> int:
    out = _out_dir(cfg)
    xz, yz = _market(cfg)
    cross = _load_pillars(cfg, "cross")
    date = cfg["date"] or _default_date(cross)
    tenors = [cfg["tenor"]] if cfg["tenor"] else _tenors(cross, date)
    if not tenors:
        raise MissingData(f"no cross pillars on {date}")
    families = _csv_list(cfg["families"])
    for f in families:
        if f not in ALL_FAMILIES:
            raise ValueError(f"unknown family {f!r}")
    tables, details = [], []
    for tenor in tenors:
        target = _pick(cross, date, tenor, "cross")
        cx = build_curve(_pick(xz, date, tenor, "X/Z"))
        cy = build_curve(_pick(yz, date, tenor, "Y/Z"))
        results: dict[str, CalibrationResult] = {}
        for fam in families:
            res = calibrate_smile(target, cx, cy, fam)
            if not math.isfinite(res.objective):
                raise NumericalFailure(f"{fam} {tenor}: calibration produced no finite objective")
            results[fam] = res
            details.append({"date": date, "tenor": tenor, **res.to_json()})
            log.info("%s %s %s rmse=%.3g", date, tenor, fam, res.rmse)
        tables.append(params_table_json(date, tenor, results))
    save_params_json(out / "params.json", tables)
    _dump_json(out / "calibration.json", details)
    return EXIT_OK


def _setup_for(cfg, xz, yz, date, tenor, family) -> CrossSetup:
    cx = build_curve(_pick(xz, date, tenor, "X/Z"))
    cy = build_curve(_pick(yz, date, tenor, "Y/Z"))
    if cfg["theta"] is not None and family != "hermite":
        params = {"theta": float(cfg["theta"])}
    else:
        params = _family_params(_load_params(cfg, date, tenor), family)
    return CrossSetup(cx, cy, make_copula(family, params))


def cmd_price(cfg) -> int:
    out = _out_dir(cfg)
    xz, yz = _market(cfg)
    date = cfg["date"] or _default_date(xz)
    tenor = cfg["tenor"] or _tenors(xz, date)[0]
    family = str(cfg["family"]).lower()
    setup = _setup_for(cfg, xz, yz, date, tenor, family)
    pricer = CrossPricer(setup)
    pillars = pricer.smile_pillars()
    pillars = SmilePillars(pillars.T, pillars.F, pillars.D_dom, *pillars.vols, D_for=pillars.D_for,
                           date=date, pair=pillars.pair, tenor=tenor)
    write_pillars_csv(out / "cross_pillars.csv", [pillars])
    n = int(cfg["strikes"])
    if n < 1:
        raise ValueError("strikes must be at least 1")
    sd = pillars.atm * math.sqrt(pillars.T)
    width = float(cfg["width"])
    zs = np.linspace(-width, width, n) if n > 1 else np.zeros(1)
    rows = []
    for z in zs:
        K = pricer.forward * math.exp(z * sd)
        rows.append([_fmt(K), _fmt(pricer.implied_vol(K)), _fmt(pricer.call(K)), _fmt(pricer.put(K))])
    _write_csv(out / "cross_smile.csv", SMILE_HEADER, rows)
    _dump_json(out / "price_summary.json", {
        "date": date, "tenor": tenor, "family": family, "path": pricer.path,
        "forward": pricer.forward, "forward_consistency": forward_consistency(setup, pricer),
        "fixed_point_converged": pricer.fixed_point_converged})
    return EXIT_OK


def cmd_backtest(cfg) -> int:
    out = _out_dir(cfg)
    xz, yz = _market(cfg)
    cross = _load_pillars(cfg, "cross")
    family = str(cfg["family"]).lower()
    if family not in ALL_FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    tenor = cfg["tenor"] or (cross[0].tenor if cross else None)
    dates = sorted({r.date for r in xz if r.tenor == tenor})
    if not dates:
        raise MissingData("no straight-pair pillars")
    month_end = cfg["month_end"] or dates[0]

    def day(date, need_cross):
        c = [r for r in cross if r.date == date and r.tenor == tenor]
        if need_cross and not c:
            raise MissingData(f"month-end cross smile for {date} {tenor} is missing")
        return MarketDay(date, _pick(xz, date, tenor, "X/Z"), _pick(yz, date, tenor, "Y/Z"), c[-1] if c else None)

    end = day(month_end, True)
    days = []
    for d in dates:
        if d <= month_end:
            continue
        try:
            days.append(day(d, False))
        except MissingData as exc:
            log.warning("%s: %s, day skipped", d, exc)
    fitted = None
    if cfg["params"]:
        params = _family_params(_load_params(cfg, month_end, tenor), family)
        cx, cy = end.curves()
        fitted = CalibrationResult(family, params, math.nan, np.full(5, np.nan), 0, True)
        fitted.model = model_pillars(family, params, cx, cy)
    rows = []
    for setting in _csv_list(cfg["settings"]):
        rep = backtest(end, days, setting, family, fitted)
        fitted = rep.month_end
        rows.extend(r.to_row() for r in rep.rows)
    _write_csv(out / "backtest.csv", REPORT_HEADER, rows)
    save_params_json(out / "params.json", [params_table_json(month_end, tenor, {family: fitted})])
    return EXIT_OK


def cmd_param_sweep(cfg) -> int:
    out = _out_dir(cfg)
    xz, yz = _market(cfg)
    date = cfg["date"] or _default_date(xz)
    tenor = cfg["tenor"] or _tenors(xz, date)[0]
    base = _family_params(_load_params(cfg, date, tenor), "hermite")
    cx = build_curve(_pick(xz, date, tenor, "X/Z"))
    cy = build_curve(_pick(yz, date, tenor, "Y/Z"))
    width, npts = float(cfg["width"]), int(cfg["points"])
    if width < 0 or npts < 1:
        raise ValueError("width must be non-negative and points positive")
    shifts = np.zeros(1) if width == 0 else np.linspace(-width, width, max(npts, 2))
    rows = []
    for name in _csv_list(cfg["parameters"]):
        if name not in HERMITE_PARAMS:
            raise ValueError(f"unknown parameter {name!r}")
        for h in shifts:
            p = dict(base)
            p[name] = base[name] + float(h)
            if name == "rho" and not -1 < p[name] < 1:
                continue
            try:
                atm = CrossPricer(CrossSetup(cx, cy, make_copula("hermite", p))).smile_pillars().atm
            except ValueError as exc:
                log.warning("%s shift %g: %s, point skipped", name, h, exc)
                continue
            rows.append([name, _fmt(h), _fmt(p[name]), _fmt(atm)])
    _write_csv(out / "sweep.csv", SWEEP_HEADER, rows)
    return EXIT_OK


COMMANDS = {
    "fit-density": cmd_fit_density,
    "correct": cmd_correct,
    "calibrate": cmd_calibrate,
    "price": cmd_price,
    "backtest": cmd_backtest,
    "param-sweep": cmd_param_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hermicop", description="Hermite-expansion copulas for FX cross smiles.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config")
        sp.add_argument("--out")
        return sp

    def grid_opts(sp):
        sp.add_argument("--n-max", type=int)
        sp.add_argument("--sections", type=int)
        sp.add_argument("--bound", type=float)
        sp.add_argument("--tol", type=float)
        sp.add_argument("--max-sweeps", type=int)

    def market(sp, cross=False):
        sp.add_argument("--xz", help="X/Z pillar CSV")
        sp.add_argument("--yz", help="Y/Z pillar CSV")
        if cross:
            sp.add_argument("--cross", help="X/Y pillar CSV")
        sp.add_argument("--date")
        sp.add_argument("--tenor")

    sp = common(sub.add_parser("fit-density", help="expand and correct a target density"))
    sp.add_argument("--family")
    sp.add_argument("--spearman", type=float)
    sp.add_argument("--input", help="target GridDensity CSV instead of a family")
    sp.add_argument("--cases", help="comma list of a (independent basis) and b (rotated basis)")
    grid_opts(sp)

    sp = common(sub.add_parser("correct", help="correct a raw GridDensity"))
    sp.add_argument("--input")
    sp.add_argument("--output")
    grid_opts(sp)

    sp = common(sub.add_parser("calibrate", help="fit copulas to cross smiles"))
    market(sp, cross=True)
    sp.add_argument("--families")

    sp = common(sub.add_parser("price", help="cross smile from straight smiles and a copula"))
    market(sp)
    sp.add_argument("--family")
    sp.add_argument("--theta", type=float)
    sp.add_argument("--params")
    sp.add_argument("--strikes", type=int)
    sp.add_argument("--width", type=float, help="strike range in ATM standard deviations")

    sp = common(sub.add_parser("backtest", help="monthly backtest, settings c and d"))
    market(sp, cross=True)
    sp.add_argument("--family")
    sp.add_argument("--params")
    sp.add_argument("--settings")
    sp.add_argument("--month-end")

    sp = common(sub.add_parser("param-sweep", help="ATM vol against single parameter shifts"))
    market(sp)
    sp.add_argument("--params")
    sp.add_argument("--width", type=float)
    sp.add_argument("--points", type=int)
    sp.add_argument("--parameters")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _merge(args)
        return COMMANDS[args.command](cfg)
    except MissingData as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
