import json
import math
import subprocess
import sys

import numpy as np
import pytest

from hermicop.calibration import read_backtest_csv, synthetic_month
from hermicop.cli import main
from hermicop.crossfx import triangular_vol
from hermicop.quadrature import GridDensity
from hermicop.smile import SmilePillars, read_pillars_csv, write_pillars_csv

EURJPY_1Y_FIT = {"rho": 0.3661, "m3": -0.3535, "m4": 0.9641, "m5": 0.0827, "m6": -2.0537}
BP = 1e-3


def _write_market(path, month_end, days):
    everything = [month_end] + list(days)
    write_pillars_csv(path / "xz.csv", [d.xz for d in everything])
    write_pillars_csv(path / "yz.csv", [d.yz for d in everything])
    write_pillars_csv(path / "cross.csv", [d.cross for d in everything if d.cross is not None])
    return {k: str(path / f"{k}.csv") for k in ("xz", "yz", "cross")}


@pytest.fixture(scope="module")
def flat_market(tmp_path_factory):
    d = tmp_path_factory.mktemp("flat")
    xz = SmilePillars.flat(0.10, 1.0, F=1.1, date="2021-10-29", pair="EURUSD", tenor="1Y")
    yz = SmilePillars.flat(0.12, 1.0, F=0.009, date="2021-10-29", pair="JPYUSD", tenor="1Y")
    write_pillars_csv(d / "xz.csv", [xz])
    write_pillars_csv(d / "yz.csv", [yz])
    params = [{"date": "2021-10-29", "tenor": "1Y", "classical": {"gauss": 0.4}, "hermite": EURJPY_1Y_FIT}]
    (d / "params.json").write_text(json.dumps(params))
    return {"xz": str(d / "xz.csv"), "yz": str(d / "yz.csv"), "params": str(d / "params.json")}


@pytest.fixture(scope="module")
def gauss_world(tmp_path_factory):
    end, days = synthetic_month(n_days=4, rho_start=0.4, rho_end=0.4, family="gauss")
    return _write_market(tmp_path_factory.mktemp("gauss"), end, days)


@pytest.fixture(scope="module")
def clayton_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("clayton")
    assert main(["fit-density", "--family", "clayton", "--spearman", "0.6", "--out", str(out)]) == 0
    return out


def _moments(path):
    rows = np.genfromtxt(path, delimiter=",", names=True)
    return {(int(r["power_x1"]), int(r["power_x2"])): r for r in rows}


class TestFitDensity:
    def test_clayton_cross_moment(self, clayton_run):
        for case in "ab":
            tab = _moments(clayton_run / f"moments_{case}.csv")
            assert tab[(1, 1)]["target"] == pytest.approx(0.611, abs=5e-3)
            assert tab[(1, 1)]["corrected"] == pytest.approx(0.611, abs=5e-3)

    def test_outputs_round_trip(self, clayton_run):
        for case in "ab":
            raw = GridDensity.load(clayton_run / f"uncorrected_{case}.csv")
            corr = GridDensity.load(clayton_run / f"corrected_{case}.csv")
            assert raw.grid.shape == corr.grid.shape == (200, 200)
            assert corr.density.min() >= -1e-12
            assert corr.mass() == pytest.approx(1.0, abs=1e-8)
        tab = _moments(clayton_run / "moments_a.csv")
        assert len(tab) == 45  # total order <= 8

    def test_gauss_target_is_left_alone(self, tmp_path):
        assert main(["fit-density", "--family", "gauss", "--spearman", "0.5", "--out", str(tmp_path),
                     "--cases", "b"]) == 0
        raw = GridDensity.load(tmp_path / "uncorrected_b.csv")
        corr = GridDensity.load(tmp_path / "corrected_b.csv")
        np.testing.assert_allclose(corr.density, raw.density, atol=1e-6)

    def test_corrupt_input_names_row(self, clayton_run, tmp_path, capsys):
        src = clayton_run / "uncorrected_a.csv"
        lines = src.read_text().splitlines()
        lines[6] = lines[6].rsplit(",", 1)[0] + ",abc"
        bad = tmp_path / "bad.csv"
        bad.write_text("\n".join(lines) + "\n")
        bad.with_suffix(".json").write_text(src.with_suffix(".json").read_text())
        assert main(["fit-density", "--input", str(bad), "--out", str(tmp_path / "o")]) == 2
        assert "row 7" in capsys.readouterr().err

    def test_unknown_family(self, tmp_path):
        assert main(["fit-density", "--family", "student", "--out", str(tmp_path)]) == 2

    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"family": "clayton", "spearman": 0.3, "cases": "a", "sections": 100}))
        assert main(["fit-density", "--config", str(cfg), "--spearman", "0.6", "--out", str(tmp_path / "o")]) == 0
        side = json.loads((tmp_path / "o" / "target.json").read_text())
        assert side["spearman"] == 0.6
        assert side["grid"]["sections"] == [100, 100]

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"spearmann": 0.3}))
        assert main(["fit-density", "--config", str(cfg), "--out", str(tmp_path)]) == 2


class TestCorrect:
    def test_corrects_raw_expansion(self, clayton_run, tmp_path):
        out = tmp_path / "c.csv"
        assert main(["correct", "--input", str(clayton_run / "uncorrected_a.csv"), "--output", str(out)]) == 0
        corr = GridDensity.load(out)
        raw = GridDensity.load(clayton_run / "uncorrected_a.csv")
        assert raw.density.min() < 0
        assert corr.density.min() >= -1e-12
        assert corr.mass() == pytest.approx(1.0, abs=1e-8)
        assert corr.moment((1, 1)) == pytest.approx(raw.moment((1, 1)), abs=1e-6)

    def test_missing_input(self, tmp_path):
        assert main(["correct", "--input", str(tmp_path / "nope.csv")]) == 3


class TestPrice:
    def test_flat_gauss_atm(self, flat_market, tmp_path):
        assert main(["price", "--xz", flat_market["xz"], "--yz", flat_market["yz"], "--family", "gauss",
                     "--params", flat_market["params"], "--out", str(tmp_path)]) == 0
        (p,) = read_pillars_csv(tmp_path / "cross_pillars.csv")
        assert p.atm == pytest.approx(triangular_vol(0.10, 0.12, 0.4), abs=BP)
        smile = np.genfromtxt(tmp_path / "cross_smile.csv", delimiter=",", names=True)
        assert len(smile) == 41
        assert np.all(np.diff(smile["call"]) < 0)

    def test_theta_flag(self, flat_market, tmp_path):
        assert main(["price", "--xz", flat_market["xz"], "--yz", flat_market["yz"], "--family", "gauss",
                     "--theta", "0.0", "--out", str(tmp_path)]) == 0
        (p,) = read_pillars_csv(tmp_path / "cross_pillars.csv")
        assert p.atm == pytest.approx(triangular_vol(0.10, 0.12, 0.0), abs=BP)

    def test_byte_identical(self, flat_market, tmp_path):
        args = ["price", "--xz", flat_market["xz"], "--yz", flat_market["yz"], "--family", "hermite",
                "--params", flat_market["params"], "--strikes", "9"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        for name in ("cross_pillars.csv", "cross_smile.csv", "price_summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_market_file(self, flat_market, tmp_path):
        assert main(["price", "--xz", str(tmp_path / "none.csv"), "--yz", flat_market["yz"],
                     "--family", "gauss", "--theta", "0.3", "--out", str(tmp_path)]) == 3

    def test_corrupt_pillars(self, flat_market, tmp_path, capsys):
        bad = tmp_path / "xz.csv"
        text = open(flat_market["xz"]).read().splitlines()
        bad.write_text(text[0] + "\n" + text[1].replace("0.1", "x", 1) + "\n")
        assert main(["price", "--xz", str(bad), "--yz", flat_market["yz"], "--family", "gauss",
                     "--theta", "0.3", "--out", str(tmp_path)]) == 2
        assert "row 2" in capsys.readouterr().err


class TestBacktest:
    def test_gauss_world(self, gauss_world, tmp_path):
        args = ["backtest", *sum(([f"--{k}", v] for k, v in gauss_world.items()), []),
                "--family", "gauss", "--out", str(tmp_path)]
        assert main(args) == 0
        rows = read_backtest_csv(tmp_path / "backtest.csv")
        assert {r["setting"] for r in rows} == {"c", "d"}
        assert len(rows) == 8
        assert max(r["rmse"] for r in rows) < 0.02 * 1e-2
        params = json.loads((tmp_path / "params.json").read_text())
        assert params[0]["classical"]["gauss"] == pytest.approx(0.4, abs=1e-3)

    def test_missing_month_end(self, gauss_world, tmp_path):
        cross = read_pillars_csv(gauss_world["cross"])
        write_pillars_csv(tmp_path / "cross.csv", cross[1:])
        args = ["backtest", "--xz", gauss_world["xz"], "--yz", gauss_world["yz"], "--cross",
                str(tmp_path / "cross.csv"), "--family", "gauss", "--out", str(tmp_path)]
        assert main(args) == 3


class TestCalibrate:
    def test_families_and_params_json(self, gauss_world, tmp_path):
        args = ["calibrate", *sum(([f"--{k}", v] for k, v in gauss_world.items()), []),
                "--families", "gauss,clayton", "--date", "d00", "--out", str(tmp_path)]
        assert main(args) == 0
        (table,) = json.loads((tmp_path / "params.json").read_text())
        assert table["date"] == "d00" and table["tenor"] == "1Y"
        assert table["classical"]["gauss"] == pytest.approx(0.4, abs=1e-3)
        details = json.loads((tmp_path / "calibration.json").read_text())
        assert [d["family"] for d in details] == ["gauss", "clayton"]
        assert details[0]["objective"] < 1e-10

    def test_missing_date(self, gauss_world, tmp_path):
        args = ["calibrate", *sum(([f"--{k}", v] for k, v in gauss_world.items()), []),
                "--families", "gauss", "--date", "1999-01-01", "--out", str(tmp_path)]
        assert main(args) == 3


class TestParamSweep:
    def _sweep(self, market, tmp_path, *extra):
        assert main(["param-sweep", "--xz", market["xz"], "--yz", market["yz"], "--params", market["params"],
                     "--out", str(tmp_path), *extra]) == 0
        return np.genfromtxt(tmp_path / "sweep.csv", delimiter=",", names=True, dtype=None, encoding=None)

    def test_rho_sweep_decreasing(self, flat_market, tmp_path):
        rows = self._sweep(flat_market, tmp_path, "--parameters", "rho", "--width", "0.3", "--points", "7")
        assert len(rows) == 7
        assert np.all(np.diff(rows["atm"]) < 0)

    def test_zero_width_is_base_atm(self, flat_market, tmp_path):
        rows = np.atleast_1d(self._sweep(flat_market, tmp_path / "a", "--parameters", "rho", "--width", "0"))
        assert len(rows) == 1
        assert main(["price", "--xz", flat_market["xz"], "--yz", flat_market["yz"], "--family", "hermite",
                     "--params", flat_market["params"], "--strikes", "1", "--out", str(tmp_path / "b")]) == 0
        (p,) = read_pillars_csv(tmp_path / "b" / "cross_pillars.csv")
        assert float(rows["atm"][0]) == p.atm

    def test_m3_sweep_not_monotone(self, tmp_path):
        end, _ = synthetic_month(n_days=1)
        write_pillars_csv(tmp_path / "xz.csv", [end.xz])
        write_pillars_csv(tmp_path / "yz.csv", [end.yz])
        (tmp_path / "p.json").write_text(json.dumps({"date": end.date, "tenor": "1Y", "hermite": EURJPY_1Y_FIT}))
        market = {"xz": str(tmp_path / "xz.csv"), "yz": str(tmp_path / "yz.csv"), "params": str(tmp_path / "p.json")}
        rows = self._sweep(market, tmp_path / "o", "--parameters", "m3", "--width", "1", "--points", "11")
        slope = np.sign(np.diff(rows["atm"]))
        assert np.any(slope[1:] != slope[:-1])


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "hermicop.cli", "fit-density", "--family", "frank",
                          "--sections", "60", "--cases", "a", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    tab = _moments(tmp_path / "moments_a.csv")
    assert math.isfinite(tab[(1, 1)]["corrected"])
