import csv
import json

import numpy as np
import pytest

from pnrcal.cli import (
    EXIT_CONFIG,
    EXIT_FIT,
    EXIT_OK,
    EXIT_UNINFORMATIVE,
    main,
)
from pnrcal.histogram import build_histogram, save_histogram_csv
from pnrcal.reports import strip_timestamps

TABLE_COUNTS = """\
[herald]
xi = 0.98794
u_xi = 7e-5

[counts]
on = 5.069e6 5.0200e4 118
on_u = 1.4e4 200 6
off = 5.103e6 1.4600e4 23.9
off_u = 1.4e4 150 1.5
"""

EXPERIMENT = """\
[experiment]
gamma_true = 0.3
xi_true = 0.95
herald_prob = 0.8
background_mean = 0.3
peak_centers = 0.0 1.0 2.0 3.0
peak_widths = 0.08 0.08 0.08 0.08
n_pulses = 120000
seed = 4242
"""


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestSimulate:
    def test_writes_run(self, tmp_path, capsys):
        cfg = write(tmp_path, "exp.ini", EXPERIMENT)
        out = tmp_path / "run"
        assert main(["simulate", cfg, "--out", str(out)]) == EXIT_OK
        assert (out / "on.csv").is_file()
        assert (out / "off.csv").is_file()
        truth = json.loads((out / "truth.json").read_text())
        assert truth["config"]["seed"] == 4242
        stdout = capsys.readouterr().out
        assert "heralds=" in stdout

    def test_seed_override(self, tmp_path):
        cfg = write(tmp_path, "exp.ini", EXPERIMENT)
        out = tmp_path / "run"
        assert main(["simulate", cfg, "--seed", "7", "--out", str(out)]) == EXIT_OK
        truth = json.loads((out / "truth.json").read_text())
        assert truth["config"]["seed"] == 7

    def test_missing_field_exit_2(self, tmp_path, capsys):
        broken = EXPERIMENT.replace("seed = 4242\n", "")
        cfg = write(tmp_path, "exp.ini", broken)
        assert main(["simulate", cfg, "--out", str(tmp_path / "x")]) == EXIT_CONFIG
        assert "seed" in capsys.readouterr().err

    def test_pileup_exit_2(self, tmp_path, capsys):
        cfg = write(tmp_path, "exp.ini", EXPERIMENT + "rep_period_us = 5.0\n")
        assert main(["simulate", cfg, "--out", str(tmp_path / "x")]) == EXIT_CONFIG
        assert "pile-up" in capsys.readouterr().err


class TestFit:
    def test_fit_histogram(self, tmp_path, capsys):
        rng = np.random.default_rng(1)
        samples = np.concatenate(
            [rng.normal(0.0, 0.08, 100_000), rng.normal(1.0, 0.09, 2_000)]
        )
        hist = build_histogram(samples, 160, (-0.5, 1.5))
        path = tmp_path / "hist.csv"
        save_histogram_csv(hist, path)
        assert main(["fit", str(path), "--peaks", "2",
                     "--out", str(tmp_path)]) == EXIT_OK
        doc = json.loads((tmp_path / "fit.json").read_text())
        assert len(doc["peaks"]) == 2
        assert abs(doc["counts"][0] - 100_000) < 5 * np.sqrt(100_000)
        assert doc["quality"]["ratio"] < 1e-2

    def test_missing_file_exit_2(self, tmp_path):
        assert main(["fit", str(tmp_path / "nope.csv")]) == EXIT_CONFIG

    def test_impossible_peaks_exit_3(self, tmp_path):
        rng = np.random.default_rng(2)
        hist = build_histogram(rng.normal(0.0, 0.08, 50_000), 120, (-0.5, 0.5))
        path = tmp_path / "hist.csv"
        save_histogram_csv(hist, path)
        code = main(["fit", str(path), "--peaks", "5", "--out", str(tmp_path)])
        assert code in (EXIT_CONFIG, EXIT_FIT)
        assert code != EXIT_OK


class TestCalibrateBypass:
    def test_table_values(self, tmp_path, capsys):
        cfg = write(tmp_path, "cal.ini", TABLE_COUNTS)
        out = tmp_path / "rep"
        code = main(["calibrate", cfg, "--bypass-fit", "--out", str(out)])
        assert code == EXIT_OK
        stdout = capsys.readouterr().out
        assert "gamma0 = (0.708 +/- 0.006) %" in stdout
        assert "weighted_mean" in stdout
        doc = json.loads((out / "calibration.json").read_text())
        assert abs(doc["estimates"]["gamma0"]["fraction"] * 100 - 0.7077) < 1e-3
        assert (out / "budget.csv").is_file()

    def test_identical_counts_flagged_zero(self, tmp_path, capsys):
        text = TABLE_COUNTS.replace(
            "on = 5.069e6 5.0200e4 118", "on = 5.103e6 1.4600e4 23.9"
        ).replace("on_u = 1.4e4 200 6", "on_u = 1.4e4 150 1.5")
        cfg = write(tmp_path, "cal.ini", text)
        assert main(["calibrate", cfg, "--bypass-fit",
                     "--out", str(tmp_path / "rep")]) == EXIT_OK
        doc = json.loads((tmp_path / "rep" / "calibration.json").read_text())
        for e in doc["estimates"].values():
            assert abs(e["fraction"]) < 1e-12

    def test_uninformative_bin_exit_4(self, tmp_path, capsys):
        text = TABLE_COUNTS.replace(
            "off = 5.103e6 1.4600e4 23.9", "off = 0.5 0.5 0"
        ).replace("off_u = 1.4e4 150 1.5", "off_u = 0 0 0")
        cfg = write(tmp_path, "cal.ini", text)
        code = main(["calibrate", cfg, "--bypass-fit",
                     "--out", str(tmp_path / "rep")])
        assert code == EXIT_UNINFORMATIVE
        assert "uninformative" in capsys.readouterr().err

    def test_missing_counts_exit_2(self, tmp_path):
        cfg = write(tmp_path, "cal.ini", "[herald]\nxi = 0.9\n")
        assert main(["calibrate", cfg, "--bypass-fit",
                     "--out", str(tmp_path / "rep")]) == EXIT_CONFIG

    def test_both_xi_and_counts_exit_2(self, tmp_path):
        text = TABLE_COUNTS.replace("[herald]\n", "[herald]\nn_on = 10\nn_off = 1\n")
        cfg = write(tmp_path, "cal.ini", text)
        assert main(["calibrate", cfg, "--bypass-fit",
                     "--out", str(tmp_path / "rep")]) == EXIT_CONFIG

    def test_determinism_modulo_timestamp(self, tmp_path):
        cfg = write(tmp_path, "cal.ini", TABLE_COUNTS)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["calibrate", cfg, "--bypass-fit", "--out", str(out1)]) == EXIT_OK
        assert main(["calibrate", cfg, "--bypass-fit", "--out", str(out2)]) == EXIT_OK
        d1 = strip_timestamps(json.loads((out1 / "calibration.json").read_text()))
        d2 = strip_timestamps(json.loads((out2 / "calibration.json").read_text()))
        assert json.dumps(d1, sort_keys=True) == json.dumps(d2, sort_keys=True)
        assert (out1 / "budget.csv").read_bytes() == (out2 / "budget.csv").read_bytes()

    def test_covariance_flag_changes_combined(self, tmp_path):
        cfg = write(tmp_path, "cal.ini", TABLE_COUNTS)
        names = ["C_on_0", "C_on_1", "C_on_2", "C_off_0", "C_off_1", "C_off_2", "xi"]
        u = [1.4e4, 200.0, 6.0, 1.4e4, 150.0, 1.5, 7e-5]
        cov = np.diag(np.array(u) ** 2)
        # correlate the two pedestal counts (shared pump-power drift)
        cov[0, 3] = cov[3, 0] = 0.9 * u[0] * u[3]
        cov_path = tmp_path / "cov.csv"
        with open(cov_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity"] + names)
            for name, row in zip(names, cov):
                w.writerow([name] + [repr(float(v)) for v in row])
        out_d = tmp_path / "diag"
        out_c = tmp_path / "corr"
        assert main(["calibrate", cfg, "--bypass-fit", "--out", str(out_d)]) == EXIT_OK
        assert main(["calibrate", cfg, "--bypass-fit", "--covariance",
                     str(cov_path), "--out", str(out_c)]) == EXIT_OK
        d = json.loads((out_d / "calibration.json").read_text())
        c = json.loads((out_c / "calibration.json").read_text())
        ud = d["estimates"]["gamma0"]["u_fraction"]
        uc = c["estimates"]["gamma0"]["u_fraction"]
        assert uc != pytest.approx(ud, rel=1e-6)


class TestCalibrateEndToEnd:
    def test_simulate_then_calibrate(self, tmp_path, capsys):
        exp = write(tmp_path, "exp.ini", EXPERIMENT)
        run = tmp_path / "run"
        assert main(["simulate", exp, "--out", str(run)]) == EXIT_OK
        cal = write(
            tmp_path,
            "cal.ini",
            "[herald]\nxi = 0.95\nu_xi = 1e-4\n\n"
            "[inputs]\n"
            f"on_amplitudes = {run / 'on.csv'}\n"
            f"off_amplitudes = {run / 'off.csv'}\n\n"
            "[fit]\nn_peaks = 4\nbins = 150\n",
        )
        out = tmp_path / "rep"
        assert main(["calibrate", cal, "--out", str(out)]) == EXIT_OK
        doc = json.loads((out / "calibration.json").read_text())
        g0 = doc["estimates"]["gamma0"]
        assert abs(g0["fraction"] - 0.3) < 4 * g0["u_fraction"]
        assert doc["fit_quality"]["on"]["ratio"] < 1e-2

    def test_missing_input_file_exit_2(self, tmp_path):
        cal = write(
            tmp_path,
            "cal.ini",
            "[herald]\nxi = 0.95\n\n[inputs]\n"
            f"on_amplitudes = {tmp_path / 'missing.csv'}\n"
            f"off_amplitudes = {tmp_path / 'missing.csv'}\n",
        )
        assert main(["calibrate", cal, "--out", str(tmp_path / "rep")]) == EXIT_CONFIG


class TestBudget:
    def test_budget_outputs(self, tmp_path, capsys):
        cfg = write(tmp_path, "cal.ini", TABLE_COUNTS)
        out = tmp_path / "bud"
        assert main(["budget", cfg, "--bypass-fit", "--out", str(out)]) == EXIT_OK
        doc = json.loads((out / "budget.json").read_text())
        assert "gamma0" in doc["budgets"]
        with open(out / "budget.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] == "quantity"
        assert any(r[0] == "xi" for r in rows)


class TestClosure:
    def test_small_closure(self, tmp_path, capsys):
        small = EXPERIMENT.replace("n_pulses = 120000", "n_pulses = 40000")
        cfg = write(tmp_path, "exp.ini", small)
        out = tmp_path / "clo"
        code = main(["closure", cfg, "--seeds", "3", "--bins", "120",
                     "--jobs", "1", "--out", str(out)])
        assert code == EXIT_OK
        doc = json.loads((out / "closure.json").read_text())
        assert doc["n_completed"] == 3
        assert "gamma0" in doc["estimators"]
        assert (out / "closure.txt").read_text().startswith("closure:")

    def test_one_seed_exit_2(self, tmp_path):
        cfg = write(tmp_path, "exp.ini", EXPERIMENT)
        assert main(["closure", cfg, "--seeds", "1",
                     "--out", str(tmp_path / "c")]) == EXIT_CONFIG
