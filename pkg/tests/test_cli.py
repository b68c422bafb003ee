import csv
import io
import subprocess
import sys

import numpy as np
import pytest
from scipy import stats

from ermasym.cli import (EXIT_NONCONVEX, EXIT_OK, EXIT_SOLVER, EXIT_USAGE, main, parse_sweep,
                         thread_cap, UsageError)


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    rows = list(csv.DictReader(io.StringIO(out))) if out else []
    return code, rows, err


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_predict_square_signed(capsys):
    code, rows, _ = run(["predict", "--model", "signed", "--loss", "square", "--delta", "3"], capsys)
    assert code == EXIT_OK
    assert abs(float(rows[0]["corr"]) - 0.8820255) < 1e-6
    assert rows[0]["uniqueness"] == "VerifiedClassConditions"
    assert max(abs(float(rows[0][k])) for k in ("res_mu", "res_alpha", "res_lambda")) < 1e-8


def test_predict_delta_near_one(capsys):
    code, rows, _ = run(["predict", "--loss", "square", "--delta", "1.0001"], capsys)
    assert code == EXIT_OK
    assert 0 < float(rows[0]["corr"]) < 0.05


def test_predict_hinge_separable_reports_na(capsys):
    code, rows, err = run(["predict", "--model", "signed", "--loss", "hinge", "--delta", "3"], capsys)
    assert code == EXIT_SOLVER
    assert rows[0]["corr"] == "NA"
    assert "Separable" in rows[0]["note"]
    assert "delta=3" in err


def test_predict_sweep_keeps_order(capsys, tmp_path):
    out = tmp_path / "p.csv"
    code, _, _ = run(["predict", "--model", "logistic", "--loss", "logistic", "--delta-sweep",
                      "3:9:4", "--threads", "4", "--out", str(out)], capsys)
    rows = read(out)
    assert code == EXIT_OK
    assert [r["delta"] for r in rows] == ["3", "5", "7", "9"]
    corr = [float(r["corr"]) for r in rows]
    assert corr == sorted(corr)


def test_bound_logistic(capsys):
    code, rows, _ = run(["bound", "--model", "logistic", "--delta", "5"], capsys)
    assert code == EXIT_OK
    r = rows[0]
    assert abs(float(r["ls_ratio"]) - 0.9972) < 2e-3
    assert float(r["stam_sigma2_lb"]) <= float(r["sigma_opt"]) ** 2
    assert r["sign_changes"] == "1"


def test_bound_signed_has_no_stam(capsys):
    code, rows, _ = run(["bound", "--delta-sweep", "2:9:8"], capsys)
    assert code == EXIT_OK
    assert [r["stam_sigma2_lb"] for r in rows] == ["NA"] * 8
    assert abs(float(rows[2]["corr_opt"]) - 0.9457) < 1e-3


def test_threshold(capsys):
    _, rows, _ = run(["threshold", "--model", "logistic"], capsys)
    assert abs(float(rows[0]["delta_star"]) - 2.275) < 0.01
    _, rows, _ = run(["threshold", "--model", "signed"], capsys)
    assert rows[0]["delta_star"] == "INF"
    code, rows, _ = run(["threshold", "--eps-sweep", "0.05:0.5:10"], capsys)
    vals = [float(r["delta_star"]) for r in rows]
    assert code == EXIT_OK and len(vals) == 10
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(2.0, abs=1e-6)


def test_optloss_then_simulate(capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, rows, _ = run(["optloss", "--model", "signed", "--delta", "4"], capsys)
    assert code == EXIT_OK
    r = rows[0]
    assert r["convexity"] == "ProvenSufficient"
    assert abs(float(r["corr_achieved"]) - 0.9457) < 1e-3
    assert abs(float(r["mu"]) - 1) < 1e-4 and abs(float(r["lambda"]) - 1) < 1e-4
    assert r["table"] == "optloss_signed_d4.csv"
    assert (tmp_path / "optloss_signed_d4.csv").exists()
    code, rows, _ = run(["simulate", "--model", "signed", "--loss-table", "optloss_signed_d4.csv",
                         "--n", "64", "--trials", "4", "--steps", "300", "--seed", "3"], capsys)
    assert code == EXIT_OK
    r = rows[0]
    assert r["delta"] == "4" and r["seed"] == "3" and r["steps"] == "300"
    assert abs(float(r["corr_mean"]) - float(r["pred_corr"])) < 0.05


def test_optloss_nonconvex_exit(capsys, tmp_path):
    w = np.linspace(-2.5, 2.5, 1024)
    p = 0.3 * stats.norm.pdf(w, -1, 0.2) + 0.7 * stats.norm.pdf(w, 1, 0.2)
    table = tmp_path / "bimodal.csv"
    np.savetxt(table, np.c_[w, p], delimiter=",", header="w,p", comments="")
    code, rows, _ = run(["optloss", "--model", "tabulated", "--model-table", str(table),
                         "--delta", "3", "--table-out", str(tmp_path / "t.csv")], capsys)
    assert code == EXIT_NONCONVEX
    assert rows[0]["convexity"] == "NonConvexDetected"
    assert rows[0]["corr_achieved"] == "NA"
    assert (tmp_path / "t.csv").exists()


@pytest.mark.parametrize("argv", [
    [],
    ["predict"],
    ["predict", "--loss", "square"],
    ["predict", "--loss", "square", "--delta", "1"],
    ["predict", "--loss", "square", "--delta", "2", "--delta-sweep", "2:3:2"],
    ["predict", "--loss", "square", "--loss-table", "x.csv", "--delta", "2"],
    ["predict", "--loss", "nope", "--delta", "2"],
    ["predict", "--model", "nope", "--loss", "square", "--delta", "2"],
    ["predict", "--loss", "square", "--delta", "2", "--eps", "0.7"],
    ["predict", "--loss", "square", "--delta-sweep", "2:3"],
    ["predict", "--loss", "square", "--delta-sweep", "0:3:4:log"],
    ["bound", "--delta", "x"],
    ["simulate", "--model", "gaussian-sy", "--loss", "square", "--delta", "3"],
    ["simulate", "--loss", "square", "--delta", "3", "--trials", "0"],
    ["threshold", "--eps-sweep", "0:0.5:3"],
    ["predict", "--loss", "square", "--delta", "2", "--emit-gnuplot", "x.gp"],
    ["frobnicate"],
], ids=lambda a: " ".join(a) or "empty")
def test_usage_errors(argv, capsys):
    code = main(argv)
    _, err = capsys.readouterr()
    assert code == EXIT_USAGE
    assert err.startswith("ermasym: error:")


def test_config_file_and_override(capsys, tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# comment\nmodel = logistic\nloss=square\ndelta = 5\n")
    _, rows, _ = run(["predict", "--config", str(conf)], capsys)
    assert rows[0]["model"] == "logistic" and rows[0]["delta"] == "5"
    _, rows, _ = run(["predict", "--config", str(conf), "--delta", "3"], capsys)
    assert rows[0]["delta"] == "3" and rows[0]["loss"] == "square"
    conf.write_text("colour=blue\n")
    assert main(["predict", "--config", str(conf)]) == EXIT_USAGE
    assert main(["predict", "--config", str(tmp_path / "missing.conf")]) == EXIT_USAGE
    capsys.readouterr()


def test_simulate_is_byte_identical(capsys, tmp_path):
    args = ["simulate", "--model", "probit", "--loss", "logistic", "--delta", "4", "--n", "48",
            "--trials", "5", "--steps", "200", "--seed", "17", "--no-predict"]
    main(args + ["--out", str(tmp_path / "a.csv"), "--threads", "1"])
    main(args + ["--out", str(tmp_path / "b.csv"), "--threads", "3"])
    capsys.readouterr()
    a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
    assert a == b
    assert read(tmp_path / "a.csv")[0]["pred_corr"] == "NA"


def test_gnuplot_emission(capsys, tmp_path):
    out, gp = tmp_path / "b.csv", tmp_path / "b.gp"
    code = main(["bound", "--delta-sweep", "2:4:3", "--out", str(out), "--emit-gnuplot", str(gp)])
    capsys.readouterr()
    assert code == EXIT_OK
    script = gp.read_text()
    assert str(out) in script and "corr_opt" in script and "separator ','" in script


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("ERMASYM_THREADS", raising=False)
    assert thread_cap(None) is None and thread_cap(6) == 6
    monkeypatch.setenv("ERMASYM_THREADS", "2")
    assert thread_cap(None) == 2 and thread_cap(6) == 2 and thread_cap(1) == 1
    monkeypatch.setenv("ERMASYM_THREADS", "many")
    with pytest.raises(UsageError):
        thread_cap(None)
    assert main(["bound", "--delta", "3"]) == EXIT_USAGE


def test_parse_sweep():
    assert parse_sweep("1:3:3") == [1.0, 2.0, 3.0]
    assert parse_sweep("1:100:3:log") == pytest.approx([1, 10, 100])
    with pytest.raises(UsageError):
        parse_sweep("1:2:0")


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "ermasym", "threshold", "--model", "noisysigned",
                          "--eps", "0.5"], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0
    assert res.stdout.splitlines() == ["model,eps,delta_star", "noisysigned(eps=0.5),0.5,2"]
