from __future__ import annotations

import json
import math

import pytest

from gaugekit import cli
from gaugekit.errors import DataError

HAND_CSV = "unit,replicate,value\nA,1,1\nA,2,3\nB,1,5\nB,2,7\nC,1,3\nC,2,5\n"


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


# --- parsing ----------------------------------------------------------------

def test_parse_hand_file():
    d = cli.parse_study_text(HAND_CSV)
    assert d.unit_labels == ("A", "B", "C")
    assert d.values.tolist() == [[1, 3], [5, 7], [3, 5]]


def test_first_appearance_order():
    text = "unit,replicate,value\nZ,1,1\nA,1,2\nZ,2,3\nA,2,4\n"
    d = cli.parse_study_text(text)
    assert d.unit_labels == ("Z", "A") and d.values.tolist() == [[1, 3], [2, 4]]


@pytest.mark.parametrize("text,needle", [
    ("", "empty"),
    ("part,rep,value\nA,1,1\n", "header"),
    ("unit,replicate,value\nA,1,1\nA,2,2\nB,1,3\n", "'B'"),
    ("unit,replicate,value\nA,1,1\nA,1,2\n", "row 3"),
    ("unit,replicate,value\nA,1,x\n", "row 2"),
    ("unit,replicate,value\nA,1,nan\n", "not finite"),
    ("unit,replicate,value\nA,1\n", "3 fields"),
])
def test_parse_errors(text, needle):
    with pytest.raises(DataError) as info:
        cli.parse_study_text(text)
    assert needle in str(info.value)


def test_digest_is_canonical():
    d1 = cli.parse_study_text(HAND_CSV)
    d2 = cli.parse_study_text(HAND_CSV.replace(",1\n", ",1.0\n"))
    assert cli.data_digest(d1) == cli.data_digest(d2)


# --- analyze ----------------------------------------------------------------

def test_analyze_hand(tmp_path, capsys):
    path = write(tmp_path, "hand.csv", HAND_CSV)
    code, out, _ = run(["analyze", "--input", path, "--spec", "0,60", "--sigma0", "1", "--rho0", "1"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["anova"]["ms_u"] == 8.0 and rep["anova"]["ms_eps"] == 2.0
    assert rep["estimates"]["anova"]["rho"] == 1.5
    assert rep["estimates"]["nanova"]["rho"] == 1.5
    assert rep["estimates"]["mle"]["rho"] == pytest.approx(5 / 6)
    assert rep["estimates"]["anova"]["assessment"]["rr_pct"] == pytest.approx(100 / math.sqrt(2.5))
    assert rep["tests"]["unit_variance_zero"]["p_value"] == pytest.approx((3 / 11) ** 1.5)
    assert set(rep["tests"]) == {"unit_variance_zero", "error_variance_at_most", "rho_at_most"}
    iv = rep["intervals"]
    assert iv["rho"]["lower"] == 0.0 and iv["rho_raw"]["lower"] < 0
    assert iv["sigma2_u_chi"]["estimate_source"] == "mle"
    assert "ptr" in iv and rep["design_warnings"] == []


def test_negative_estimate_advisory(tmp_path, capsys):
    text = "unit,replicate,value\n" + "".join(
        f"{u},{j},{v}\n" for u, row in enumerate([[1, 5], [2, 4], [3, 3]]) for j, v in enumerate(row))
    path = write(tmp_path, "neg.csv", text)
    code, out, err = run(["analyze", "--input", path], capsys)
    assert code == 0 and "advisory" in err
    rep = json.loads(out)
    assert rep["estimates"]["anova"]["assessment"] is None
    assert rep["intervals"]["sigma2_u_log"]["status"] == "not_applicable"
    assert rep["intervals"]["sigma2_u_chi"]["status"] == "not_applicable"


def test_report_round_trip(tmp_path, capsys):
    path = write(tmp_path, "hand.csv", HAND_CSV)
    first = str(tmp_path / "r1.json")
    second = str(tmp_path / "r2.json")
    assert cli.main(["analyze", "--input", path, "--out", first]) == 0
    assert cli.main(["analyze", "--input", first, "--out", second]) == 0
    r1 = json.loads(open(first).read())
    r2 = json.loads(open(second).read())
    r1.pop("generated_at"), r2.pop("generated_at")
    assert r1 == r2


def test_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, "bad.csv", "unit,replicate,value\nA,1,1\nA,2,2\nB,1,3\n")
    code, _, err = run(["analyze", "--input", bad], capsys)
    assert code == 3 and "unbalanced" in err
    code, _, _ = run(["analyze", "--input", str(tmp_path / "missing.csv")], capsys)
    assert code == 3
    flat = write(tmp_path, "flat.csv", "unit,replicate,value\nA,1,2\nA,2,2\nB,1,2\nB,2,2\n")
    code, _, _ = run(["analyze", "--input", flat], capsys)
    assert code == 4
    with pytest.raises(SystemExit) as info:
        cli.main(["analyze", "--input", bad, "--alpha", "2"])
    assert info.value.code == 2


# --- simulate ---------------------------------------------------------------

def test_simulate_deterministic_across_workers(tmp_path, capsys):
    cfg = write(tmp_path, "cfg.json", json.dumps(
        {"plans": [[6, 4]], "scenarios": [[0.5, 1.0]], "n_reps": 20000, "alpha": [0.1, 0.05]}))
    outs = []
    for workers in ("1", "3"):
        d = tmp_path / f"w{workers}"
        code, _, _ = run(["simulate", "--config", cfg, "--study", "coverage", "--seed", "42",
                          "--workers", workers, "--out-dir", str(d)], capsys)
        assert code == 0
        outs.append(((d / "coverage_summary.csv").read_bytes(), (d / "coverage_summary.json").read_bytes()))
    assert outs[0] == outs[1]


def test_simulate_env_workers(tmp_path, capsys, monkeypatch):
    cfg = write(tmp_path, "cfg.json", json.dumps({"plans": [[5, 2]], "rho_grid": [1.0], "n_reps": 100}))
    monkeypatch.setenv("GAUGEKIT_WORKERS", "zero")
    code, _, err = run(["simulate", "--config", cfg, "--study", "negprob", "--seed", "1",
                        "--out-dir", str(tmp_path)], capsys)
    assert code == 2 and "GAUGEKIT_WORKERS" in err


def test_simulate_bad_config(tmp_path, capsys):
    cfg = write(tmp_path, "cfg.json", json.dumps({"a": 1, "alpha": 3, "extra": True}))
    code, _, err = run(["simulate", "--config", cfg, "--study", "coverage", "--seed", "1",
                        "--out-dir", str(tmp_path)], capsys)
    assert code == 2
    assert "extra" in err and "alpha" in err and "plans[0]" in err
    code, _, err = run(["simulate", "--config", write(tmp_path, "x.json", "{"), "--study", "coverage"], capsys)
    assert code == 2 and "invalid JSON" in err


def test_simulate_random_seed_is_reported(tmp_path, capsys):
    cfg = write(tmp_path, "cfg.json", json.dumps({"plans": [[5, 2]], "rho_grid": [1.0], "n_reps": 100}))
    code, _, err = run(["simulate", "--config", cfg, "--study", "negprob", "--out-dir", str(tmp_path)], capsys)
    assert code == 0 and err.startswith("seed: ")


# --- theory -----------------------------------------------------------------

def test_theory_csv(capsys):
    code, out, _ = run(["theory", "--quantity", "bias", "--plan", "10,3", "--rho-grid", "2,2,1"], capsys)
    assert code == 0
    lines = out.split("\r\n")
    assert lines[0] == "a,r,rho,quantity,method,value,status"
    anova = [ln for ln in lines if ",anova," in ln][0].split(",")
    assert float(anova[5]) == pytest.approx(12.962962962962962)


def test_theory_na_rows(capsys):
    code, out, _ = run(["theory", "--quantity", "se", "--plan", "4,2", "--rho-grid", "1,1,1"], capsys)
    assert code == 0 and "NA,NA:moment_undefined" in out


def test_theory_asymcov(capsys):
    code, out, _ = run(["theory", "--quantity", "asymcov", "--plan", "3,3", "--rho-grid", "0.5,0.5,1"], capsys)
    assert code == 0
    row = [ln for ln in out.split("\r\n") if "sigma22" in ln][0].split(",")
    assert float(row[5]) == pytest.approx(1.5)
