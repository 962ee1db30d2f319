from __future__ import annotations

import csv
import io
import json

import pytest

from conftest import DATA
from lossydc import cli


def _run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


# ---------------------------------------------------------------- solve

def test_solve_two_bus_dcpf_single_row(capsys):
    code, out, _ = _run(capsys, "solve", "--case", str(DATA / "two_bus.m"), "--methods", "dcpf")
    assert code == 0
    rows = _rows(out)
    assert len(rows) == 1
    assert rows[0]["method"] == "dcpf" and rows[0]["bus"] == "1"
    # 50 MW load on a unit-reactance line: -0.5 rad
    assert float(rows[0]["theta_deg"]) == pytest.approx(-28.64788975654116)


def test_solve_radial_reports_certificate(capsys):
    code, out, _ = _run(capsys, "solve", "--case", str(DATA / "radial4.m"), "--format", "json",
                        "--bound-iterations", "4")
    assert code == 0
    doc = json.loads(out)
    cert = doc["certificate"]
    for key in ("rho", "gamma", "beta_minus", "beta_plus", "contraction_c"):
        assert key in cert
    assert cert["feasible"]
    assert cert["beta_minus"] < cert["beta_plus"]
    assert [row["k"] for row in cert["error_bound"]] == [0, 1, 2, 3, 4]
    assert doc["methods"][0]["status"] == "converged"


def test_solve_meshed_ldcpf_psi_guard_exit_code(capsys):
    code, out, err = _run(capsys, "solve", "--case", str(DATA / "mesh3.m"), "--methods", "ldcpf",
                          "--lambda", "30", "--psi-guard", "fail", "--format", "json")
    assert code == cli.EXIT_PSI
    assert json.loads(out)["methods"][0]["status"] == "psi_out_of_range"


def test_solve_all_methods_on_meshed_fixture(capsys):
    code, out, _ = _run(capsys, "solve", "--case", str(DATA / "mesh3.m"), "--methods",
                        "dcpf,mdcpf,ldcpf,lmdcpf,nr,cnr")
    assert code == 0
    assert {r["method"] for r in _rows(out)} == {"dcpf", "mdcpf", "ldcpf", "lmdcpf", "nr", "cnr"}


def test_certify_refuses_meshed_case(capsys):
    code, _, err = _run(capsys, "solve", "--case", str(DATA / "mesh3.m"), "--certify")
    assert code == cli.EXIT_MODEL
    assert "radial" in err


def test_solve_divergence_exit_code(capsys):
    code, _, _ = _run(capsys, "solve", "--case", str(DATA / "mesh3.m"), "--methods", "nr", "--lambda", "30")
    assert code == cli.EXIT_DIVERGED


@pytest.mark.parametrize("name, code", [
    ("malformed.m", cli.EXIT_PARSE),
    ("does_not_exist.m", cli.EXIT_PARSE),
    ("capacitive.m", cli.EXIT_MODEL),
])
def test_error_exit_codes(capsys, name, code):
    got, _, err = _run(capsys, "solve", "--case", str(DATA / name))
    assert got == code
    assert err.startswith("error:")


def test_exit_codes_are_distinct():
    codes = [cli.EXIT_OK, cli.EXIT_FAILURE, cli.EXIT_PARSE, cli.EXIT_MODEL, cli.EXIT_PSI,
             cli.EXIT_DIVERGED, cli.EXIT_LINEAR]
    assert len(set(codes)) == len(codes)


def test_config_invariants(capsys):
    with pytest.raises(SystemExit):
        cli.main(["robustness", "--case", "case39", "--trials", "0"])
    with pytest.raises(SystemExit):
        cli.main(["robustness", "--case", "case39", "--phi", "-5"])
    with pytest.raises(SystemExit):
        cli.main(["solve", "--case", "case39", "--methods", ""])
    with pytest.raises(SystemExit):
        cli.main(["solve", "--case", "case39", "--methods", "gauss"])
    with pytest.raises(SystemExit):
        cli.main(["solve", "--case", "case39", "--lambda", "2", "--stress-fraction", "0.9"])


# ---------------------------------------------------------------- compare / table

def test_compare_schema_and_out_file(tmp_path, capsys):
    out = tmp_path / "trace.csv"
    code, stdout, _ = _run(capsys, "compare", "--case", str(DATA / "mesh3.m"), "--max-iter", "5",
                           "--out", str(out))
    assert code == 0 and stdout == ""
    text = out.read_text()
    assert text.splitlines()[0] == "method,k,theta_err_deg,psi_step,inj_residual,kvl_residual"
    rows = _rows(text)
    assert {r["method"] for r in rows} == {"dcpf", "mdcpf", "ldcpf", "lmdcpf", "nr", "cnr"}
    assert max(int(r["k"]) for r in rows) == 5
    # one-shot methods are repeated across every column so the trace is plot-ready
    assert sum(r["method"] == "dcpf" for r in rows) == 5


def test_table_schema(capsys):
    code, out, _ = _run(capsys, "table", "--case", "case39", "--k", "1,2,3")
    assert code == 0
    assert out.splitlines()[0] == "case,k,theta_err_deg"
    errs = [float(r["theta_err_deg"]) for r in _rows(out)]
    assert errs == sorted(errs, reverse=True)


def test_compare_is_byte_identical(capsys):
    argv = ("compare", "--case", str(DATA / "radial4.m"), "--max-iter", "8")
    assert _run(capsys, *argv)[1] == _run(capsys, *argv)[1]


def test_robustness_is_byte_identical(capsys):
    argv = ("robustness", "--case", str(DATA / "mesh3.m"), "--phi", "0,30", "--trials", "4", "--seed", "5")
    first = _run(capsys, *argv)
    assert first[0] == 0
    assert first[1] == _run(capsys, *argv)[1]
    assert first[1].splitlines()[0] == "phi_deg,method,success_rate"
    rows = _rows(first[1])
    assert all(float(r["success_rate"]) == 1.0 for r in rows if r["phi_deg"] == "0.0")


def test_json_output_has_loading_metadata(capsys):
    code, out, _ = _run(capsys, "table", "--case", "case39", "--k", "1", "--stress-fraction", "0.5",
                        "--format", "json")
    assert code == 0
    doc = json.loads(out)
    assert doc["lambda"] == pytest.approx(0.5 * doc["lambda_star"])
    assert "uniform scaling" in doc["loading_note"]


# ---------------------------------------------------------------- stress

def test_stress_two_bus(capsys, tmp_path):
    saved = tmp_path / "stressed.json"
    code, out, _ = _run(capsys, "stress", "--case", str(DATA / "two_bus.m"), "--stress-fraction", "0.9",
                        "--save-case", str(saved))
    assert code == 0
    row = _rows(out)[0]
    # 0.5 pu on a unit-susceptance lossless line: insolvable beyond lambda = 2
    assert float(row["lambda_star"]) == pytest.approx(2.0, abs=1e-3)
    assert row["nr_solvable"] == "True"
    assert saved.exists()
    code, _, _ = _run(capsys, "solve", "--case", str(saved), "--methods", "nr")
    assert code == 0


def test_stress_beyond_limit_reports_failure(capsys):
    code, out, _ = _run(capsys, "stress", "--case", str(DATA / "two_bus.m"), "--stress-fraction", "1.1")
    assert code == cli.EXIT_DIVERGED
    assert _rows(out)[0]["nr_solvable"] == "False"
