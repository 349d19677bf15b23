import json

import pytest

from muse.cli import main
from muse.errors import GoldenSuiteError
from muse.golden import compare, load_cases, run_golden_suite


def test_cases_cover_every_criterion():
    covered = {c for case in load_cases() for c in case.get("criteria", [])}
    assert covered >= set(range(1, 11))


def test_corrupt_case_file(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(GoldenSuiteError):
        load_cases(tmp_path)


def test_empty_golden_dir(tmp_path):
    with pytest.raises(GoldenSuiteError):
        load_cases(tmp_path)


def test_unknown_case_name():
    with pytest.raises(GoldenSuiteError):
        run_golden_suite(cases=["no-such-case"])


def test_compare_rules():
    assert compare(1.0, {"value": 1.0})
    assert not compare(1.1, {"value": 1.0, "tol": 0.05})
    assert compare(1.1, {"value": 1.0, "tol": 0.05}, tol_override=0.2)
    assert compare(3, {"max": 3}) and not compare(4, {"max": 3})
    assert not compare(float("nan"), {"min": 0.0})
    assert compare(True, {"value": True}) and not compare(None, {"max": 1})


def test_exact_cases_pass_with_zero_tolerance():
    report = run_golden_suite(cases=["quadratic-exact", "infrastructure-exact"], tol_override=0.0)
    assert report["passed"], json.dumps(report, default=float)


def test_cli_golden_single_case(tmp_path, capsys):
    assert main(["golden", "--case", "quadratic-exact", "--report", str(tmp_path / "r.json")]) == 0
    assert "PASS quadratic-exact" in capsys.readouterr().out
    assert json.loads((tmp_path / "r.json").read_text())["passed"]
