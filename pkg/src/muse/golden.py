"""Golden regression suite.

Each case file in ``golden/v1`` names either a built-in check or a CLI
command plus config, and lists expected metrics with their own
tolerance annotations:

    {"max": v}            actual <= v
    {"min": v}            actual >= v
    {"value": v, "tol": t}  |actual - v| <= t (booleans/strings compare equal)

CLI configs may use ``{workdir}`` to refer to outputs of earlier cases;
cases run in file-name order.
"""
from __future__ import annotations

import json
import math
import tempfile
from pathlib import Path

import numpy as np

from . import checks
from .config import parse_config_text
from .errors import GoldenSuiteError
from .experiments import ModelCache
from .solvers import read_trace_csv

GOLDEN_DIR = Path(__file__).parent / "golden" / "v1"

CHECKS = {
    "descent": lambda cache: checks.check_descent(cache),
    "quadratic": lambda cache: checks.check_quadratic(),
    "regime": lambda cache: checks.check_regime(cache),
    "conservative": lambda cache: checks.check_conservative(cache),
    "gradients": lambda cache: checks.check_gradients(),
    "field": lambda cache: checks.check_field(cache),
    "muse": lambda cache: checks.check_muse(),
    "denoise": lambda cache: checks.check_denoise(cache),
    "infrastructure": lambda cache: checks.check_infrastructure(),
}


def load_cases(golden_dir=None) -> list:
    d = Path(golden_dir) if golden_dir else GOLDEN_DIR
    files = sorted(d.glob("*.json"))
    if not files:
        raise GoldenSuiteError(f"no golden case files in {d}")
    cases = []
    for f in files:
        try:
            case = json.loads(f.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise GoldenSuiteError(f"{f.name}: {exc}") from exc
        if not isinstance(case, dict) or "name" not in case or not isinstance(case.get("metrics"), dict):
            raise GoldenSuiteError(f"{f.name}: a case needs 'name' and a 'metrics' object")
        if case.get("kind") == "check" and case.get("check") not in CHECKS:
            raise GoldenSuiteError(f"{f.name}: unknown check {case.get('check')!r}")
        if case.get("kind") == "cli" and not (d / case.get("config", "")).is_file():
            raise GoldenSuiteError(f"{f.name}: missing config file {case.get('config')!r}")
        if case.get("kind") not in ("check", "cli"):
            raise GoldenSuiteError(f"{f.name}: kind must be 'check' or 'cli'")
        case["_dir"] = d
        cases.append(case)
    return cases


def compare(actual, spec: dict, tol_override=None) -> bool:
    if actual is None:
        return False
    if "value" in spec:
        expected = spec["value"]
        if isinstance(expected, (bool, str)) or isinstance(actual, (bool, str)):
            return actual == expected
        tol = spec.get("tol", 0.0) if tol_override is None else tol_override
        return abs(float(actual) - float(expected)) <= tol
    ok = True
    if "max" in spec:
        ok &= float(actual) <= spec["max"]
    if "min" in spec:
        ok &= float(actual) >= spec["min"]
    return bool(ok) and not (isinstance(actual, float) and math.isnan(actual))


def _trace_metrics(outputs) -> dict:
    worst, finite = -np.inf, True
    for o in outputs:
        if not str(o).endswith(".csv") or "trace" not in Path(o).name:
            continue
        tr = read_trace_csv(o)
        if "f_map" not in tr:
            continue
        f = tr["f_map"]
        finite &= bool(np.all(np.isfinite(f)))
        if len(f) > 1:
            # 9 significant digits in the CSV bound what can be resolved
            worst = max(worst, float(np.max((f[1:] - f[:-1]) / np.abs(f[:-1]))))
    return {"trace_max_rel_increase": worst, "trace_finite": finite}


def run_case(case: dict, workdir: Path, cache: ModelCache) -> dict:
    if case["kind"] == "check":
        return CHECKS[case["check"]](cache)
    from .cli import run_command

    text = (case["_dir"] / case["config"]).read_text().replace("{workdir}", str(workdir))
    raw = parse_config_text(text)
    raw["out"] = str(workdir / case["name"])
    summary = run_command(case["command"], raw, case["_dir"])
    metrics = dict(summary["metrics"])
    metrics.update(_trace_metrics(summary["outputs"]))
    for k, v in list(metrics.items()):
        if isinstance(v, list) and v and all(isinstance(e, (int, float)) for e in v):
            metrics[k + "_max"] = max(v)
            metrics[k + "_min"] = min(v)
    return metrics


def run_golden_suite(golden_dir=None, workdir=None, cases=None, cache: ModelCache | None = None,
                     tol_override=None) -> dict:
    """Run every golden case; returns ``{"passed", "cases": [...]}``.

    ``cases`` optionally restricts the run to the named cases.
    ``tol_override`` replaces every ``tol`` annotation (e.g. 0 for a
    bit-exactness probe).
    """
    all_cases = load_cases(golden_dir)
    if cases:
        unknown = set(cases) - {c["name"] for c in all_cases}
        if unknown:
            raise GoldenSuiteError(f"unknown golden cases {sorted(unknown)}")
        all_cases = [c for c in all_cases if c["name"] in cases]
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory()
        workdir = tmp.name
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cache = cache or ModelCache(workdir / "models")
    results = []
    try:
        for case in all_cases:
            metrics = run_case(case, workdir, cache)
            rows = {}
            for name, spec in case["metrics"].items():
                actual = metrics.get(name)
                rows[name] = {"actual": actual, "expected": spec, "passed": compare(actual, spec, tol_override)}
            results.append({
                "name": case["name"],
                "criteria": case.get("criteria", []),
                "passed": all(r["passed"] for r in rows.values()),
                "metrics": rows,
            })
    finally:
        if tmp is not None:
            tmp.cleanup()
    return {"passed": all(r["passed"] for r in results), "cases": results}
