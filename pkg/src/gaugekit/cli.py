"""Command-line interface: ``gaugekit analyze | simulate | theory``."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
import secrets
import sys
import tempfile
import warnings

from . import __version__
from . import inference as inf
from . import montecarlo as mc
from . import theory
from .anova import BalancedData, anova_table, covariance_check, f_statistic
from .errors import (
    EXIT_DATA,
    EXIT_OK,
    EXIT_USAGE,
    ConfigError,
    DataError,
    GaugeError,
    NotApplicableError,
)
from .estimators import Method, SpecLimits, assessment_params, estimate, rho_plugin

HEADER = ["unit", "replicate", "value"]
NEGATIVE_ADVISORY = (
    "The ANOVA estimate of the unit variance is negative. This may indicate that the "
    "variance component is not significantly different from zero; see the p-value of "
    "the test of H0: sigma2_u = 0."
)
CI_CHOICES = ("sigma2_eps", "ptr", "rho", "rr", "snr", "icc", "wald", "log", "chi")


# ---------------------------------------------------------------------------
# input
# ---------------------------------------------------------------------------

def parse_study_csv(path):
    """Read a long-format ``unit,replicate,value`` file into BalancedData.

    Units keep their first-appearance order; within a unit, values keep
    file order.
    """
    try:
        with open(path, newline="", encoding="utf-8-sig") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return parse_study_text(text)


def parse_study_text(text):
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty input: expected header 'unit,replicate,value'") from None
    if [h.strip() for h in header] != HEADER:
        raise DataError(f"header must be exactly 'unit,replicate,value', got {','.join(header)!r}")
    units = {}
    seen = set()
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise DataError(f"row {line}: expected 3 fields, got {len(row)}")
        unit, rep, raw = (c.strip() for c in row)
        try:
            value = float(raw)
        except ValueError:
            raise DataError(f"row {line}: value {raw!r} is not numeric") from None
        if not math.isfinite(value):
            raise DataError(f"row {line}: value {raw!r} is not finite")
        if (unit, rep) in seen:
            raise DataError(f"row {line}: duplicate measurement for unit {unit!r}, replicate {rep!r}")
        seen.add((unit, rep))
        units.setdefault(unit, []).append(value)
    if not units:
        raise DataError("no measurements found")
    counts = {u: len(v) for u, v in units.items()}
    r = max(counts.values())
    short = [u for u, c in counts.items() if c != r]
    if short:
        detail = ", ".join(f"{u}={c}" for u, c in counts.items())
        raise DataError(f"unbalanced design: unit(s) {', '.join(map(repr, short))} have fewer than "
                        f"{r} replicates (counts: {detail})")
    return BalancedData([units[u] for u in units], unit_labels=tuple(units))


def load_input(path):
    """CSV study file, or a previous JSON report whose embedded data are re-analyzed."""
    if str(path).lower().endswith(".json"):
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
            data = doc["input"]
            return BalancedData(data["values"], unit_labels=tuple(data["unit_labels"]))
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path} is not a gaugekit report with embedded input: {exc}") from exc
    return parse_study_csv(path)


def data_digest(data):
    """SHA-256 of the canonical long-format serialization of the measurements."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for i, row in enumerate(data.values.tolist()):
        label = data.unit_labels[i] if data.unit_labels else str(i)
        for j, v in enumerate(row):
            w.writerow([label, j, repr(float(v))])
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def atomic_write(path, text):
    """Write text to ``path`` via a temporary file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def build_report(data, alpha=0.05, methods=("anova", "nanova", "mle"), sigma0=None, rho0=None,
                 spec=None, ci_kinds=CI_CHOICES, ci_source="mle"):
    """Assemble the analysis report for one data set (a JSON-ready dict)."""
    table = anova_table(data)
    a, r = table.a, table.r
    report = {
        "input": {"a": a, "r": r, "unit_labels": list(data.unit_labels) or [str(i) for i in range(a)],
                  "values": data.values.tolist()},
        "options": {"alpha": alpha, "methods": list(methods), "sigma0": sigma0, "rho0": rho0,
                    "spec": None if spec is None else [spec.lower, spec.upper, spec.kappa],
                    "ci_kinds": list(ci_kinds), "ci_source": ci_source},
        "anova": table.to_dict(),
        "design_warnings": data.design_warnings(),
        "covariance_check": covariance_check(data).to_dict(),
        "advisories": [],
    }
    report["f_statistic"] = f_statistic(table)

    ests = {}
    report["estimates"] = {}
    for m in methods:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            est = estimate(table, m)
        for w in caught:
            report["advisories"].append(str(w.message))
        ests[est.method.value] = est
        rho = rho_plugin(table, method=est.method)
        entry = est.to_dict()
        entry["rho"] = rho
        if rho >= 0:
            sigma_eps = math.sqrt(est.sigma2_eps)
            entry["assessment"] = assessment_params(
                rho, spec, sigma_eps if spec is not None else None).to_dict()
        else:
            entry["assessment"] = None
        report["estimates"][est.method.value] = entry

    tests = {"unit_variance_zero": inf.test_unit_variance(table).to_dict()}
    if sigma0 is not None:
        tests["error_variance_at_most"] = inf.test_error_variance(table, sigma0=sigma0).to_dict()
    if rho0 is not None:
        tests["rho_at_most"] = inf.test_rho(table, rho0=rho0).to_dict()
    report["tests"] = tests

    anova_est = ests.get("anova") or estimate(table, Method.ANOVA)
    if anova_est.sigma2_u < 0:
        report["advisories"].append(
            NEGATIVE_ADVISORY + f" (p = {tests['unit_variance_zero']['p_value']:.6g})")

    intervals = {}
    rho_ci = inf.ci_rho(table, alpha=alpha) if {"rho", "rr", "snr", "icc"} & set(ci_kinds) else None
    for kind in ci_kinds:
        if kind == "sigma2_eps":
            intervals["sigma2_eps"] = inf.ci_sigma2_eps(table, alpha=alpha).to_dict()
        elif kind == "ptr":
            if spec is not None:
                intervals["ptr"] = inf.ci_ptr(table, alpha=alpha, spec=spec).to_dict()
        elif kind == "rho":
            intervals["rho"] = rho_ci.truncated().to_dict()
            intervals["rho_raw"] = rho_ci.to_dict()
        elif kind in ("rr", "snr", "icc"):
            intervals[kind] = inf.ci_derived(rho_ci, kind).to_dict()
        else:
            src = estimate(table, ci_source)
            key = f"sigma2_u_{kind}"
            try:
                ci = inf.ci_sigma2_u(src, a, r, alpha, kind)
                intervals[key] = {**ci.to_dict(), "estimate_source": src.method.value}
            except NotApplicableError as exc:
                intervals[key] = {"kind": key, "level": 1 - alpha, "status": "not_applicable",
                                  "reason": str(exc), "estimate_source": src.method.value}
    report["intervals"] = intervals

    report["provenance"] = {"data_sha256": data_digest(data), "tool": "gaugekit",
                            "version": __version__, "seed": None}
    body = _dumps(report)
    report["report_sha256"] = hashlib.sha256(body.encode()).hexdigest()
    report["generated_at"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return report


def _parse_spec(text):
    try:
        parts = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--spec expects LL,UL[,kappa], got {text!r}") from None
    if len(parts) not in (2, 3):
        raise argparse.ArgumentTypeError(f"--spec expects LL,UL[,kappa], got {text!r}")
    return parts


def _parse_kinds(text):
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    bad = [k for k in kinds if k not in CI_CHOICES]
    if bad or not kinds:
        raise argparse.ArgumentTypeError(
            f"unknown interval kind(s) {bad}; choose from {','.join(CI_CHOICES)}")
    return kinds


def _alpha(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"--alpha must lie in (0, 1), got {text}")
    return v


def cmd_analyze(args):
    data = load_input(args.input)
    spec = SpecLimits(*args.spec) if args.spec else None
    methods = ("anova", "nanova", "mle") if args.method == "all" else (Method.parse(args.method).value,)
    report = build_report(data, args.alpha, methods, args.sigma0, args.rho0, spec, args.ci_kinds,
                          Method.parse(args.ci_source).value)
    text = _dumps(report)
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    for msg in report["advisories"]:
        print(f"advisory: {msg}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _workers(value):
    if value is not None:
        return value
    env = os.environ.get("GAUGEKIT_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError([f"GAUGEKIT_WORKERS: expected an integer, got {env!r}"]) from None
        if n < 1:
            raise ConfigError([f"GAUGEKIT_WORKERS: must be >= 1, got {n}"])
        return n
    return 1


def cmd_simulate(args):
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError([f"--config: cannot read {args.config}: {exc.strerror or exc}"]) from exc
    except ValueError as exc:
        raise ConfigError([f"--config: invalid JSON: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: config must be a JSON object"])
    raw = dict(raw)
    if args.seed is not None:
        raw["master_seed"] = args.seed
    elif "master_seed" not in raw:
        raw["master_seed"] = secrets.randbits(64)
        print(f"seed: {raw['master_seed']}", file=sys.stderr)
    cfg = mc.validate_config(raw)
    summary = mc.run_study(args.study, cfg, _workers(args.workers))
    os.makedirs(args.out_dir, exist_ok=True)
    stem = os.path.join(args.out_dir, f"{args.study}_summary")
    atomic_write(stem + ".json", summary.to_json())
    atomic_write(stem + ".csv", summary.to_csv())
    print(f"wrote {stem}.json and {stem}.csv (seed {cfg.master_seed})", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# theory
# ---------------------------------------------------------------------------

def _parse_plans(text):
    plans = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            a, r = (int(x) for x in chunk.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"--plan expects a,r[;a,r...], got {text!r}") from None
        if a < 2 or r < 2:
            raise argparse.ArgumentTypeError(f"--plan needs a >= 2 and r >= 2, got ({a},{r})")
        plans.append((a, r))
    if not plans:
        raise argparse.ArgumentTypeError("--plan is empty")
    return plans


def _parse_grid(text):
    try:
        lo, hi, pts = text.split(",")
        lo, hi, pts = float(lo), float(hi), int(pts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--rho-grid expects min,max,points, got {text!r}") from None
    if not (0 < lo <= hi) or pts < 1:
        raise argparse.ArgumentTypeError(f"--rho-grid needs 0 < min <= max and points >= 1, got {text!r}")
    return lo, hi, pts


def theory_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["a", "r", "rho", "quantity", "method", "value", "status"])
    for a, r, rho, q, m, v, status in rows:
        w.writerow([a, r, format(rho, ".17g"), q, m, "NA" if v is None else format(v, ".17g"), status])
    return buf.getvalue()


def cmd_theory(args):
    rows = theory.theory_rows(args.plan, theory.rho_grid(*args.rho_grid), args.quantity, args.sigma2_eps)
    text = theory_csv(rows)
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="gaugekit", description="Gauge R&R analysis for the balanced one-way random-effects model.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="analyze a gauge study file")
    pa.add_argument("--input", required=True, help="CSV with header unit,replicate,value (or a previous JSON report)")
    pa.add_argument("--alpha", type=_alpha, default=0.05)
    pa.add_argument("--method", default="all", choices=["anova", "nanova", "reml", "mle", "all"])
    pa.add_argument("--sigma0", type=float, help="threshold for H0: sigma_eps <= sigma0")
    pa.add_argument("--rho0", type=float, help="threshold for H0: rho <= rho0")
    pa.add_argument("--spec", type=_parse_spec, help="LL,UL[,kappa] for PTR (kappa defaults to 6)")
    pa.add_argument("--ci-kinds", type=_parse_kinds, default=list(CI_CHOICES),
                    help=f"comma list from {','.join(CI_CHOICES)}")
    pa.add_argument("--ci-source", default="mle", choices=["mle", "nanova", "reml"],
                    help="estimator feeding the sigma2_u intervals")
    pa.add_argument("--out", help="JSON report path (stdout if omitted)")
    pa.set_defaults(func=cmd_analyze)

    ps = sub.add_parser("simulate", help="run a Monte Carlo study")
    ps.add_argument("--config", required=True, help="JSON simulation config")
    ps.add_argument("--study", required=True, choices=["bias", "se", "coverage", "negprob", "convergence"])
    ps.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    ps.add_argument("--workers", type=int, help="worker processes (default: $GAUGEKIT_WORKERS or 1)")
    ps.add_argument("--out-dir", default=".", help="output directory")
    ps.set_defaults(func=cmd_simulate)

    pt = sub.add_parser("theory", help="evaluate theoretical curves on a rho grid")
    pt.add_argument("--plan", type=_parse_plans, default=list(theory.DESIGN_PLANS), help="a,r[;a,r...]")
    pt.add_argument("--rho-grid", type=_parse_grid, default=(1.0, 100.0, 50), help="min,max,points (log-spaced)")
    pt.add_argument("--quantity", required=True, choices=list(theory.QUANTITIES))
    pt.add_argument("--sigma2-eps", type=float, default=1.0, help="error variance (asymcov only)")
    pt.add_argument("--out", help="CSV path (stdout if omitted)")
    pt.set_defaults(func=cmd_theory)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print("error: invalid configuration:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return exc.exit_code
    except GaugeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA if args.command == "analyze" else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
