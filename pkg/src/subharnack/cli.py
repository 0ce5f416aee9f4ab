"""Command line interface.

Exit status: 0 when every certificate passed, 1 when one failed, 2 for
configuration errors and 3 when a pipeline stage raised.  Failures print a
JSON diagnostic naming the stage to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigurationError
from .fieldio import write_field
from .pipeline import Pipeline, StageError, compare_runs, stage
from .report import reports_to_csv, run_document, validate_document
from .scenario import Scenario, bundled_scenarios

STAGES = {
    "check": ["structural", "cacciopoli", "sobolev", "poincare"],
    "moser": ["moser"],
    "bridge": ["bridge", "log"],
    "harnack": ["harnack"],
    "holder": ["holder"],
}


def _common(p):
    p.add_argument("config", help="scenario YAML file or bundled scenario name")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out", default=None, help="output directory (default: out/<scenario name>)")
    p.add_argument("--resolution-scale", type=float, default=1.0,
                   help="multiply the number of cells per axis by this factor")


def build_parser():
    ap = argparse.ArgumentParser(prog="subharnack", description=(
        "Numerical certificates for Harnack-type estimates of degenerate parabolic equations. "
        "Set SUBHARNACK_THREADS to solve refinement levels concurrently."))
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "geometry": "distance field, doubling and cutoff constants",
        "solve": "solve the scenario and write the binary field file",
        "check": "structural, energy, Sobolev and Poincare certificates",
        "moser": "Moser iteration chains",
        "bridge": "BMO-with-lag bridge and log-u level-set estimates",
        "harnack": "Harnack ratio certificate",
        "holder": "Hölder oscillation-decay certificate",
        "run": "full pipeline with the scenario's certificate list",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text))
    cmp_ = sub.add_parser("compare", help="relative deltas between two run summaries")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.add_argument("--tolerance", type=float, default=0.2)
    cmp_.add_argument("--out", default=None, help="write the comparison JSON here")
    sub.add_parser("list", help="list bundled scenarios")
    return ap


def _write_json(path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_table(path, rows):
    if not rows:
        return
    keys = list(rows[0])
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _scenario(args):
    sc = Scenario.load(args.config)
    if args.seed is not None:
        sc = sc.with_seed(args.seed)
    return sc


def _outdir(args, sc):
    out = Path(args.out or sc.config.get("output") or Path("out") / sc.name)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run(args):
    sc = _scenario(args)
    pipe = Pipeline(sc, args.resolution_scale)
    out = _outdir(args, sc)
    cmd = args.command
    if cmd == "geometry":
        geo = pipe.run_geometry()
        doc = run_document(sc.config, [], {"geometry": geo}, "")
        doc["scenario_sha256"] = sc.hash()
        validate_document(doc)
        _write_json(out / "geometry.json", doc)
        return 0
    if cmd == "solve":
        u = pipe.field()
        with stage("output"):
            digest = write_field(out / "field.shf", u)
        summary = {"solver": {k: v for k, v in u.meta.items() if k not in ("min_per_step", "max_per_step")},
                   "levels": int(u.nt), "grid": u.grid.to_dict(),
                   "min": float(u.values.min()), "max": float(u.values.max())}
        doc = run_document(sc.config, [], summary, digest)
        doc["scenario_sha256"] = sc.hash()
        validate_document(doc)
        _write_json(out / "summary.json", doc)
        return 0
    kinds = STAGES.get(cmd, sc.config["certify"])
    reports = pipe.certify(kinds)
    u = pipe.field()
    with stage("output"):
        digest = write_field(out / "field.shf", u)
        summary = {"geometry": pipe.geometry, "passed": [r.name for r in reports if r.passed],
                   "failed": [r.name for r in reports if not r.passed]}
        doc = run_document(sc.config, reports, summary, digest)
        doc["scenario_sha256"] = sc.hash()
        validate_document(doc)
        name = "summary.json" if cmd == "run" else f"{cmd}.json"
        _write_json(out / name, doc)
        (out / ("certificates.csv" if cmd == "run" else f"{cmd}.csv")).write_text(reports_to_csv(reports))
        for tname, rows in pipe.tables.items():
            _write_table(out / f"{tname}.csv", rows)
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}")
    return 0 if all(r.passed for r in reports) else 1


def _compare(args):
    a = json.loads(Path(args.a).read_text())
    b = json.loads(Path(args.b).read_text())
    res = compare_runs(a, b, args.tolerance)
    text = json.dumps(res, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "list":
            print("\n".join(bundled_scenarios()))
            return 0
        if args.command == "compare":
            return _compare(args)
        return _run(args)
    except StageError as exc:
        print(json.dumps(exc.diagnostic(), default=str), file=sys.stderr)
        return 2 if isinstance(exc.cause, ConfigurationError) and exc.stage == "config" else 3
    except (OSError, json.JSONDecodeError) as exc:
        print(json.dumps({"stage": "input", "error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(json.dumps({"stage": "config", "error": "ConfigurationError", "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
