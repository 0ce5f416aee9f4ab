"""Certification records and their JSON/CSV serialisation."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

REPORT_SCHEMA_VERSION = 1


@dataclass
class CertificationReport:
    """One checked inequality.

    ``margin`` is ``1 - LHS / (C * RHS)`` for upper bounds, positive when the
    inequality holds; ``constants`` separates the predicted constants from
    the fitted ones (the smallest constant making the inequality true).
    """

    name: str
    passed: bool
    lhs: float = float("nan")
    rhs: float = float("nan")
    constants: dict = field(default_factory=dict)
    margin: float = float("nan")
    resolution: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return _jsonable(asdict(self))

    def row(self):
        """Flat record for CSV output."""
        out = {"name": self.name, "passed": bool(self.passed), "lhs": self.lhs, "rhs": self.rhs,
               "margin": self.margin}
        for k, v in self.constants.items():
            if isinstance(v, (int, float, np.floating, np.integer)) or v is None:
                out[f"const_{k}"] = v
        return _jsonable(out)


def margin_of(lhs, rhs, C, tol=0.0):
    """``1 - lhs / (C rhs (1 + tol))`` with the conventions ``0/0 -> 1`` and ``x/0 -> -inf``."""
    bound = C * rhs * (1 + tol)
    if lhs == 0:
        return 1.0
    if bound == 0 or not np.isfinite(bound):
        return -math.inf if bound == 0 else 1.0
    return float(1.0 - lhs / bound)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return obj


def load_schema():
    text = resources.files("subharnack").joinpath("schemas/report.schema.json").read_text()
    return json.loads(text)


def run_document(scenario: dict, reports: list, summary: dict, field_hash: str):
    """The JSON document written by a pipeline run."""
    return _jsonable({
        "schema_version": REPORT_SCHEMA_VERSION,
        "scenario": scenario,
        "field_sha256": field_hash,
        "summary": summary,
        "all_passed": bool(all(r.passed for r in reports)),
        "certificates": [r.to_dict() for r in reports],
    })


def validate_document(doc: dict):
    import jsonschema

    jsonschema.validate(doc, load_schema())


def reports_to_csv(reports) -> str:
    rows = [r.row() for r in reports]
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
