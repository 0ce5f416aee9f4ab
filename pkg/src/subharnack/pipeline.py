"""End-to-end scenario runs: geometry, solve, certify.

Every stage runs inside :func:`stage`, which wraps failures in
:class:`StageError` so that callers can name the failing stage.
"""
from __future__ import annotations

import contextlib
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import certify, functionals, geometry, moser
from .errors import ConfigurationError, GeometryError, SubHarnackError
from .fieldio import field_hash
from .report import CertificationReport, run_document
from .scenario import Scenario
from .solver import CoefficientMatrix, NonlinearFlux, Problem, admissible_dt, linear_flux, solve

log = logging.getLogger(__name__)

THREADS_ENV = "SUBHARNACK_THREADS"


class StageError(SubHarnackError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause

    def diagnostic(self):
        out = {"stage": self.stage, "error": type(self.cause).__name__, "message": str(self.cause)}
        witness = getattr(self.cause, "witness", None)
        if witness is not None:
            out["witness"] = witness
        adm = getattr(self.cause, "admissible_dt", None)
        if adm is not None:
            out["admissible_dt"] = adm
        return out


@contextlib.contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def thread_count():
    """Worker threads from ``SUBHARNACK_THREADS`` (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be positive")
    return n


@dataclass
class RunResult:
    scenario: Scenario
    reports: list
    geometry: dict
    solution: object = None
    tables: dict = dc_field(default_factory=dict)

    @property
    def passed(self):
        return all(r.passed for r in self.reports)

    def document(self):
        summary = {"geometry": self.geometry, "resolution_scale": self.geometry.get("resolution_scale"),
                   "passed": [r.name for r in self.reports if r.passed],
                   "failed": [r.name for r in self.reports if not r.passed]}
        doc = run_document(self.scenario.config, self.reports, summary,
                           field_hash(self.solution) if self.solution is not None else "")
        doc["scenario_sha256"] = self.scenario.hash()
        return doc


class Pipeline:
    """Lazily computed fields, distance fields and certificates for one scenario."""

    def __init__(self, scenario: Scenario, resolution_scale: float = 1.0, threads: int = None):
        if not resolution_scale > 0:
            raise ConfigurationError("resolution scale must be positive")
        self.scenario = scenario
        self.scale = float(resolution_scale)
        self.threads = threads or thread_count()
        with stage("config"):
            self.frame, self.grid = scenario.validate_references(self.scale)
            self.flux = scenario.flux()
        rect = scenario.rectangle
        self.center = tuple(float(c) for c in rect["center"])
        self.r, self.r_inner = float(rect["r"]), float(rect["r_inner"])
        self.tau, self.tau_inner = float(rect["tau"]), float(rect["tau_inner"])
        self.t0 = float(rect["t0"])
        self._fields = {}
        self._dist = {}
        self._caches = {}
        self.geometry = {}
        self.tables = {}

    # ------------------------------------------------------------------ data

    @property
    def lam(self):
        return self.flux.lam if isinstance(self.flux, CoefficientMatrix) else self.flux.Lam

    def levels(self):
        """Absolute resolution scales of the refinement ladder, coarsest first."""
        return sorted({round(self.scale * f, 12) for f in self.scenario.config["refinement"]})

    def grid_at(self, scale):
        return self.scenario.grid(scale)

    def field(self, scale=None):
        scale = self.scale if scale is None else scale
        if scale not in self._fields:
            with stage("solve"):
                t = self.scenario.config["time"]
                grid = self.grid_at(scale)
                dt = t.get("dt") if scale == 1.0 else None
                if dt is None:
                    dt = self._default_dt(grid, float(t["t1"]) - float(t["t0"]), int(t["save_every"]),
                                          float(t.get("cfl_safety", 0.4)))
                prob = Problem(self.frame, grid, self.flux, self.scenario.initial(),
                               float(t["t1"]), float(t["t0"]), dt,
                               int(t["save_every"]), float(t.get("cfl_safety", 0.4)))
                self._fields[scale] = solve(prob)
        return self._fields[scale]

    def _default_dt(self, grid, span, save_every, cfl):
        """``0.9`` of the admissible step, capped so the shortest sub-rectangle holds 3 levels."""
        rect = self.scenario.rectangle
        minus = rect.get("minus", (1 / 8, 1 / 6))
        plus = rect.get("plus", (7 / 8, 1.0))
        window = self.tau * min(minus[1] - minus[0], plus[1] - plus[0])
        step = min(0.9 * admissible_dt(self.frame, grid, self.lam, cfl), window * save_every / 3)
        nsteps = -(-int(math.ceil(span / step)) // save_every) * save_every
        return span / nsteps

    def fields(self, scales):
        missing = [s for s in scales if s not in self._fields]
        if len(missing) > 1 and self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                list(pool.map(self.field, missing))
        return [self.field(s) for s in scales]

    def cache(self, scale=None):
        scale = self.scale if scale is None else scale
        if scale not in self._caches:
            self._caches[scale] = geometry.DistanceCache(self.frame, self.grid_at(scale))
        return self._caches[scale]

    def distfield(self, scale=None):
        scale = self.scale if scale is None else scale
        if scale not in self._dist:
            with stage("geometry"):
                grid = self.grid_at(scale)
                df = self.cache(scale).get(self.center, 1.25 * self.r)
                ball = df.values < self.r
                margin = 2
                for ax in range(grid.ndim):
                    idx = np.flatnonzero(ball.any(axis=tuple(a for a in range(grid.ndim) if a != ax)))
                    if idx.size and (idx.min() < margin or idx.max() > grid.shape[ax] - 1 - margin):
                        raise ConfigurationError(
                            f"rectangle ball of radius {self.r} comes within {margin} cells of the grid boundary")
                self._dist[scale] = df
        return self._dist[scale]

    # ------------------------------------------------------------ geometry

    def run_geometry(self):
        df = self.distfield()
        with stage("geometry"):
            dbl = geometry.doubling_constant(df, [self.r / 4, self.r / 2])
            cut = geometry.make_cutoff(df, self.r_inner, self.r, self.tau_inner, self.tau, self.t0)
            self.geometry.update({
                "C_B": dbl.C_B, "Q": dbl.Q, "doubling_ratio": dbl.ratio, "C_HG": cut.C_HG,
                "ball_volume": geometry.ball_volume(df, self.r), "horizon": df.horizon,
                "distance_diagnostics": df.diagnostics, "resolution_scale": self.scale,
                "grid": self.grid.to_dict()})
        return self.geometry

    # ------------------------------------------------------------ certificates

    def cert_structural(self):
        with stage("structural"):
            if isinstance(self.flux, CoefficientMatrix):
                flux = linear_flux(self.flux)
            else:
                flux = self.flux
            return [certify.structural_check(flux, grid=self.grid, seed=self.scenario.seed)]

    def cert_cacciopoli(self):
        ps = self.scenario.options["cacciopoli"]["p"]
        tol = self.scenario.options["stability"]
        Rp, R = geometry.cacciopoli_rectangles(self.center, self.r_inner, self.r, self.tau_inner,
                                               self.tau, self.t0)
        scales = self.levels()
        us = self.fields(scales)
        out = []
        with stage("cacciopoli"):
            for p in ps:
                reps = [functionals.check_cacciopoli(u, p, Rp, R, self.distfield(s), self.flux)
                        for s, u in zip(scales, us)]
                rep = reps[-1]
                fits = [(q.constants["C1_fitted"], q.constants["C2_fitted"]) for q in reps]
                if len(fits) >= 2:
                    delta = max(abs(a - b) / max(abs(b), 1e-300) for a, b in zip(fits[-2], fits[-1]))
                else:
                    delta = 0.0
                rep.details["refinement"] = {"fits": fits, "delta": delta, "tolerance": tol}
                rep.passed = bool(rep.passed and delta < tol)
                out.append(rep)
        return out

    def _slice(self, t):
        u = self.field()
        return u.values[u.time_index(t)]

    def cert_sobolev(self):
        with stage("sobolev"):
            if "C_B" not in self.geometry:
                self.run_geometry()
            df = self.distfield()
            rep = functionals.check_sobolev(self._slice(self.t0 + self.tau), self.r_inner, self.r, df,
                                            self.geometry["C_B"], self.geometry["Q"])
            self.geometry["C_S"] = rep.constants.get("C_S")
            return [rep]

    def cert_poincare(self):
        with stage("poincare"):
            df = self.distfield()
            count = self.scenario.options["poincare"]["count"]
            fam = functionals.poincare_family(self.grid, self.center, self.r, count, self.scenario.seed)
            fam.append(("solution", self._slice(self.t0 + self.tau)))
            rep = functionals.check_poincare(None, df, self.r, family=fam)
            self.geometry["C_P"] = rep.constants["C_P"]
            return [rep]

    def _gamma_formula(self):
        g = self.geometry
        if g.get("C_S") is None or "C_B" not in g:
            return None
        inputs = {"C_S": g["C_S"], "C_B": g["C_B"], "C_HG": g["C_HG"], "lam": self.flux.lam, "r": self.r, "r_inner": self.r_inner,
            "tau": self.tau, "tau_inner": self.tau_inner, "Q": g["Q"], "n": self.frame.n,
            "ball_volume": g["ball_volume"]}
        variant = "linear"
        if isinstance(self.flux, NonlinearFlux):
            inputs["C"] = self.flux.C
            variant = "nonlinear"
        try:
            return moser.eval_gamma(inputs, variant).value
        except ConfigurationError:
            return None

    def cert_moser(self):
        opts = self.scenario.options["moser"]
        u, df = self.field(), self.distfield()
        out = []
        with stage("moser"):
            formula = self._gamma_formula()
            for p0 in opts["p0"]:
                sched = moser.make_schedule(p0, self.frame.n, self.r, self.r_inner, self.tau, self.tau_inner,
                                            opts["nu_max"], self.center, self.t0)
                chain = moser.run_iteration(u, sched, df)
                rep = chain.to_report(opts["tol"])
                rep.constants["gamma_formula"] = formula
                self.tables[f"moser_p0={p0:g}"] = chain.table()
                out.append(rep)
        return out

    def _bridge_family(self, u):
        opts = self.scenario.options["bridge"]
        eta = opts["eta"]
        span = float(u.times[-1] - u.times[0])
        # largest radius with 2 rb + 2 rb^2 / eta^2 <= 0.9 span
        a = 2.0 / eta ** 2
        rb = min(self.r / 4, (-2 + math.sqrt(4 + 4 * a * 0.9 * span)) / (2 * a))
        t = float(u.times[-1]) - rb
        rng = np.random.default_rng(self.scenario.seed)
        fam = [(self.center, rb, t)]
        grid = u.grid
        while len(fam) < opts["count"]:
            c = np.asarray(self.center) + rng.uniform(-0.5, 0.5, grid.ndim) * self.r
            fam.append((tuple(grid.node_point(grid.nearest_node(c))), rb, t))
        return fam

    def cert_bridge(self):
        opts = self.scenario.options["bridge"]
        tol = self.scenario.options["stability"]
        scales = self.levels()
        us = self.fields(scales)
        with stage("bridge"):
            stats = []
            for s, u in zip(scales, us):
                fam = self._bridge_family(self.field(scales[-1]))
                stats.append(moser.bridge_statistic(u, opts["eps"], fam, self.cache(s),
                                                    geometry.LagMapping(opts["eta"], float(u.times[0]))))
            rep = stats[-1].to_report()
            vals = [b.product_max for b in stats]
            delta = abs(vals[-1] - vals[-2]) / vals[-1] if len(vals) >= 2 else 0.0
            rep.details["refinement"] = {"products": vals, "delta": delta, "tolerance": tol}
            rep.passed = bool(rep.passed and delta < tol)
            return [rep]

    def cert_log(self):
        opts = self.scenario.options["log"]
        u = self.field()
        with stage("log"):
            span = float(u.times[-1] - u.times[0])
            r = opts.get("r") or min(self.r / 2, 0.95 * math.sqrt(span / 4))
            t0 = opts.get("t0", float(u.times[0]) + 3 * r * r)
            df = self.cache().get(self.center, r)
            return [moser.log_level_set_check(u, df, r, t0, self.lam, opts["levels"])]

    def cert_harnack(self):
        rect = self.scenario.rectangle
        tol = self.scenario.options["stability"]
        scales = self.levels()
        us = self.fields(scales)
        with stage("harnack"):
            dfs = [self.distfield(s) for s in scales]
            kw = {}
            for key in ("radius_fraction", "minus", "plus"):
                if key in rect:
                    kw[key] = tuple(rect[key]) if isinstance(rect[key], list) else rect[key]
            cert = certify.harnack_certify(us, dfs, self.center, self.r, self.tau, self.t0, tolerance=tol, **kw)
            out = [cert.to_report()]
            self.geometry["harnack_C_fit"] = cert.ratio
            if np.isfinite(cert.ratio):
                R, Rp, Rm = geometry.harnack_rectangles(self.center, self.r, self.tau, self.t0, **kw)
                step = certify.oscillation_step(us[-1], R, Rp, Rm, dfs[-1])
                rep = step.to_report()
                rep.constants["gamma_u"] = cert.ratio
                out.append(rep)
            return out

    def cert_holder(self):
        opts = self.scenario.options["holder"]
        tol = self.scenario.options["stability"]
        scales = self.levels()
        us = self.fields(scales)
        with stage("holder"):
            span = float(us[-1].times[-1] - us[-1].times[0])
            k = opts.get("k") or min(self.r, 0.95 * math.sqrt(span / 2))
            tc = opts.get("t_center", float(us[-1].times[0]) + 0.5 * span)
            certs = [certify.holder_certify(u, self.cache(s), self.center, tc, k, opts["levels"],
                                            opts["pairs"], seed=self.scenario.seed)
                     for s, u in zip(scales, us)]
            rep = certs[-1].to_report()
            qs = [c.quotient for c in certs]
            if len(qs) >= 2 and all(np.isfinite(qs[-2:])) and qs[-1] > 0:
                delta = abs(qs[-1] - qs[-2]) / qs[-1]
            else:
                delta = 0.0 if len(qs) < 2 or certs[-1].trivial else math.inf
            rep.details["refinement"] = {"quotients": qs, "delta": delta, "tolerance": tol}
            rep.passed = bool(rep.passed and delta < tol)
            self.tables["oscillation"] = [{"nu": i, "scale": s, "omega": w} for i, s, w in certs[-1].table()]
            return [rep]

    ORDER = ("structural", "cacciopoli", "sobolev", "poincare", "moser", "bridge", "log", "harnack", "holder")

    def certify(self, kinds):
        unknown = [k for k in kinds if k not in self.ORDER]
        if unknown:
            raise ConfigurationError(f"unknown certificate kinds {unknown}")
        if not self.geometry:
            self.run_geometry()
        reports = []
        for kind in self.ORDER:
            if kind in kinds:
                reports.extend(getattr(self, f"cert_{kind}")())
        for rep in reports:
            rep.details.setdefault("geometry", {k: self.geometry.get(k) for k in
                                                ("C_B", "Q", "C_HG", "C_S", "C_P")})
        return reports

    def run(self, kinds=None) -> RunResult:
        kinds = list(self.scenario.config["certify"] if kinds is None else kinds)
        reports = self.certify(kinds)
        return RunResult(self.scenario, reports, self.geometry, self.field(), self.tables)


def run_scenario(scenario, resolution_scale=1.0, seed=None, kinds=None) -> RunResult:
    if not isinstance(scenario, Scenario):
        scenario = Scenario.load(scenario)
    if seed is not None:
        scenario = scenario.with_seed(seed)
    return Pipeline(scenario, resolution_scale).run(kinds)


# ---------------------------------------------------------------------------
# comparison


def _numeric_constants(cert):
    out = {}
    for k, v in cert.get("constants", {}).items():
        if isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v):
            out[k] = float(v)
    return out


def compare_runs(a: dict, b: dict, tolerance: float = 0.2) -> dict:
    """Relative deltas of every numeric certificate constant between two run documents."""
    ha, hb = a.get("scenario_sha256"), b.get("scenario_sha256")
    if not ha or ha != hb:
        raise ConfigurationError(f"scenario hashes differ ({ha} vs {hb}); refusing to compare")
    cb = {c["name"]: c for c in b["certificates"]}
    rows, flagged = [], []
    for ca in a["certificates"]:
        other = cb.get(ca["name"])
        if other is None:
            continue
        va, vb = _numeric_constants(ca), _numeric_constants(other)
        for key in sorted(set(va) & set(vb)):
            x, y = va[key], vb[key]
            scale = max(abs(x), abs(y))
            delta = 0.0 if scale == 0 else abs(x - y) / scale
            row = {"certificate": ca["name"], "constant": key, "a": x, "b": y, "delta": delta,
                   "flagged": bool(delta > tolerance)}
            rows.append(row)
            if row["flagged"]:
                flagged.append(f"{ca['name']}.{key}")
    return {"scenario_sha256": ha, "tolerance": tolerance, "rows": rows, "flagged": flagged}
