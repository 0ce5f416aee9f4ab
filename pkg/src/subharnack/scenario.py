"""Scenario configuration: YAML files validated against a JSON schema.

Errors name the offending field and, when the document came from text,
the line it sits on.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .errors import ConfigurationError
from .frames import VectorFieldFrame, get_frame
from .grid import Grid
from .solver import (CoefficientMatrix, NonlinearFlux, checkerboard_coefficients, identity_coefficients,
                     linear_flux, mean_curvature_flux, rational_flux, scaled_flux)

DEFAULT_CERTIFY = ["structural", "cacciopoli", "sobolev", "poincare", "moser", "bridge", "log",
                   "harnack", "holder"]
DEFAULT_OPTIONS = {
    "cacciopoli": {"p": [1.0, 2.0, -1.0]},
    "moser": {"p0": [1.0, -1.0], "nu_max": 6, "tol": 0.05},
    "bridge": {"eps": 0.5, "eta": 0.5, "count": 4},
    "log": {"levels": 8},
    "holder": {"levels": 3, "pairs": 500},
    "poincare": {"count": 12},
    "stability": 0.2,
}


def load_schema(name="scenario"):
    text = resources.files("subharnack").joinpath(f"schemas/{name}.schema.json").read_text()
    return json.loads(text)


def bundled_scenarios():
    root = resources.files("subharnack").joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def bundled_path(name):
    p = resources.files("subharnack").joinpath(f"scenarios/{name}.yaml")
    if not p.is_file():
        raise ConfigurationError(f"no bundled scenario {name!r}; available: {bundled_scenarios()}")
    return p


# ---------------------------------------------------------------------------
# parsing with line numbers


def _line_of(node, path):
    """Line (1-based) of the YAML node at ``path``, or of the deepest existing parent."""
    line = node.start_mark.line + 1 if node is not None else None
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(key):
                    nxt = v
                    line = k.start_mark.line + 1
                    break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
        if node is None:
            break
    return line


def parse_config(text: str, origin: str = "<config>") -> dict:
    """Parse and schema-validate YAML text; raise :class:`ConfigurationError` naming line and field."""
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "unknown line"
        raise ConfigurationError(f"{origin}: {where}: YAML parse error: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{origin}: line 1: the scenario must be a mapping")
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        path = list(err.absolute_path)
        field = ".".join(str(p) for p in path) or "<root>"
        line = _line_of(root, path)
        raise ConfigurationError(f"{origin}: line {line}: field '{field}': {err.message}")
    return data


# ---------------------------------------------------------------------------
# scenario


@dataclass
class Scenario:
    config: dict
    source: str = "<config>"

    @classmethod
    def from_text(cls, text, origin="<config>"):
        return cls(_with_defaults(parse_config(text, origin)), origin)

    @classmethod
    def load(cls, path):
        """Load a YAML file, or a bundled scenario by name."""
        p = Path(path)
        if not p.exists() and not str(path).endswith((".yaml", ".yml")):
            p = bundled_path(str(path))
            return cls.from_text(p.read_text(), str(path))
        if not p.exists():
            raise ConfigurationError(f"scenario file {path} does not exist")
        return cls.from_text(p.read_text(), str(path))

    @property
    def name(self):
        return self.config["name"]

    @property
    def seed(self):
        return int(self.config.get("seed", 0))

    def with_seed(self, seed):
        cfg = copy.deepcopy(self.config)
        cfg["seed"] = int(seed)
        return Scenario(cfg, self.source)

    def hash(self):
        """SHA-256 of the configuration without its resolution, so refinements compare equal."""
        cfg = copy.deepcopy(self.config)
        cfg["grid"].pop("shape", None)
        cfg.pop("output", None)
        cfg["time"].pop("dt", None)
        return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()

    # builders

    def frame(self) -> VectorFieldFrame:
        return get_frame(self.config["frame"])

    def grid(self, scale: float = 1.0) -> Grid:
        g = self.config["grid"]
        grid = Grid(tuple(g["lo"]), tuple(g["hi"]), tuple(g["shape"]))
        return grid if scale == 1.0 else grid.scaled(scale)

    def flux(self):
        f = self.config["flux"]
        m = self.frame().m
        lam = float(f.get("lam", 2.0))
        if f["type"] == "linear":
            fam = f.get("family", "identity")
            if fam == "identity":
                return identity_coefficients(m)
            return checkerboard_coefficients(m, lam, float(f.get("cell", 0.25)), f.get("period"),
                                             rotation=fam == "checkerboard-rot")
        name = f.get("name", "mean-curvature")
        M = f.get("M", 1.0)
        if name == "mean-curvature":
            return mean_curvature_flux(m, M)
        if name == "rational":
            return rational_flux(m, M)
        if name == "scaled":
            return scaled_flux(m, lam)
        fam = f.get("family", "identity")
        coeffs = identity_coefficients(m) if fam == "identity" else checkerboard_coefficients(
            m, lam, float(f.get("cell", 0.25)), rotation=fam == "checkerboard-rot")
        return linear_flux(coeffs)

    def initial(self):
        spec = self.config["initial"]
        n = len(self.config["grid"]["lo"])
        base = float(spec.get("base", 1.0))
        amp = float(spec.get("amplitude", 1.0))
        scale = float(spec.get("scale", 1.0))
        c = np.asarray(spec.get("center", [0.0] * n), float)
        if c.shape != (n,):
            raise ConfigurationError(f"initial.center needs {n} coordinates")
        name = spec["name"]
        if name == "constant":
            return lambda P: np.full(P.shape[0], scale * base)
        if name == "gaussian":
            w = float(spec.get("width", 0.05))
            return lambda P: scale * (base + amp * np.exp(-np.sum((P - c) ** 2, axis=1) / w))
        w = float(spec.get("width", 0.06))
        rad = float(spec.get("radius", 0.6))

        def plateau(P):
            d = np.sqrt(np.sum((P - c) ** 2, axis=1))
            return scale * (base + amp * 0.5 * (1 - np.tanh((d - rad) / w)))

        return plateau

    @property
    def rectangle(self):
        return self.config["rectangle"]

    @property
    def options(self):
        return self.config["options"]

    def validate_references(self, scale: float = 1.0):
        """Frame resolves, dimensions agree, rectangle sits 2 cells inside the grid box."""
        frame = self.frame()
        grid = self.grid(scale)
        if frame.n != grid.ndim:
            raise ConfigurationError(f"frame acts on R^{frame.n} but the grid has {grid.ndim} axes")
        rect = self.rectangle
        if len(rect["center"]) != grid.ndim:
            raise ConfigurationError(f"rectangle.center needs {grid.ndim} coordinates")
        if not rect["r_inner"] < rect["r"]:
            raise ConfigurationError("rectangle.r_inner must be smaller than rectangle.r")
        if not rect["tau_inner"] < rect["tau"]:
            raise ConfigurationError("rectangle.tau_inner must be smaller than rectangle.tau")
        t = self.config["time"]
        t0 = rect.get("t0", t.get("t0", 0.0))
        if t0 < t.get("t0", 0.0) or t0 + rect["tau"] > t["t1"] + 1e-12:
            raise ConfigurationError("rectangle time interval leaves (time.t0, time.t1)")
        f = self.flux()
        if isinstance(f, (CoefficientMatrix, NonlinearFlux)) and f.m != frame.m:
            raise ConfigurationError("flux size differs from the number of frame fields")
        return frame, grid


def _with_defaults(cfg):
    cfg = copy.deepcopy(cfg)
    cfg.setdefault("seed", 0)
    cfg.setdefault("certify", list(DEFAULT_CERTIFY))
    cfg.setdefault("refinement", [0.5, 1.0])
    opts = cfg.setdefault("options", {})
    for k, v in DEFAULT_OPTIONS.items():
        if isinstance(v, dict):
            merged = dict(v)
            merged.update(opts.get(k, {}))
            opts[k] = merged
        else:
            opts.setdefault(k, v)
    cfg["time"].setdefault("t0", 0.0)
    cfg["time"].setdefault("save_every", 1)
    cfg["rectangle"].setdefault("t0", cfg["time"]["t0"])
    return cfg
