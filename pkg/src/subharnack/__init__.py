"""Numerical certificates for Harnack-type estimates of degenerate parabolic equations.

Hörmander vector-field frames, Carnot–Carathéodory geometry, explicit
solvers and checks of the energy, Moser, Harnack and Hölder estimates.
"""
from .errors import (CFLViolation, ConfigurationError, DomainError, GeometryError, SolverBlowUp,
                     StructuralViolation, SubHarnackError)
from .frames import VectorFieldFrame, euclidean, get_frame, grushin, heisenberg
from .grid import Grid, GridFunction
from .report import CertificationReport

__version__ = "0.1.0"

__all__ = [
    "CFLViolation", "CertificationReport", "ConfigurationError", "DomainError", "GeometryError", "Grid",
    "GridFunction", "SolverBlowUp", "StructuralViolation", "SubHarnackError", "VectorFieldFrame",
    "euclidean", "get_frame", "grushin", "heisenberg",
]
