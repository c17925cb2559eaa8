"""Discrete generalized incompressible flows: solvers, certificates and approximations."""

__version__ = "0.1.0"
