"""Partially observed mean-field control: forward, variational, adjoint and maximum-principle solvers."""

__version__ = "0.1.0"
