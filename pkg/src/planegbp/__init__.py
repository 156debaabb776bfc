"""Gaussian belief propagation on dynamically editable factor graphs with
incremental planar abstraction, a routing-node transport simulator, and
reference solvers for validation."""

__version__ = "0.1.0"
