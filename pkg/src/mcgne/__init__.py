"""Distributed variational GNE seeking for multi-cluster games under
partial-decision information (two-phase forward-backward-forward iteration)."""

__version__ = "0.1.0"
