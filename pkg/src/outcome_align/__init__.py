"""Outcome-aligned representation learning for longitudinal binary prediction."""

__version__ = "0.1.0"
