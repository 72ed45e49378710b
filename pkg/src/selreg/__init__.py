"""Selective regression with bootstrap uncertainty, baselines and rejection audits."""

__version__ = "0.1.0"
