"""Desk-scale quantitative research pipeline: panel data, factor DSL, GP mining,
factor evaluation, ridge combination, constrained portfolio optimisation."""

__version__ = "0.1.0"
