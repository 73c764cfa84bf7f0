"""Desk-scale laboratory for training predictors on concatenated unstable and
stable inputs with channel dropout, plus exact oracles and diagnostics."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402,F401
