"""Consistency flow matching policies on point-cloud observations, with a
planar arm testbed and a benchmark harness."""

from .numcore import ContractError, Mlp, NumericError, Rng

__all__ = ["ContractError", "Mlp", "NumericError", "Rng"]
__version__ = "0.1.0"
