"""Adaptive MIMO radar beamforming driven by the Bayesian Cramer-Rao bound."""

__version__ = "0.1.0"
