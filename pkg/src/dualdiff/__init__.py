"""Dual-branch diffusion for paired anomaly image / anomaly part synthesis."""

__version__ = "0.1.0"
