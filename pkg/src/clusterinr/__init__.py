"""Clustered, meta-initialized sine networks for compressing multivariate
time-varying fields sampled on unstructured points."""

__version__ = "0.1.0"
