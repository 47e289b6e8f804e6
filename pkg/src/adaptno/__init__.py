"""Adaptive backstepping boundary control of 2x2 hyperbolic PDEs with learned gain kernels."""

__version__ = "0.1.0"
