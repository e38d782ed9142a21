"""Dictionary-based ROM-net on a desk-scale thermo-mechanical turbine blade."""

__version__ = "0.1.0"
