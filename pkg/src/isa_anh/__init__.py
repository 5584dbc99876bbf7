"""Independent subspace analysis with auxiliary variables, HSIC penalties and APC."""

__version__ = "0.1.0"
