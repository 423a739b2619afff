"""CNN robustness to Gaussian high- and low-pass filtered images."""

__version__ = "0.1.0"
