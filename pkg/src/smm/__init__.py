"""One-step generative modelling by score matching and mismatching."""

__version__ = "0.1.0"
