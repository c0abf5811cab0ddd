"""Black-box variational inference with perturbative, KL and alpha bounds."""

__version__ = "0.1.0"
