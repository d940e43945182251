"""Sparse, box-constrained adversarial perturbations via homotopy over l0-regularized losses."""

__version__ = "0.1.0"
