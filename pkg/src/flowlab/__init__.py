"""Rectified-flow priors and distillation of parametric assets at desk scale."""

__version__ = "0.1.0"
