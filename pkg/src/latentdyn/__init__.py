"""Latent dynamic modeling of multivariate longitudinal cohort data.

A variational autoencoder compresses per-visit measurements to a small
latent state, a baseline network maps study-entry covariates to
individual-specific linear ODE parameters, and latent trajectories are
estimated by combining ODE solutions restarted at every observed visit.
All components are trained jointly by reverse-mode differentiation.
"""

__version__ = "0.1.0"

from . import errors

__all__ = ["errors", "__version__"]
