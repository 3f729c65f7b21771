"""Finite-time Lyapunov exponents of the stochastic Chafee-Infante equation.

Spectral Galerkin discretization of du = (Lap u + alpha u - u^3) dt + dW on
(0, L) with Dirichlet conditions, pullback attractors, FTLE and volume
growth along the attractor, cone certificates on smallness events and the
singular Gronwall envelope.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .dynamics import Scheme, SolverConfig, TrajectoryRecord, integrate
from .noise import CovarianceSpec, NoisePath, PathSource, sample_path
from .spectral import BasisConvention, DomainSpec, SpectralField

__all__ = [
    "__version__",
    "BasisConvention",
    "CovarianceSpec",
    "DomainSpec",
    "NoisePath",
    "PathSource",
    "Scheme",
    "SolverConfig",
    "SpectralField",
    "TrajectoryRecord",
    "integrate",
    "sample_path",
]
