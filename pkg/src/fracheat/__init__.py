"""fracheat: a simulation and verification lab for the semilinear stochastic
fractional heat equation on the line driven by space-time white noise.

The package tabulates the stable fundamental solutions, evaluates the special
functions behind the moment bounds, time-steps the mild form of the equation
(including first-variation fields and drift-shifted runs), and turns the
analytic statements into Monte Carlo and quadrature checks.
"""

__version__ = "0.1.0"

from ._backend import BACKEND, HAVE_EXT  # noqa: F401
from .errors import (  # noqa: F401
    AccuracyError,
    ConfigError,
    ContractError,
    DivergenceError,
    DomainError,
    FracheatError,
    ResolutionError,
)
