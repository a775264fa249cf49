"""Window localization family: shrinking space-time bumps, their kernel
calibrated normalizers, and the kernel smoothing of the bumps.

For level n the bump occupies [T - 2^-n, T] x [x_i - 2^-n, x_i + 2^-n] and is
scaled by ``c_n``, the reciprocal of the kernel mass over the window, so the
kernel smoothing of the bump reaches exactly one at (T, x_i).  The smoothing
is evaluated through CDF differences of the stable profile, which removes the
kernel's time singularity from the numerical integrand.
"""

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .errors import ContractError, DomainError
from .special_fn import heat_double_integral
from .stable_kernel import stable_cdf_interval

__all__ = [
    "PsiSpec",
    "window_mass",
    "c_norm",
    "low_g_integral",
    "psi",
    "psi_profile",
    "psi_sum",
]


@dataclass(frozen=True)
class PsiSpec:
    """Evaluation context for the smoothed windows."""

    n: int
    table: object
    T: float
    points: tuple
    c_n: float = None

    def __post_init__(self):
        if self.n < 1:
            raise DomainError("n must be >= 1")
        pts = tuple(float(p) for p in self.points)
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ContractError("points must be strictly increasing")
        half = 2.0 ** (-self.n)
        if len(pts) > 1 and min(np.diff(pts)) < 2.0 * half:
            raise ContractError("point windows overlap at this n")
        object.__setattr__(self, "points", pts)
        if self.c_n is None:
            object.__setattr__(self, "c_n", c_norm(self.table, self.n))


def _box_mass_rate(table, s, halfwidth, center=0.0):
    """int_{center-halfwidth}^{center+halfwidth} G(s, y) dy via the profile CDF."""
    a = table.params.alpha
    scale = s ** (-1.0 / a)
    return stable_cdf_interval(
        table, (center - halfwidth) * scale, (center + halfwidth) * scale
    )


def window_mass(table, t_span, halfwidth, center=0.0, tol=1e-11):
    """int_0^{t_span} int_{|y-center| <= halfwidth} G(s, y) dy ds.

    The integrand is a bounded CDF difference, so adaptive quadrature needs no
    singularity handling.
    """
    if t_span <= 0:
        raise DomainError("t_span must be positive")
    val, _ = quad(
        lambda s: _box_mass_rate(table, s, halfwidth, center),
        0.0,
        t_span,
        epsabs=tol,
        epsrel=tol,
        limit=200,
    )
    return val


def c_norm(table, n):
    """Normalizer c_n = 1 / kernel mass over the level-n window.

    The heat case uses the closed-form double integral; otherwise the mass is
    integrated from the profile CDF.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    span = 2.0 ** (-n)
    if table.params.alpha == 2.0:
        return 1.0 / heat_double_integral(2.0, span)
    return 1.0 / window_mass(table, span, span)


def low_g_integral(table, t):
    """int_0^t int_{-t}^t G(s, y) dy ds (closed form in the heat case)."""
    if not 0 < t <= 1:
        raise DomainError("t must lie in (0, 1]")
    if table.params.alpha == 2.0:
        return float(heat_double_integral(2.0, t))
    return window_mass(table, t, t)


def psi(spec, i, t, x, tol=1e-11):
    """Kernel smoothing of window i at (t, x); one at (T, x_i), zero before
    the window opens."""
    if t > spec.T + 1e-12:
        raise DomainError("t must not exceed the final time")
    half = 2.0 ** (-spec.n)
    tau = half - (spec.T - t)
    if tau <= 0:
        return 0.0
    xi = spec.points[i]
    val, _ = quad(
        lambda s: _box_mass_rate(spec.table, s, half, x - xi),
        0.0,
        tau,
        epsabs=tol * max(spec.c_n ** -1, 1e-12),
        epsrel=tol,
        limit=200,
    )
    return spec.c_n * val


def psi_profile(spec, i, t_list, x, tol=1e-11):
    """psi at a fixed x over increasing times, integrated incrementally.

    The increments are integrals of a nonnegative rate, so the returned
    profile is nondecreasing by construction.
    """
    t_arr = np.asarray(t_list, dtype=float)
    if np.any(np.diff(t_arr) < 0):
        raise ContractError("t_list must be nondecreasing")
    half = 2.0 ** (-spec.n)
    xi = spec.points[i]
    taus = np.clip(half - (spec.T - t_arr), 0.0, None)
    out = np.zeros(t_arr.shape)
    acc = 0.0
    prev = 0.0
    for idx, tau in enumerate(taus):
        if tau > prev:
            inc, _ = quad(
                lambda s: _box_mass_rate(spec.table, s, half, x - xi),
                prev,
                tau,
                epsabs=tol * max(spec.c_n ** -1, 1e-12),
                epsrel=tol,
                limit=200,
            )
            acc += max(inc, 0.0)
            prev = tau
        out[idx] = spec.c_n * acc
    return out


def psi_sum(spec, t, x, tol=1e-11):
    """Sum of the smoothed windows over all points."""
    return sum(psi(spec, i, t, x, tol) for i in range(len(spec.points)))
