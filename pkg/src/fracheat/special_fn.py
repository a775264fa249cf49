"""Two-parameter Mittag-Leffler function, the singular resolvent kernel of the
fractional Gronwall inequality, its explicit solutions, and the closed-form
double integral of the heat kernel over a centered box.

The resolvent equation solved here is

    f(t) = beta(t) + lam * int_0^t (t-s)^(-1/a) f(s) ds,      a in (1, 2],

whose kernel is ``K(t) = t^(-1/a) * lam * Gamma(b) * E_{b,b}(t^b lam Gamma(b))``
with ``b = 1 - 1/a``.  The localized variant restricts the memory to a window
``(T - eps, T]`` with the blown-up rate ``lam * eps^(-b)``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, ndtr, rgamma

from .errors import AccuracyError, ContractError, DomainError

__all__ = [
    "MittagParams",
    "ResolventSpec",
    "mittag_leffler",
    "normal_cdf",
    "resolvent_kernel",
    "resolvent_primitive",
    "gronwall_solve",
    "gronwall_constant_closed",
    "contraction_solve",
    "heat_double_integral",
]

# series/asymptotic switch: z**(1/a) beyond this favors the exponential form
ASYMPTOTIC_SWITCH = 30.0
# for negative z the alternating series cancels like exp(|z|^(1/a)); beyond
# this the algebraic tail expansion is the more accurate double-precision route
NEGATIVE_SWITCH = 19.0
_EXP_GUARD = 700.0


@dataclass(frozen=True)
class MittagParams:
    """Indices and accuracy controls for E_{a,b}."""

    a: float
    b: float
    series_tol: float = 1e-14
    max_terms: int = 20000

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise DomainError("Mittag-Leffler indices must be positive")
        if not self.series_tol > 0:
            raise DomainError("series_tol must be positive")


@dataclass(frozen=True)
class ResolventSpec:
    """Order of the singular kernel and rate constant of the resolvent."""

    alpha: float
    lam: float

    def __post_init__(self):
        if not (1.0 < self.alpha <= 2.0):
            raise DomainError("alpha must lie in (1, 2]")
        if not self.lam > 0:
            raise DomainError("lambda must be positive")

    @property
    def b(self):
        return 1.0 - 1.0 / self.alpha


def _ml_series(a, b, z, tol, max_terms):
    """Direct power series sum_k z^k / Gamma(a k + b)."""
    if z == 0.0:
        return float(rgamma(b))
    acc = 0.0
    log_absz = np.log(abs(z))
    sign = 1.0
    below = 0
    for k in range(max_terms):
        log_term = k * log_absz - gammaln(a * k + b)
        if log_term > _EXP_GUARD:
            raise AccuracyError("series term overflow", achieved=np.inf)
        term = sign * np.exp(log_term)
        acc += term
        if z < 0:
            sign = -sign
        if abs(term) <= tol * max(abs(acc), 1e-300):
            below += 1
            if below >= 2:
                return acc
        else:
            below = 0
    raise AccuracyError(
        "Mittag-Leffler series did not converge",
        achieved=abs(term) / max(abs(acc), 1e-300),
    )


def _ml_asymptotic(a, b, z, tol, max_terms=60):
    """Leading exponential plus algebraic corrections, for large z > 0, a <= 1."""
    if z <= 0:
        raise DomainError("asymptotic form requires z > 0")
    e = z ** (1.0 / a)
    if e > _EXP_GUARD:
        raise DomainError("argument beyond the overflow guard")
    acc = (1.0 / a) * z ** ((1.0 - b) / a) * np.exp(e)
    for k in range(1, max_terms + 1):
        term = z ** (-k) * rgamma(b - a * k)
        acc -= term
        if abs(term) <= tol * abs(acc):
            break
    return acc


def _ml_neg_asymptotic(a, b, z, tol, kmax=400):
    """Algebraic tail expansion -sum_k z^-k / Gamma(b - a k) for z << 0, a < 1.

    Truncated at the smallest term (zero terms from Gamma poles are skipped in
    the stopping rule).
    """
    acc = 0.0
    prev_mag = np.inf
    grow = 0
    for k in range(1, kmax):
        term = -(z ** (-k)) * rgamma(b - a * k)
        mag = abs(term)
        if mag > 0:
            if mag > prev_mag:
                grow += 1
                if grow >= 2:
                    break
            else:
                grow = 0
            prev_mag = mag
        acc += term
        if 0 < mag <= tol * abs(acc):
            break
    return acc


def mittag_leffler(p, z):
    """Evaluate E_{a,b}(z) for real z.

    Uses the defining series, switching to the exponential asymptotic form for
    large positive z and to the algebraic tail expansion for large negative z
    (both for a <= 1, where the alternating series cancels catastrophically).
    """
    a, b = p.a, p.b
    z = float(z)
    if z > 0 and a <= 1.0 and z ** (1.0 / a) > ASYMPTOTIC_SWITCH:
        return _ml_asymptotic(a, b, z, p.series_tol)
    if z < 0 and a < 1.0 and (-z) ** (1.0 / a) > NEGATIVE_SWITCH:
        return _ml_neg_asymptotic(a, b, z, p.series_tol)
    return _ml_series(a, b, z, p.series_tol, p.max_terms)


def normal_cdf(x):
    """Standard normal CDF (absolute error far below 1e-12)."""
    return ndtr(x)


def _ml(a, b, z, tol=1e-14):
    return mittag_leffler(MittagParams(a, b, series_tol=tol), z)


def resolvent_kernel(spec, t):
    """K(t) = t^(-1/a) lam Gamma(b) E_{b,b}(t^b lam Gamma(b)), b = 1 - 1/a."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0):
        raise DomainError("resolvent kernel needs t > 0")
    b = spec.b
    g = spec.lam * float(np.exp(gammaln(b)))
    e_vals = np.array([_ml(b, b, g * ti**b) for ti in np.atleast_1d(t_arr)])
    out = t_arr ** (-1.0 / spec.alpha) * g * e_vals.reshape(t_arr.shape)
    return out if out.shape else float(out)


def resolvent_primitive(spec, t):
    """Exact primitive int_0^t K(s) ds = w E_{b,1+b}(w) with w = lam Gamma(b) t^b."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise DomainError("primitive needs t >= 0")
    b = spec.b
    g = spec.lam * float(np.exp(gammaln(b)))
    flat = np.atleast_1d(t_arr)
    out = np.array([0.0 if ti == 0 else g * ti**b * _ml(b, 1.0 + b, g * ti**b) for ti in flat])
    out = out.reshape(t_arr.shape)
    return out if out.shape else float(out)


def gronwall_constant_closed(spec, beta, t):
    """Closed-form solution for constant forcing: beta * E_{b,1}(lam Gamma(b) t^b).

    Equals ``beta * (1 + w E_{b,1+b}(w))``, i.e. the constant forcing plus its
    resolvent integral.
    """
    t_arr = np.asarray(t, dtype=float)
    b = spec.b
    g = spec.lam * float(np.exp(gammaln(b)))
    flat = np.atleast_1d(t_arr)
    out = np.array([beta * _ml(b, 1.0, g * ti**b) for ti in flat]).reshape(t_arr.shape)
    return out if out.shape else float(out)


def _check_uniform(t):
    t = np.asarray(t, dtype=float)
    if t.ndim != 1 or t.size < 2:
        raise ContractError("time grid must be a 1-D array with >= 2 nodes")
    steps = np.diff(t)
    if not np.allclose(steps, steps[0], rtol=1e-10, atol=0):
        raise ContractError("time grid must be uniform")
    return t, float(steps[0])


def gronwall_solve(spec, t, beta):
    """Solve f = beta + int_0^t K(t-s) beta(s) ds on a uniform grid with t[0] = 0.

    Product quadrature: the kernel factor is integrated exactly on every cell
    through its primitive, against the trapezoidal average of beta.  Constant
    beta is therefore reproduced exactly up to the Mittag-Leffler tolerance.
    """
    t, dt = _check_uniform(t)
    if t[0] != 0.0:
        raise ContractError("gronwall_solve expects the grid to start at 0")
    beta = np.asarray(beta, dtype=float)
    if beta.shape != t.shape:
        raise ContractError("beta must be sampled on the time grid")
    if not np.all(np.isfinite(beta)):
        raise ContractError("beta must be finite on the grid")
    n = t.size
    prim = resolvent_primitive(spec, t)
    cell_weights = np.diff(prim)  # int over (m dt, (m+1) dt) of K
    beta_bar = 0.5 * (beta[:-1] + beta[1:])
    conv = np.convolve(beta_bar, cell_weights)
    f = beta.copy()
    f[1:] += conv[: n - 1]
    return f


def contraction_solve(spec, T, epsilon, t, beta):
    """Solve the window-localized resolvent equation on a uniform grid.

    f(t) = beta(t) outside (T - eps, T]; inside, the memory integral starts at
    T - eps and the kernel rate is ``lam * eps^(-b)``.
    """
    if not (0 < epsilon < T):
        raise DomainError("epsilon must lie in (0, T)")
    t, dt = _check_uniform(t)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != t.shape:
        raise ContractError("beta must be sampled on the time grid")
    s0 = T - epsilon
    scaled = ResolventSpec(spec.alpha, spec.lam * epsilon ** (-spec.b))
    f = beta.copy()
    inside = np.nonzero(t > s0)[0]
    if inside.size == 0:
        return f
    j0 = inside[0]
    beta_s0 = float(np.interp(s0, t, beta))
    # primitives at all needed lags: grid multiples plus the offset to s0
    n_in = int(inside[-1]) - j0 + 1
    prim_grid = resolvent_primitive(scaled, dt * np.arange(n_in + 1))
    off0 = t[j0] - s0
    prim_off = resolvent_primitive(scaled, off0 + dt * np.arange(n_in))
    for k in inside:
        tk = t[k]
        if tk > T + 1e-12 * max(T, 1.0):
            break
        m = k - j0  # grid nodes t[j0] .. t[k] at lags m dt .. 0
        vals = np.concatenate(([beta_s0], beta[j0 : k + 1]))
        prim = np.concatenate(([prim_off[m]], prim_grid[m::-1]))
        weights = prim[:-1] - prim[1:]
        f[k] = beta[k] + float(np.dot(0.5 * (vals[:-1] + vals[1:]), weights))
    return f


def heat_double_integral(nu, t):
    """int_0^t int_{-t}^t (2 pi nu s)^(-1/2) exp(-y^2/(2 nu s)) dy ds, in closed form."""
    nu_arr = np.asarray(nu, dtype=float)
    t_arr = np.asarray(t, dtype=float)
    if np.any(nu_arr <= 0) or np.any(t_arr <= 0):
        raise DomainError("heat_double_integral needs nu > 0 and t > 0")
    r = t_arr / nu_arr
    out = t_arr * (
        2.0 * (r + 1.0) * ndtr(np.sqrt(r))
        - 2.0 * r
        + np.sqrt(2.0 / np.pi) * np.exp(-r / 2.0) * np.sqrt(r)
        - 1.0
    )
    return out if out.shape else float(out)
