"""Monte Carlo ensembles and the statistical probes built on them: kernel
density estimates, small-ball probabilities, negative moments, the density
threshold time, Holder exponents, and Malliavin-determinant statistics.

Every ensemble is a deterministic function of (master seed, run description);
path index k always uses the counter-based stream (master_seed, k).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError
from .noise_initial import j0_slice
from .spde_solver import SchemeOptions, malliavin_matrix, simulate_batch

__all__ = [
    "SimulationRun",
    "PointValues",
    "Infimum",
    "FieldStats",
    "IncrementNorms",
    "DetSigma",
    "Ensemble",
    "run_ensemble",
    "DensityEstimate",
    "kde",
    "wilson_interval",
    "small_ball",
    "negative_moment",
    "estimate_t0",
    "holder_exponent",
    "det_sigma_smallball",
]


@dataclass(frozen=True)
class SimulationRun:
    """Everything one path needs except its noise keys."""

    params: object
    rho: object
    mu: object
    table: object
    grid: object
    drift: object = None
    opts: SchemeOptions = SchemeOptions(keep_trajectory=False)


@dataclass(frozen=True)
class PointValues:
    t: float
    xs: tuple

    kind = "point_values"


@dataclass(frozen=True)
class Infimum:
    t: float
    window: tuple

    kind = "infimum"


@dataclass(frozen=True)
class FieldStats:
    kind = "field_stats"  # per path: negative-cell fraction, clipped fraction


@dataclass(frozen=True)
class IncrementNorms:
    x: float
    t_base: float
    lags: tuple

    kind = "increment_norms"


@dataclass(frozen=True)
class DetSigma:
    points: tuple
    t: float
    window_t: tuple
    window_x: tuple
    stride: tuple = (4, 4)

    kind = "det_sigma"


@dataclass
class Ensemble:
    observable: object
    samples: np.ndarray  # (M,) or (M, d)
    master_seed: int
    path_indices: np.ndarray
    failed: np.ndarray
    config_digest: str = ""
    extra: dict = field(default_factory=dict)


def _snapshot_times(observable):
    if isinstance(observable, PointValues):
        return [observable.t]
    if isinstance(observable, Infimum):
        return [observable.t]
    if isinstance(observable, FieldStats):
        return []
    if isinstance(observable, IncrementNorms):
        return [observable.t_base] + [observable.t_base + h for h in observable.lags]
    raise ContractError(f"unsupported observable {observable!r}")


def run_ensemble(run, observable, n_paths, master_seed, n_threads=1,
                 chunk_size=500, config_digest=""):
    """Simulate n_paths independent paths and extract the observable.

    Paths that diverge are masked out (``failed``) with NaN samples rather
    than aborting the ensemble.
    """
    if n_paths < 2:
        raise DomainError("an ensemble needs at least two paths")
    if isinstance(observable, DetSigma):
        res = malliavin_matrix(
            run.params, run.rho, run.mu, run.table, run.grid, master_seed,
            np.arange(n_paths), observable.points, observable.t,
            observable.window_t, observable.window_x, observable.stride,
            opts=run.opts, n_threads=n_threads,
        )
        return Ensemble(
            observable=observable,
            samples=res.det,
            master_seed=master_seed,
            path_indices=np.arange(n_paths),
            failed=np.zeros(n_paths, dtype=bool),
            config_digest=config_digest,
            extra={"sigma": res.sigma, "cells": res.cells},
        )
    times = _snapshot_times(observable)
    grid = run.grid
    chunks = np.array_split(np.arange(n_paths), max(1, int(np.ceil(n_paths / chunk_size))))
    parts, failed, stats_all = [], [], []
    for chunk in chunks:
        br = simulate_batch(
            run.params, run.rho, run.mu, run.table, grid, master_seed, chunk,
            times, drift=run.drift, opts=run.opts, n_threads=n_threads,
        )
        failed.append(br.failed)
        stats_all.extend(br.stats)
        if isinstance(observable, PointValues):
            cols = [grid.x_index(x) for x in observable.xs]
            parts.append(br.snapshots[:, 0, cols])
        elif isinstance(observable, Infimum):
            lo, hi = observable.window
            sel = (grid.x_grid >= lo - 1e-12) & (grid.x_grid <= hi + 1e-12)
            parts.append(br.snapshots[:, 0, sel].min(axis=1))
        elif isinstance(observable, FieldStats):
            parts.append(
                np.array([[s.negative_fraction, s.clipped_fraction] for s in br.stats])
            )
        elif isinstance(observable, IncrementNorms):
            base = br.snapshots[:, 0, grid.x_index(observable.x)]
            lag_vals = br.snapshots[:, 1:, grid.x_index(observable.x)]
            parts.append(lag_vals - base[:, None])
    samples = np.concatenate(parts, axis=0)
    failed = np.concatenate(failed)
    if samples.ndim == 1:
        samples = np.where(failed, np.nan, samples)
    else:
        samples = np.where(failed[:, None], np.nan, samples)
    return Ensemble(
        observable=observable,
        samples=samples,
        master_seed=master_seed,
        path_indices=np.arange(n_paths),
        failed=failed,
        config_digest=config_digest,
        extra={"stats": stats_all},
    )


@dataclass
class DensityEstimate:
    grid: np.ndarray
    values: np.ndarray
    bandwidth: object
    kernel_id: str = "gaussian"

    def at(self, y):
        return float(np.interp(y, self.grid, self.values))

    def mass(self):
        return float(np.trapezoid(self.values, self.grid))


def _silverman(x):
    n = x.size
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    a = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * a * n ** (-0.2)


def kde(samples, bandwidth="silverman", n_grid=512, span=5.0):
    """Gaussian-kernel density estimate; product kernels for d <= 3.

    Returns a one-dimensional estimate for vector samples evaluated on a
    regular grid; for d > 1 the grid is a list per axis and values an array.
    """
    x = np.asarray(samples, dtype=float)
    x = x[~np.isnan(x)] if x.ndim == 1 else x[~np.isnan(x).any(axis=1)]
    if x.ndim == 1:
        if x.size < 100:
            raise ContractError("kde needs at least 100 samples")
        if x.std(ddof=1) == 0:
            raise ContractError("kde sample is degenerate (zero variance)")
        bw = _silverman(x) if bandwidth == "silverman" else float(bandwidth)
        grid = np.linspace(x.min() - span * bw, x.max() + span * bw, n_grid)
        z = (grid[:, None] - x[None, :]) / bw
        vals = np.exp(-0.5 * z * z).sum(axis=1) / (x.size * bw * np.sqrt(2 * np.pi))
        return DensityEstimate(grid=grid, values=vals, bandwidth=bw)
    n, d = x.shape
    if d > 3:
        raise ContractError("product-kernel kde supports d <= 3")
    if n < 100:
        raise ContractError("kde needs at least 100 samples")
    bws = [(_silverman(x[:, j]) if bandwidth == "silverman" else float(bandwidth)) for j in range(d)]
    grids = [
        np.linspace(x[:, j].min() - span * bws[j], x[:, j].max() + span * bws[j], n_grid)
        for j in range(d)
    ]
    mesh = np.meshgrid(*grids, indexing="ij")
    vals = np.zeros(mesh[0].shape)
    for i in range(n):
        term = np.ones(mesh[0].shape)
        for j in range(d):
            zj = (mesh[j] - x[i, j]) / bws[j]
            term *= np.exp(-0.5 * zj * zj) / (bws[j] * np.sqrt(2 * np.pi))
        vals += term
    vals /= n
    return DensityEstimate(grid=grids, values=vals, bandwidth=bws)


def wilson_interval(k, n, z=1.96):
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise DomainError("n must be positive")
    p = k / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(center - half, 0.0), min(center + half, 1.0)


def small_ball(samples, eps_list, z=1.96):
    """Empirical P(sample < eps) with Wilson confidence intervals."""
    x = np.asarray(samples, dtype=float)
    x = x[~np.isnan(x)]
    n = x.size
    out = []
    for eps in eps_list:
        k = int((x < eps).sum())
        lo, hi = wilson_interval(k, n, z)
        out.append((float(eps), k / n, lo, hi))
    return out


def negative_moment(samples, p_list, instability_share=0.5):
    """Empirical E[X^-p] with jackknife errors and a heavy-tail stability flag.

    Nonpositive samples are excluded and reported; the flag trips when the top
    1% of the X^-p mass carries more than ``instability_share`` of the total.
    """
    x = np.asarray(samples, dtype=float)
    x = x[~np.isnan(x)]
    bad = x <= 0
    xpos = x[~bad]
    results = []
    for p in p_list:
        w = xpos ** (-float(p))
        n = w.size
        est = float(w.mean())
        jack = (w.sum() - w) / (n - 1)
        se = float(np.sqrt((n - 1) / n * ((jack - jack.mean()) ** 2).sum()))
        top = np.sort(w)[-max(1, n // 100):].sum()
        results.append(
            {
                "p": float(p),
                "estimate": est,
                "stderr": se,
                "unstable": bool(top / w.sum() > instability_share),
            }
        )
    return {"moments": results, "nonpositive_fraction": float(bad.mean())}


def estimate_t0(rho, mu, table, s_grid, y_grid, zero_tol=1e-12):
    """First grid time at which the noise coefficient wakes up on the
    deterministic flow: smallest s with sup_y |rho(s, y, J0(s, y))| > tol."""
    s_grid = np.asarray(s_grid, dtype=float)
    y_grid = np.asarray(y_grid, dtype=float)
    if np.any(s_grid <= 0):
        raise DomainError("s_grid times must be positive")
    for s in np.sort(s_grid):
        j0 = j0_slice(mu, table, float(s), y_grid)
        vals = np.abs(np.asarray(rho.eval(float(s), y_grid, j0), dtype=float))
        if vals.max() > zero_tol:
            return float(s)
    return np.inf


def fit_loglog(h, norms):
    """Least-squares slope of log norms against log h."""
    lh = np.log(np.asarray(h, dtype=float))
    ln = np.log(np.asarray(norms, dtype=float))
    A = np.vstack([lh, np.ones_like(lh)]).T
    slope, intercept = np.linalg.lstsq(A, ln, rcond=None)[0]
    return float(slope), float(intercept)


def holder_exponent(increments, lags):
    """Fitted time-regularity exponent from per-path increments.

    increments: (M, n_lags) samples of u(t+h, x) - u(t, x); the exponent is
    the log-log slope of the empirical L2 norms, with a delete-one jackknife
    confidence interval over paths.
    """
    inc = np.asarray(increments, dtype=float)
    inc = inc[~np.isnan(inc).any(axis=1)]
    if len(lags) < 3:
        raise ContractError("need at least 3 lags to fit an exponent")
    m = inc.shape[0]
    sq = inc**2
    mean_sq = sq.mean(axis=0)
    slope, _ = fit_loglog(lags, np.sqrt(mean_sq))
    # delete-one jackknife, vectorized over paths
    loo = (sq.sum(axis=0)[None, :] - sq) / (m - 1)
    lh = np.log(np.asarray(lags, dtype=float))
    ln = 0.5 * np.log(loo)
    lh_c = lh - lh.mean()
    slopes = (ln @ lh_c) / (lh_c @ lh_c)
    se = np.sqrt((m - 1) / m * ((slopes - slopes.mean()) ** 2).sum())
    return {
        "slope": slope,
        "stderr": float(se),
        "ci95": (slope - 1.96 * float(se), slope + 1.96 * float(se)),
        "norms": np.sqrt(mean_sq),
    }


def det_sigma_smallball(det_samples, eps_list, z=1.96):
    """Small-ball curve of the Malliavin determinant with a concavity
    diagnostic of log P against log eps."""
    rows = small_ball(det_samples, eps_list, z)
    probs = np.array([r[1] for r in rows])
    eps = np.array([r[0] for r in rows])
    order = np.argsort(eps)
    le = np.log(eps[order])
    positive = probs[order] > 0
    lp = np.where(positive, np.log(np.maximum(probs[order], 1e-300)), -np.inf)
    second_diffs = []
    for i in range(1, len(eps) - 1):
        if positive[i - 1] and positive[i] and positive[i + 1]:
            d2 = (lp[i + 1] - lp[i]) / (le[i + 1] - le[i]) - (lp[i] - lp[i - 1]) / (
                le[i] - le[i - 1]
            )
            second_diffs.append(d2)
    return {
        "rows": rows,
        "log_concave_down": bool(all(d <= 1e-9 for d in second_diffs)) if second_diffs else None,
        "second_diffs": second_diffs,
    }
