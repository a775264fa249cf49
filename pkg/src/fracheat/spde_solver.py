"""Mild-form time stepping for the semilinear equation, coupled pairs sharing
one noise, Picard iteration for cross-validation, first-variation (Malliavin)
fields, and localized Malliavin matrices.

The scheme is the one-step mild recursion

    u^{k+1} = G(dt) (*) [ u^k + rho(u^k) dW_k / dx + dt rho(u^k) drift_k ]

with (*) the dx-weighted spatial convolution, the state u^0 = J0(dt, .) taken
analytically (the time origin is shifted by one step so measure-valued data
never touch the lattice), and noise evaluated at the left endpoint of each
time cell.  States live on the open-left time grid dt, 2dt, ..., T.  The
domain is truncated to [-L, L] with zero inflow beyond.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._backend import get_kernels
from .errors import ContractError, DivergenceError, DomainError
from .moment_kernel import SpaceTimeField, SpaceTimeGrid
from .noise_initial import (
    Combination,
    DensityMeasure,
    DiracAtoms,
    check_admissible,
    j0_field,
    j0_slice,
)
from .stable_kernel import kernel_value

__all__ = [
    "DiffusionCoefficient",
    "pam_coefficient",
    "constant_coefficient",
    "sin_coefficient",
    "abs_sin_coefficient",
    "custom_coefficient",
    "SchemeOptions",
    "SolutionField",
    "MalliavinField",
    "BatchResult",
    "step_kernel_row",
    "simulate_path",
    "simulate_batch",
    "simulate_coupled_pair",
    "picard_solve",
    "simulate_malliavin",
    "malliavin_matrix",
]

# Kernel-row entries below peak * this are dropped from the one-step operator.
# The cut sits at the table's round-off floor, so for light tails it removes
# only fictitious envelope crumbs (per-step mass error ~1e-15); heavy algebraic
# tails stay above it and keep their full width.
_KERNEL_TRIM = 2e-14


@dataclass(frozen=True)
class DiffusionCoefficient:
    """Multiplicative noise coefficient rho(t, x, z) with its constants.

    ``kernel_id``/``a`` select a compiled fast path when the coefficient is
    one of the built-in shapes; arbitrary callables run on the python backend.
    """

    eval: callable
    lip: float
    growth_vv: float = 0.0
    deriv: callable = None
    kernel_id: int = -1
    a: float = 0.0
    is_pam: bool = False
    pam_lambda: float = 0.0
    label: str = "custom"


def pam_coefficient(lam):
    """rho(u) = lam * u (multiplicative / Anderson-type coefficient)."""
    return DiffusionCoefficient(
        eval=lambda t, x, z: lam * z,
        lip=abs(lam),
        growth_vv=0.0,
        deriv=lambda t, x, z: np.full_like(np.asarray(z, float), lam),
        kernel_id=1,
        a=lam,
        is_pam=True,
        pam_lambda=lam,
        label=f"pam({lam})",
    )


def constant_coefficient(c):
    """rho = c (additive noise)."""
    return DiffusionCoefficient(
        eval=lambda t, x, z: np.full_like(np.asarray(z, float), c),
        lip=max(abs(c), 1e-300),
        growth_vv=abs(c),
        deriv=lambda t, x, z: np.zeros_like(np.asarray(z, float)),
        kernel_id=0,
        a=c,
        label=f"const({c})",
    )


def sin_coefficient(scale=1.0):
    """rho(u) = scale * sin(u); smooth, bounded, rho(0) = 0."""
    return DiffusionCoefficient(
        eval=lambda t, x, z: scale * np.sin(z),
        lip=abs(scale),
        growth_vv=0.0,
        deriv=lambda t, x, z: scale * np.cos(z),
        kernel_id=2,
        a=scale,
        label=f"sin({scale})",
    )


def abs_sin_coefficient(scale=1.0):
    """rho(u) = scale * |sin(u)|; nonnegative, Lipschitz, rho(0) = 0."""
    return DiffusionCoefficient(
        eval=lambda t, x, z: scale * np.abs(np.sin(z)),
        lip=abs(scale),
        growth_vv=0.0,
        kernel_id=3,
        a=scale,
        label=f"abs_sin({scale})",
    )


def custom_coefficient(fn, lip, growth_vv=0.0, deriv=None, label="custom"):
    return DiffusionCoefficient(
        eval=fn, lip=lip, growth_vv=growth_vv, deriv=deriv, label=label
    )


@dataclass(frozen=True)
class SchemeOptions:
    positivity_clip: bool = False
    keep_trajectory: bool = True
    check_admissibility: bool = True
    backend: str = None


@dataclass
class PathStats:
    clipped_mass: float
    positive_mass: float
    negative_cells: int
    total_cells: int
    bad_state: int

    @property
    def negative_fraction(self):
        return self.negative_cells / max(self.total_cells, 1)

    @property
    def clipped_fraction(self):
        return self.clipped_mass / max(self.positive_mass, 1e-300)


@dataclass
class SolutionField:
    """One realization of u on the grid plus its provenance."""

    grid: SpaceTimeGrid
    values: np.ndarray  # (nt, nx) states at times dt .. T
    seed: tuple  # (master_seed, path_index)
    params: object
    rho: DiffusionCoefficient
    mu: object
    table: object
    options: SchemeOptions
    stats: PathStats
    drift: object = None
    _j0: SpaceTimeField = field(default=None, repr=False)

    @property
    def j0(self):
        """Analytic deterministic component on the same grid."""
        if self._j0 is None:
            self._j0 = j0_field(self.mu, self.table, self.grid)
        return self._j0

    def at(self, t, x):
        return float(self.values[self.grid.t_index(t), self.grid.x_index(x)])


@dataclass
class MalliavinField:
    """First-variation field for one noise cell (theta_index, xi_index)."""

    grid: SpaceTimeGrid
    source: tuple
    values: np.ndarray  # (nt, nx); zero for states <= theta_index
    base_seed: tuple


@dataclass
class BatchResult:
    snapshots: np.ndarray  # (P, n_snapshots, nx)
    snapshot_states: np.ndarray
    stats: list
    path_indices: np.ndarray
    failed: np.ndarray  # bool mask


def step_kernel_row(table, grid, trim=_KERNEL_TRIM):
    """One-step kernel row gk with gk[half + off] = G(dt, off dx), trimmed
    where the row is below peak * trim (the trimmed row defines the discrete
    operator used by both backends)."""
    nx = grid.nx
    offs = (np.arange(-(nx - 1), nx)) * grid.dx
    row = kernel_value(table, grid.dt, offs)
    thresh = row.max() * trim
    keep = np.nonzero(row >= thresh)[0]
    i0, i1 = keep[0], keep[-1]
    center = nx - 1
    i0 = min(i0, center)
    i1 = max(i1, center)
    return np.ascontiguousarray(row[i0 : i1 + 1]), int(center - i0)


def _validate_grid(table, grid):
    a = table.params.alpha
    if grid.dx > grid.dt ** (1.0 / a) * (1.0 + 1e-9):
        raise ContractError(
            f"dx={grid.dx} too coarse for dt={grid.dt}: need dx <= dt^(1/alpha)"
        )


def _rho_fn_for(rho, grid):
    x_row = grid.x_grid[None, :]

    def fn(k, u):
        t = (k + 1) * grid.dt
        return np.asarray(rho.eval(t, x_row, u), dtype=float)

    return fn


def _run_batch_raw(params, rho, mu, table, grid, master_seed, path_indices,
                   drift=None, opts=SchemeOptions(), snapshot_states=(),
                   keep_traj=False, n_threads=1, bump=None):
    """Drive a batch of paths; returns (u_final, snaps, stats arrays, traj)."""
    _validate_grid(table, grid)
    if opts.check_admissibility:
        rep = check_admissible(mu, params)
        if not rep.admissible:
            raise ContractError(f"initial measure inadmissible: diagnostic {rep.diagnostic:.3e}")
    kern = get_kernels(opts.backend)
    use_fast = rho.kernel_id >= 0 and kern.BACKEND == "ext"
    if rho.kernel_id < 0 and kern.BACKEND == "ext":
        kern = get_kernels("python")
    gk, half = step_kernel_row(table, grid)
    path_indices = np.asarray(path_indices, dtype=np.int64)
    P = path_indices.size
    nx = grid.nx
    nsteps = grid.nt - 1
    u0 = j0_slice(mu, table, grid.dt, grid.x_grid)
    u = np.tile(u0, (P, 1))
    snap_states = np.unique(np.asarray(list(snapshot_states), dtype=np.int64))
    snaps = np.zeros((P, snap_states.size, nx))
    for i, s in enumerate(snap_states):
        if s == 0:
            snaps[:, i, :] = u
    clip_acc = np.zeros(P)
    pos_acc = np.zeros(P)
    neg_acc = np.zeros(P, dtype=np.int64)
    cell_acc = np.zeros(P, dtype=np.int64)
    bad = np.full(P, -1, dtype=np.int64)
    traj = np.zeros((P, nsteps + 1, nx)) if keep_traj else None
    drift_vals = None if drift is None else np.ascontiguousarray(drift.values)
    if drift_vals is not None and drift_vals.shape != (nsteps, nx):
        raise ContractError("drift field shape does not match the grid")
    bump_k, bump_j, bump_amount = (-1, 0, 0.0) if bump is None else bump
    rho_fn = None if use_fast or rho.kernel_id >= 0 else _rho_fn_for(rho, grid)
    kind = rho.kernel_id if rho.kernel_id >= 0 else -1

    def run_slice(sl):
        kern.run_chunk(
            u[sl], master_seed, path_indices[sl], 0, nsteps, gk, half,
            grid.dt, grid.dx, kind, rho.a, drift_vals, opts.positivity_clip,
            snap_states, snaps[sl], clip_acc[sl], pos_acc[sl],
            neg_acc[sl], cell_acc[sl], None if traj is None else traj[sl],
            bump_k, bump_j, bump_amount, bad[sl], rho_fn,
        )

    if n_threads > 1 and P > 1:
        chunks = np.array_split(np.arange(P), min(n_threads, P))
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(lambda idx: run_slice(idx), [slice(c[0], c[-1] + 1) for c in chunks if c.size]))
    else:
        run_slice(slice(0, P))
    return u, snaps, snap_states, clip_acc, pos_acc, neg_acc, cell_acc, bad, traj


def _stats_from(clip_acc, pos_acc, neg_acc, cell_acc, bad, i):
    return PathStats(
        clipped_mass=float(clip_acc[i]),
        positive_mass=float(pos_acc[i]),
        negative_cells=int(neg_acc[i]),
        total_cells=int(cell_acc[i]),
        bad_state=int(bad[i]),
    )


def simulate_path(params, rho, mu, table, grid, noise, drift=None,
                  opts=SchemeOptions()):
    """One realization of u with the full trajectory retained.

    ``noise`` carries the (master_seed, path_index) keys; its increments are
    identical to what the batched driver regenerates from the same keys.
    """
    if noise.grid.nt != grid.nt or noise.grid.nx != grid.nx:
        raise ContractError("noise path grid does not match the run grid")
    out = _run_batch_raw(
        params, rho, mu, table, grid, noise.master_seed, [noise.path_index],
        drift=drift, opts=opts, keep_traj=True,
    )
    u, snaps, snap_states, clip_acc, pos_acc, neg_acc, cell_acc, bad, traj = out
    if bad[0] >= 0:
        raise DivergenceError(
            f"non-finite value at state {bad[0]}",
            path_index=noise.path_index,
            state_index=int(bad[0]),
        )
    return SolutionField(
        grid=grid, values=traj[0], seed=(noise.master_seed, noise.path_index),
        params=params, rho=rho, mu=mu, table=table, options=opts,
        stats=_stats_from(clip_acc, pos_acc, neg_acc, cell_acc, bad, 0),
        drift=drift,
    )


def simulate_batch(params, rho, mu, table, grid, master_seed, path_indices,
                   snapshot_times, drift=None, opts=SchemeOptions(keep_trajectory=False),
                   n_threads=1):
    """Independent paths, capturing the state at the requested grid times."""
    requested = np.asarray([grid.t_index(t) for t in snapshot_times], dtype=np.int64)
    out = _run_batch_raw(
        params, rho, mu, table, grid, master_seed, path_indices,
        drift=drift, opts=opts, snapshot_states=requested, n_threads=n_threads,
    )
    u, snaps, snap_states_arr, clip_acc, pos_acc, neg_acc, cell_acc, bad, _ = out
    # snaps columns follow the sorted unique states; gather the caller's order
    cols = np.searchsorted(snap_states_arr, requested)
    snaps = snaps[:, cols, :]
    stats = [_stats_from(clip_acc, pos_acc, neg_acc, cell_acc, bad, i)
             for i in range(len(path_indices))]
    return BatchResult(
        snapshots=snaps,
        snapshot_states=requested,
        stats=stats,
        path_indices=np.asarray(path_indices, dtype=np.int64),
        failed=bad >= 0,
    )


def _measure_parts(mu):
    return list(mu.parts) if isinstance(mu, Combination) else [mu]


def _dominates(mu1, mu2, probe=None):
    """Best-effort check that mu1 - mu2 is a nonnegative measure."""
    if probe is None:
        probe = np.linspace(-16, 16, 257)
    parts1 = _measure_parts(mu1)
    parts2 = _measure_parts(mu2)
    remaining = list(parts1)
    for p2 in parts2:
        matched = False
        for p1 in list(remaining):
            if isinstance(p1, DiracAtoms) and isinstance(p2, DiracAtoms):
                locs1 = dict(p1.atoms)
                if all(loc in locs1 and locs1[loc] >= m - 1e-15 for loc, m in p2.atoms):
                    rest = tuple(
                        (loc, mm - dict(p2.atoms).get(loc, 0.0)) for loc, mm in p1.atoms
                    )
                    remaining.remove(p1)
                    if any(m < -1e-15 for _, m in rest):
                        return False
                    matched = True
                    break
            elif isinstance(p1, DensityMeasure) and isinstance(p2, DensityMeasure):
                if np.all(p1.eval(probe) >= p2.eval(probe) - 1e-12):
                    remaining.remove(p1)
                    matched = True
                    break
        if not matched:
            return None
    for p in remaining:
        if isinstance(p, DiracAtoms):
            if any(m < 0 for _, m in p.atoms):
                return False
        elif isinstance(p, DensityMeasure):
            if np.any(p.eval(probe) < -1e-12):
                return False
        else:
            return None
    return True


def simulate_coupled_pair(params, rho, mu1, mu2, table, grid, noise,
                          drift=None, opts=SchemeOptions()):
    """Two runs driven by the identical increments, for ordering experiments.

    Requires mu1 >= mu2 >= 0 (as far as the measure kinds allow checking).
    """
    dom = _dominates(mu1, mu2)
    if dom is None:
        raise ContractError("cannot verify measure ordering for these kinds")
    if not dom:
        raise ContractError("mu1 does not dominate mu2")
    f1 = simulate_path(params, rho, mu1, table, grid, noise, drift, opts)
    f2 = simulate_path(params, rho, mu2, table, grid, noise, drift, opts)
    return f1, f2


def picard_solve(params, rho, mu, table, grid, noise, m_iterations,
                 opts=SchemeOptions()):
    """Fixed-point iteration of the mild form with the full stochastic
    convolution re-evaluated from the same noise each sweep.

    Cost is O(m nt^2 nx log nx); meant for small grids as a cross-check of
    the one-step scheme.  Returns (field, gaps) with gaps the sup-norm steps.
    """
    _validate_grid(table, grid)
    nt, nx = grid.nt, grid.nx
    dw = noise.increments / grid.dx  # (nt-1, nx)
    j0 = j0_field(mu, table, grid).values
    offs = (np.arange(-(nx - 1), nx)) * grid.dx
    rows = np.array([kernel_value(table, m * grid.dt, offs) for m in range(1, nt)])
    u_prev = j0.copy()
    gaps = []
    x_row = grid.x_grid[None, :]
    from scipy.signal import fftconvolve

    u_m = u_prev
    for _ in range(m_iterations):
        rho_dw = np.empty((nt - 1, nx))
        for j in range(nt - 1):
            rho_dw[j] = rho.eval((j + 1) * grid.dt, x_row[0], u_prev[j]) * dw[j]
        u_m = j0.copy()
        for k in range(1, nt):
            acc = np.zeros(nx)
            for j in range(k):
                conv = fftconvolve(rho_dw[j], rows[k - j - 1], mode="full")
                acc += conv[nx - 1 : 2 * nx - 1]
            u_m[k] += acc * grid.dx
        gaps.append(float(np.abs(u_m - u_prev).max()))
        u_prev = u_m
    stats = PathStats(0.0, float(np.maximum(u_m, 0).sum() * grid.dx * grid.dt),
                      int((u_m < 0).sum()), int(u_m.size), -1)
    return (
        SolutionField(
            grid=grid, values=u_m, seed=(noise.master_seed, noise.path_index),
            params=params, rho=rho, mu=mu, table=table, options=opts, stats=stats,
        ),
        gaps,
    )


def simulate_malliavin(base, cell):
    """First-variation field of the scheme w.r.t. one noise increment.

    Solves the linear recursion with coefficient rho'(u) along the retained
    base trajectory, re-reading the base increments from the counter-based
    generator.  The source enters through the one-step kernel row (the exact
    derivative of the discrete scheme w.r.t. dW at that cell).
    """
    rho = base.rho
    if rho.deriv is None and rho.kernel_id not in (0, 1, 2):
        raise ContractError("diffusion coefficient has no derivative")
    grid = base.grid
    theta_k, xi_j = cell
    nsteps_total = grid.nt - 1
    if not (0 <= theta_k < nsteps_total):
        raise ContractError("source time cell outside the grid")
    if not (0 <= xi_j < grid.nx):
        raise ContractError("source space cell outside the grid")
    kern = get_kernels(base.options.backend)
    if rho.kernel_id < 0 and kern.BACKEND == "ext":
        kern = get_kernels("python")
    gk, half = step_kernel_row(base.table, grid)
    nx = grid.nx
    t_theta = (theta_k + 1) * grid.dt
    xi = grid.x_grid[xi_j]
    rho_at_source = float(
        np.asarray(rho.eval(t_theta, xi, base.values[theta_k, xi_j])).reshape(())
    )
    d0 = np.zeros(nx)
    lo = max(0, xi_j - half)
    hi = min(nx, xi_j + (gk.size - half))
    d0[lo:hi] = rho_at_source * gk[lo - xi_j + half : hi - xi_j + half]
    d = d0[None, :].copy()
    base_traj = base.values[None, :, :]
    nsteps = nsteps_total - (theta_k + 1)
    traj = np.zeros((1, nsteps + 1, nx))
    rho_deriv_fn = None
    if rho.kernel_id < 0:
        x_row = grid.x_grid[None, :]

        def rho_deriv_fn(k, u):  # noqa: F811
            return np.asarray(rho.deriv((k + 1) * grid.dt, x_row, u), dtype=float)

    kern.run_malliavin_chunk(
        d, np.ascontiguousarray(base_traj), 0, base.seed[0],
        np.asarray([base.seed[1]], dtype=np.int64), theta_k + 1, nsteps,
        gk, half, grid.dt, grid.dx, rho.kernel_id, rho.a, traj, rho_deriv_fn,
    )
    values = np.zeros((grid.nt, nx))
    values[theta_k + 1 :, :] = traj[0]
    return MalliavinField(grid=grid, source=(theta_k, xi_j), values=values,
                          base_seed=base.seed)


@dataclass
class MalliavinMatrixResult:
    sigma: np.ndarray  # (P, d, d)
    det: np.ndarray  # (P,)
    cells: list  # sampled (theta_k, xi_j)
    cell_weight: float
    points: tuple


def malliavin_matrix(params, rho, mu, table, grid, master_seed, path_indices,
                     points, t_eval, window_t, window_x, stride=(4, 4),
                     opts=SchemeOptions(), n_threads=1):
    """Localized Malliavin matrices over a space-time window, batched over paths.

    sigma_ij = sum over sampled cells (r, z) of D_{r,z} u(t, x_i) D_{r,z} u(t, x_j)
    weighted by the subsampled cell area (stride_t * dt) * (stride_x * dx).
    """
    if rho.deriv is None and rho.kernel_id not in (0, 1, 2):
        raise ContractError("diffusion coefficient has no derivative")
    points = tuple(points)
    d = len(points)
    k_eval = grid.t_index(t_eval)
    lo_t, hi_t = window_t
    lo_x, hi_x = window_x
    stride_t, stride_x = stride
    # noise steps whose slab [(k+1) dt, (k+2) dt] lies inside the window
    steps = [
        k for k in range(grid.nt - 1)
        if lo_t - 1e-12 <= (k + 1) * grid.dt and (k + 2) * grid.dt <= hi_t + 1e-12
        and k + 1 <= k_eval
    ]
    cols = [j for j, x in enumerate(grid.x_grid) if lo_x - 1e-12 <= x <= hi_x + 1e-12]
    steps = steps[::stride_t]
    cols = cols[::stride_x]
    if not steps or not cols:
        raise ContractError("empty Malliavin window")
    point_cols = [grid.x_index(x) for x in points]
    path_indices = np.asarray(path_indices, dtype=np.int64)
    P = path_indices.size
    kern = get_kernels(opts.backend)
    if rho.kernel_id < 0 and kern.BACKEND == "ext":
        kern = get_kernels("python")
    gk, half = step_kernel_row(table, grid)
    nx = grid.nx
    # base trajectories for the whole batch (needed along [min step, t_eval])
    out = _run_batch_raw(params, rho, mu, table, grid, master_seed, path_indices,
                         opts=opts, keep_traj=True, n_threads=n_threads)
    traj = out[8]
    bad = out[7]
    if np.any(bad >= 0):
        first = int(np.nonzero(bad >= 0)[0][0])
        raise DivergenceError("base path diverged", path_index=int(path_indices[first]),
                              state_index=int(bad[first]))
    rho_deriv_fn = None
    if rho.kernel_id < 0:
        x_row = grid.x_grid[None, :]

        def rho_deriv_fn(k, u):  # noqa: F811
            return np.asarray(rho.deriv((k + 1) * grid.dt, x_row, u), dtype=float)

    sigma = np.zeros((P, d, d))
    cells = []
    for theta_k in steps:
        t_theta = (theta_k + 1) * grid.dt
        for xi_j in cols:
            cells.append((theta_k, xi_j))
            xi = grid.x_grid[xi_j]
            rho_src = np.asarray(
                rho.eval(t_theta, xi, traj[:, theta_k, xi_j]), dtype=float
            ).reshape(P)
            dmat = np.zeros((P, nx))
            lo = max(0, xi_j - half)
            hi = min(nx, xi_j + (gk.size - half))
            dmat[:, lo:hi] = rho_src[:, None] * gk[None, lo - xi_j + half : hi - xi_j + half]
            nsteps = k_eval - (theta_k + 1)
            if nsteps > 0:
                kern.run_malliavin_chunk(
                    dmat, traj, 0, master_seed, path_indices, theta_k + 1, nsteps,
                    gk, half, grid.dt, grid.dx, rho.kernel_id, rho.a, None,
                    rho_deriv_fn,
                )
            dvals = dmat[:, point_cols]  # (P, d)
            sigma += dvals[:, :, None] * dvals[:, None, :]
    weight = (stride_t * grid.dt) * (stride_x * grid.dx)
    sigma *= weight
    det = np.linalg.det(sigma)
    return MalliavinMatrixResult(sigma=sigma, det=det, cells=cells,
                                 cell_weight=weight, points=points)
