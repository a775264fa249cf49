"""Pure numpy implementation of the hot kernels.

This module is the fallback twin of the compiled extension ``fracheat._kernels``.
Both expose the same functions with identical semantics:

* a stateless Philox4x32-10 counter-based generator keyed on
  ``(master_seed, path_index, time_step, space_cell)`` so that any noise cell
  can be regenerated in isolation,
* the one-step mild-scheme time loop for a batch of independent paths,
* the matching linear (first-variation) time loop that re-reads the base
  path's increments.

Raw generator words are bit-identical between the two backends.  Floating
point results of the solvers agree to roundoff (summation order differs).
"""

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import ndtri

BACKEND = "python"

_MASK32 = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_INV53 = 1.0 / 9007199254740992.0  # 2^-53

RHO_CONST = 0
RHO_PAM = 1
RHO_SIN = 2
RHO_ABS_SIN = 3


def philox4x32(c0, c1, c2, c3, k0, k1):
    """Philox4x32-10 block cipher; all arguments uint64 arrays holding u32 values.

    Returns the four output words as uint64 arrays (values < 2^32).
    """
    c0 = np.asarray(c0, dtype=np.uint64)
    c1, c2, c3 = (np.asarray(c, dtype=np.uint64) for c in (c1, c2, c3))
    k0 = np.asarray(k0, dtype=np.uint64)
    k1 = np.asarray(k1, dtype=np.uint64)
    c0, c1, c2, c3, k0, k1 = np.broadcast_arrays(c0, c1, c2, c3, k0, k1)
    c0, c1, c2, c3 = c0.copy(), c1.copy(), c2.copy(), c3.copy()
    k0, k1 = k0.copy(), k1.copy()
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> np.uint64(32), p0 & _MASK32
        hi1, lo1 = p1 >> np.uint64(32), p1 & _MASK32
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = (k0 + _W0) & _MASK32
        k1 = (k1 + _W1) & _MASK32
    return c0, c1, c2, c3


def _uniforms_for_cells(seed, path, k, j):
    """Open-interval (0,1) uniforms for noise cells, one 53-bit draw per cell."""
    seed = np.uint64(seed)
    path = np.asarray(path, dtype=np.uint64)
    k = np.asarray(k, dtype=np.uint64)
    j = np.asarray(j, dtype=np.uint64)
    pair = j >> np.uint64(1)
    y0, y1, y2, y3 = philox4x32(
        pair,
        k,
        path & _MASK32,
        path >> np.uint64(32),
        seed & _MASK32,
        seed >> np.uint64(32),
    )
    even = (j & np.uint64(1)) == 0
    v = np.where(even, (y0 << np.uint64(32)) | y1, (y2 << np.uint64(32)) | y3)
    return ((v >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53


def normals_cells(seed, path, k, j):
    """Standard normal draws for arbitrary noise cells (vectorized)."""
    return ndtri(_uniforms_for_cells(seed, path, k, j))


def normals_block(seed, paths, k, nx):
    """Standard normals for one time row k of every path: shape (len(paths), nx)."""
    paths = np.asarray(paths, dtype=np.uint64)[:, None]
    j = np.arange(nx, dtype=np.uint64)[None, :]
    return normals_cells(seed, paths, np.uint64(k), j)


def _rho_eval(kind, a, u):
    if kind == RHO_CONST:
        return np.full_like(u, a)
    if kind == RHO_PAM:
        return a * u
    if kind == RHO_SIN:
        return a * np.sin(u)
    if kind == RHO_ABS_SIN:
        return a * np.abs(np.sin(u))
    raise ValueError(f"unknown rho kind {kind}")


def _rho_deriv(kind, a, u):
    if kind == RHO_CONST:
        return np.zeros_like(u)
    if kind == RHO_PAM:
        return np.full_like(u, a)
    if kind == RHO_SIN:
        return a * np.cos(u)
    if kind == RHO_ABS_SIN:
        return a * np.sign(np.sin(u)) * np.cos(u)
    raise ValueError(f"unknown rho kind {kind}")


def _convolve_rows(w, gk, half, nx):
    out = fftconvolve(w, gk[None, :], mode="full")
    return out[:, half : half + nx]


def run_chunk(
    u,
    seed,
    paths,
    k0,
    nsteps,
    gk,
    half,
    dt,
    dx,
    rho_kind,
    rho_a,
    drift,
    clip,
    snap_states,
    snaps,
    clip_acc,
    pos_acc,
    neg_acc,
    cell_acc,
    traj,
    bump_k,
    bump_j,
    bump_amount,
    bad_state,
    rho_fn=None,
):
    """Advance a batch of paths ``nsteps`` one-step mild updates in place.

    u            : (P, nx) state at global state index k0, updated in place
    gk           : kernel row, gk[half + off] = G(dt, off*dx)
    drift        : (nsteps, nx) deterministic forcing already containing the
                   window weights, or None
    snap_states  : sorted int64 array of absolute state indices to capture
    snaps        : (P, len(snap_states), nx) output
    clip_acc/pos_acc : per-path accumulated clipped / positive mass
    neg_acc/cell_acc : per-path negative-cell and total-cell counters
    traj         : (P, nsteps + 1, nx) full trajectory output, or None
    bump_*       : optional additive perturbation of one noise increment
    bad_state    : (P,) int64, first non-finite state index or -1
    rho_fn       : optional vectorized callable rho(t, x_grid, u) used when
                   rho_kind < 0 (python backend only)
    """
    P, nx = u.shape
    noise_fac = np.sqrt(dt / dx)
    snap_pos = {int(s): i for i, s in enumerate(np.asarray(snap_states))}
    if traj is not None:
        traj[:, 0, :] = u
    for step in range(nsteps):
        k = k0 + step
        z = normals_block(seed, paths, k, nx)
        if rho_kind >= 0:
            r = _rho_eval(rho_kind, rho_a, u)
        else:
            r = rho_fn(k, u)
        w = u + r * (z * noise_fac)
        if drift is not None:
            w += dt * r * drift[step]
        if bump_amount != 0.0 and k == bump_k:
            w[:, bump_j] += r[:, bump_j] * (bump_amount / dx)
        unew = dx * _convolve_rows(w, gk, half, nx)
        if clip:
            neg = np.minimum(unew, 0.0)
            clip_acc += -neg.sum(axis=1) * dx
            np.maximum(unew, 0.0, out=unew)
        else:
            neg_acc += (unew < 0.0).sum(axis=1)
        pos_acc += np.maximum(unew, 0.0).sum(axis=1) * dx
        cell_acc += nx
        fresh_bad = ~np.isfinite(unew).all(axis=1) & (bad_state < 0)
        if fresh_bad.any():
            bad_state[fresh_bad] = k + 1
        u[:] = unew
        state = k + 1
        if traj is not None:
            traj[:, step + 1, :] = u
        pos = snap_pos.get(state)
        if pos is not None:
            snaps[:, pos, :] = u
    return u


def run_malliavin_chunk(
    d,
    base,
    base_offset,
    seed,
    paths,
    k0,
    nsteps,
    gk,
    half,
    dt,
    dx,
    rho_kind,
    rho_a,
    traj,
    rho_deriv_fn=None,
):
    """Advance the first-variation field ``d`` from state k0 by nsteps.

    d    : (P, nx) derivative field at state index k0, updated in place
    base : (P, S, nx) base-path states; state s lives at base[:, s - base_offset]
    The same counter-based generator re-reads the base path's increments.
    """
    P, nx = d.shape
    noise_fac = np.sqrt(dt / dx)
    if traj is not None:
        traj[:, 0, :] = d
    for step in range(nsteps):
        k = k0 + step
        z = normals_block(seed, paths, k, nx)
        ubase = base[:, k - base_offset, :]
        if rho_kind >= 0:
            rp = _rho_deriv(rho_kind, rho_a, ubase)
        else:
            rp = rho_deriv_fn(k, ubase)
        w = d + rp * d * (z * noise_fac)
        d[:] = dx * _convolve_rows(w, gk, half, nx)
        if traj is not None:
            traj[:, step + 1, :] = d
    return d
