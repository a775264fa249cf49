# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twin of ``fracheat._kernels_py``.

Same counter-based generator and the same one-step mild updates, written as
tight C loops.  Raw generator words and the normal draws are bit-identical
with the python backend (shared Philox integer arithmetic and the shared
scipy ``ndtri``); solver outputs differ only by floating-point summation
order.  All heavy loops release the GIL so callers can fan path chunks out
over a thread pool.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sin, cos, fabs, isfinite
from libc.stdint cimport uint32_t, uint64_t, int64_t
from scipy.special.cython_special cimport ndtri

cnp.import_array()

BACKEND = "ext"

cdef enum:
    _RHO_CONST = 0
    _RHO_PAM = 1
    _RHO_SIN = 2
    _RHO_ABS_SIN = 3

RHO_CONST = _RHO_CONST
RHO_PAM = _RHO_PAM
RHO_SIN = _RHO_SIN
RHO_ABS_SIN = _RHO_ABS_SIN

DEF INV53 = 1.0 / 9007199254740992.0

cdef uint32_t M0 = 0xD2511F53u
cdef uint32_t M1 = 0xCD9E8D57u
cdef uint32_t W0 = 0x9E3779B9u
cdef uint32_t W1 = 0xBB67AE85u


cdef inline void _philox(uint32_t c0, uint32_t c1, uint32_t c2, uint32_t c3,
                         uint32_t k0, uint32_t k1, uint32_t* out) noexcept nogil:
    cdef uint64_t p0, p1
    cdef uint32_t hi0, lo0, hi1, lo1
    cdef int r
    for r in range(10):
        p0 = (<uint64_t> M0) * c0
        p1 = (<uint64_t> M1) * c2
        hi0 = <uint32_t> (p0 >> 32)
        lo0 = <uint32_t> p0
        hi1 = <uint32_t> (p1 >> 32)
        lo1 = <uint32_t> p1
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        k0 = k0 + W0
        k1 = k1 + W1
    out[0] = c0
    out[1] = c1
    out[2] = c2
    out[3] = c3


cdef inline void _cell_pair(uint64_t seed, uint64_t path, uint32_t k, uint32_t pair,
                            double* z0, double* z1) noexcept nogil:
    cdef uint32_t o[4]
    cdef uint64_t v0, v1
    cdef double u0, u1
    _philox(pair, k, <uint32_t> path, <uint32_t> (path >> 32),
            <uint32_t> seed, <uint32_t> (seed >> 32), o)
    v0 = ((<uint64_t> o[0]) << 32) | o[1]
    v1 = ((<uint64_t> o[2]) << 32) | o[3]
    u0 = (<double> (v0 >> 11) + 0.5) * INV53
    u1 = (<double> (v1 >> 11) + 0.5) * INV53
    z0[0] = ndtri(u0)
    z1[0] = ndtri(u1)


cdef inline void _noise_row(uint64_t seed, uint64_t path, uint32_t k,
                            double* z, int nx) noexcept nogil:
    cdef int c, npair = (nx + 1) >> 1
    cdef double z0, z1
    for c in range(npair):
        _cell_pair(seed, path, k, <uint32_t> c, &z0, &z1)
        z[2 * c] = z0
        if 2 * c + 1 < nx:
            z[2 * c + 1] = z1


cdef inline double _rho(int kind, double a, double u) noexcept nogil:
    if kind == _RHO_CONST:
        return a
    if kind == _RHO_PAM:
        return a * u
    if kind == _RHO_SIN:
        return a * sin(u)
    # _RHO_ABS_SIN
    return a * fabs(sin(u))


cdef inline double _rho_prime(int kind, double a, double u) noexcept nogil:
    if kind == _RHO_CONST:
        return 0.0
    if kind == _RHO_PAM:
        return a
    if kind == _RHO_SIN:
        return a * cos(u)
    # _RHO_ABS_SIN
    if sin(u) >= 0:
        return a * cos(u)
    return -a * cos(u)


cdef inline void _convolve(const double* gk, int half, int width,
                           const double* w, double* out, int nx, double dx) noexcept nogil:
    # out[i] = dx * sum_off gk[half + off] * w[i - off], zero beyond the edges
    cdef int i, m, lo, hi
    cdef double acc
    for i in range(nx):
        # need 0 <= i - (m - half) < nx  =>  i + half - nx < m <= i + half
        lo = i + half - nx + 1
        if lo < 0:
            lo = 0
        hi = i + half + 1
        if hi > width:
            hi = width
        acc = 0.0
        for m in range(lo, hi):
            acc += gk[m] * w[i + half - m]
        out[i] = dx * acc


def philox4x32(c0, c1, c2, c3, k0, k1):
    """Philox4x32-10 on scalars (KAT/testing helper); returns four ints."""
    cdef uint32_t o[4]
    _philox(<uint32_t> int(c0), <uint32_t> int(c1), <uint32_t> int(c2),
            <uint32_t> int(c3), <uint32_t> int(k0), <uint32_t> int(k1), o)
    return int(o[0]), int(o[1]), int(o[2]), int(o[3])


def normals_cells(seed, path, k, j):
    """Standard normal draws for arbitrary noise cells (vectorized)."""
    path_b, k_b, j_b = np.broadcast_arrays(
        np.asarray(path, dtype=np.uint64),
        np.asarray(k, dtype=np.uint64),
        np.asarray(j, dtype=np.uint64),
    )
    shape = path_b.shape
    cdef uint64_t[::1] pv = np.ascontiguousarray(path_b).ravel()
    cdef uint64_t[::1] kv = np.ascontiguousarray(k_b).ravel()
    cdef uint64_t[::1] jv = np.ascontiguousarray(j_b).ravel()
    out = np.empty(pv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef uint64_t s = <uint64_t> int(seed)
    cdef double z0, z1
    with nogil:
        for i in range(n):
            _cell_pair(s, pv[i], <uint32_t> kv[i], <uint32_t> (jv[i] >> 1), &z0, &z1)
            ov[i] = z0 if (jv[i] & 1) == 0 else z1
    return out.reshape(shape) if shape else float(out[0])


def normals_block(seed, paths, k, nx):
    """Standard normals for one time row k of every path: (len(paths), nx)."""
    paths_arr = np.ascontiguousarray(np.asarray(paths, dtype=np.uint64))
    cdef uint64_t[::1] pv = paths_arr
    cdef Py_ssize_t P = pv.shape[0]
    out = np.empty((P, nx), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef uint64_t s = <uint64_t> int(seed)
    cdef uint32_t kk = <uint32_t> int(k)
    cdef int nxi = nx
    cdef Py_ssize_t p
    with nogil:
        for p in range(P):
            _noise_row(s, pv[p], kk, &ov[p, 0], nxi)
    return out


def run_chunk(double[:, ::1] u, seed, paths, k0, nsteps,
              double[::1] gk, half, dt, dx,
              rho_kind, rho_a, drift, clip,
              snap_states, double[:, :, ::1] snaps,
              double[::1] clip_acc, double[::1] pos_acc,
              int64_t[::1] neg_acc, int64_t[::1] cell_acc,
              traj, bump_k, bump_j, bump_amount,
              int64_t[::1] bad_state, rho_fn=None):
    """Compiled counterpart of ``_kernels_py.run_chunk`` (same contract)."""
    if rho_fn is not None:
        raise TypeError("callable diffusion coefficients require the python backend")
    cdef Py_ssize_t P = u.shape[0]
    cdef int nx = <int> u.shape[1]
    cdef int width = <int> gk.shape[0]
    cdef int halfi = <int> half
    cdef int k0i = <int> k0, nstepsi = <int> nsteps
    cdef double dti = dt, dxi = dx, ra = rho_a
    cdef int kind = rho_kind
    cdef bint do_clip = bool(clip)
    cdef double noise_fac = (dti / dxi) ** 0.5
    cdef uint64_t s = <uint64_t> int(seed)

    cdef uint64_t[::1] pv = np.ascontiguousarray(np.asarray(paths, dtype=np.uint64))
    cdef int64_t[::1] snapv = np.ascontiguousarray(np.asarray(snap_states, dtype=np.int64))
    cdef int n_snap = <int> snapv.shape[0]

    cdef bint has_drift = drift is not None
    cdef double[:, ::1] driftv
    if has_drift:
        driftv = np.ascontiguousarray(drift)
    else:
        driftv = np.zeros((1, 1))

    cdef bint has_traj = traj is not None
    cdef double[:, :, ::1] trajv
    if has_traj:
        trajv = traj
    else:
        trajv = np.zeros((1, 1, 1))

    cdef int bk = <int> bump_k, bj = <int> bump_j
    cdef double bamp = bump_amount

    scratch_w = np.empty(nx, dtype=np.float64)
    scratch_z = np.empty(nx, dtype=np.float64)
    scratch_n = np.empty(nx, dtype=np.float64)
    cdef double[::1] w = scratch_w
    cdef double[::1] z = scratch_z
    cdef double[::1] un = scratch_n

    cdef Py_ssize_t p
    cdef int step, k, j, isn, state
    cdef double r, val, neg_clip
    cdef bint ok

    with nogil:
        for p in range(P):
            if has_traj:
                for j in range(nx):
                    trajv[p, 0, j] = u[p, j]
            for step in range(nstepsi):
                k = k0i + step
                _noise_row(s, pv[p], <uint32_t> k, &z[0], nx)
                for j in range(nx):
                    r = _rho(kind, ra, u[p, j])
                    val = u[p, j] + r * (z[j] * noise_fac)
                    if has_drift:
                        val = val + dti * r * driftv[step, j]
                    w[j] = val
                if bamp != 0.0 and k == bk:
                    w[bj] = w[bj] + _rho(kind, ra, u[p, bj]) * (bamp / dxi)
                _convolve(&gk[0], halfi, width, &w[0], &un[0], nx, dxi)
                ok = True
                for j in range(nx):
                    val = un[j]
                    if not isfinite(val):
                        ok = False
                    if do_clip:
                        if val < 0.0:
                            clip_acc[p] += -val * dxi
                            val = 0.0
                            un[j] = 0.0
                    else:
                        if val < 0.0:
                            neg_acc[p] += 1
                    if val > 0.0:
                        pos_acc[p] += val * dxi
                    u[p, j] = un[j]
                cell_acc[p] += nx
                if (not ok) and bad_state[p] < 0:
                    bad_state[p] = k + 1
                state = k + 1
                if has_traj:
                    for j in range(nx):
                        trajv[p, step + 1, j] = u[p, j]
                for isn in range(n_snap):
                    if snapv[isn] == state:
                        for j in range(nx):
                            snaps[p, isn, j] = u[p, j]
    return np.asarray(u)


def run_malliavin_chunk(double[:, ::1] d, double[:, :, ::1] base, base_offset,
                        seed, paths, k0, nsteps,
                        double[::1] gk, half, dt, dx,
                        rho_kind, rho_a, traj, rho_deriv_fn=None):
    """Compiled counterpart of ``_kernels_py.run_malliavin_chunk``."""
    if rho_deriv_fn is not None:
        raise TypeError("callable diffusion coefficients require the python backend")
    cdef Py_ssize_t P = d.shape[0]
    cdef int nx = <int> d.shape[1]
    cdef int width = <int> gk.shape[0]
    cdef int halfi = <int> half
    cdef int k0i = <int> k0, nstepsi = <int> nsteps, off = <int> base_offset
    cdef double dti = dt, dxi = dx, ra = rho_a
    cdef int kind = rho_kind
    cdef double noise_fac = (dti / dxi) ** 0.5
    cdef uint64_t s = <uint64_t> int(seed)
    cdef uint64_t[::1] pv = np.ascontiguousarray(np.asarray(paths, dtype=np.uint64))

    cdef bint has_traj = traj is not None
    cdef double[:, :, ::1] trajv
    if has_traj:
        trajv = traj
    else:
        trajv = np.zeros((1, 1, 1))

    scratch_w = np.empty(nx, dtype=np.float64)
    scratch_z = np.empty(nx, dtype=np.float64)
    scratch_n = np.empty(nx, dtype=np.float64)
    cdef double[::1] w = scratch_w
    cdef double[::1] z = scratch_z
    cdef double[::1] dn = scratch_n

    cdef Py_ssize_t p
    cdef int step, k, j
    cdef double rp

    with nogil:
        for p in range(P):
            if has_traj:
                for j in range(nx):
                    trajv[p, 0, j] = d[p, j]
            for step in range(nstepsi):
                k = k0i + step
                _noise_row(s, pv[p], <uint32_t> k, &z[0], nx)
                for j in range(nx):
                    rp = _rho_prime(kind, ra, base[p, k - off, j])
                    w[j] = d[p, j] + rp * d[p, j] * (z[j] * noise_fac)
                _convolve(&gk[0], halfi, width, &w[0], &dn[0], nx, dxi)
                for j in range(nx):
                    d[p, j] = dn[j]
                if has_traj:
                    for j in range(nx):
                        trajv[p, step + 1, j] = d[p, j]
    return np.asarray(d)
