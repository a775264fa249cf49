"""Mild-scheme stepping, coupled pairs, Picard cross-checks, Malliavin fields."""

import numpy as np
import pytest

from fracheat.errors import ContractError, DivergenceError
from fracheat.moment_kernel import SpaceTimeGrid
from fracheat.noise_initial import Combination, DiracAtoms, named_density, sample_noise
from fracheat.spde_solver import (
    SchemeOptions,
    abs_sin_coefficient,
    constant_coefficient,
    malliavin_matrix,
    pam_coefficient,
    picard_solve,
    simulate_batch,
    simulate_coupled_pair,
    simulate_malliavin,
    simulate_path,
    step_kernel_row,
    _run_batch_raw,
    sin_coefficient,
)
from fracheat.stable_kernel import StableParams, gaussian_kernel, kernel_value

PARAMS2 = StableParams(2.0)
DELTA0 = DiracAtoms(((0.0, 1.0),))
LEB = named_density("lebesgue")


@pytest.fixture(scope="module")
def grid():
    return SpaceTimeGrid.from_extents(T=0.5, L=4.0, dt=1 / 256, dx=1 / 32)


@pytest.fixture(scope="module")
def small_grid():
    return SpaceTimeGrid.from_extents(T=0.25, L=2.0, dt=1 / 128, dx=1 / 32)


class TestScheme:
    def test_zero_coefficient_is_heat_flow(self, table2, grid):
        f = simulate_path(PARAMS2, constant_coefficient(0.0), DELTA0, table2, grid,
                          sample_noise(42, 0, grid))
        interior = np.abs(grid.x_grid) <= grid.L / 2
        err = np.abs(f.values[:, interior] - f.j0.values[:, interior]).max()
        assert err < 1e-8

    def test_zero_coefficient_alpha15(self, table15):
        g = SpaceTimeGrid.from_extents(T=0.5, L=4.0, dt=1 / 256, dx=1 / 64)
        f = simulate_path(StableParams(1.5), constant_coefficient(0.0), DELTA0,
                          table15, g, sample_noise(42, 0, g))
        interior = np.abs(g.x_grid) <= g.L / 2
        err = np.abs(f.values[:, interior] - f.j0.values[:, interior]).max()
        assert err < 1e-3  # algebraic tails feel the domain truncation

    def test_pam_scale_equivariance_bitwise(self, table2, grid):
        noise = sample_noise(7, 3, grid)
        pam = pam_coefficient(1.0)
        f1 = simulate_path(PARAMS2, pam, DiracAtoms(((0.0, 2.0),)), table2, grid, noise)
        f2 = simulate_path(PARAMS2, pam, DELTA0, table2, grid, noise)
        assert np.array_equal(f1.values, 2.0 * f2.values)
        f3 = simulate_path(PARAMS2, pam, DiracAtoms(((0.0, 0.5),)), table2, grid, noise)
        assert np.array_equal(f3.values, 0.5 * f2.values)

    def test_mean_preservation(self, table2, grid):
        br = simulate_batch(PARAMS2, pam_coefficient(1.0), DELTA0, table2, grid,
                            2025, np.arange(800), [0.5])
        snap = br.snapshots[:, 0, :]
        for x in (-1.0, 0.0, 1.0):
            j = grid.x_index(x)
            se = snap[:, j].std(ddof=1) / np.sqrt(snap.shape[0])
            assert abs(snap[:, j].mean() - gaussian_kernel(0.5, x)) < 4 * se

    def test_cfl_precondition(self, table2):
        bad = SpaceTimeGrid.from_extents(T=0.5, L=2.0, dt=1 / 4096, dx=1 / 32)
        with pytest.raises(ContractError):
            simulate_path(PARAMS2, constant_coefficient(0.0), DELTA0, table2, bad,
                          sample_noise(1, 0, bad))

    def test_inadmissible_rejected(self, table2, grid):
        bad = DiracAtoms(tuple((float(n), float(np.exp(n * n))) for n in range(1, 9)))
        with pytest.raises(ContractError):
            simulate_path(PARAMS2, constant_coefficient(0.0), bad, table2, grid,
                          sample_noise(1, 0, grid))

    def test_noise_grid_mismatch(self, table2, grid, small_grid):
        with pytest.raises(ContractError):
            simulate_path(PARAMS2, constant_coefficient(0.0), DELTA0, table2, grid,
                          sample_noise(1, 0, small_grid))

    def test_divergence_flagged(self, table2, small_grid):
        # an absurd rate makes the multiplicative scheme blow up immediately
        with pytest.raises(DivergenceError):
            simulate_path(PARAMS2, pam_coefficient(1e160), DELTA0, table2, small_grid,
                          sample_noise(3, 0, small_grid))

    def test_batch_matches_single_path(self, table2, small_grid):
        pam = pam_coefficient(1.0)
        br = simulate_batch(PARAMS2, pam, DELTA0, table2, small_grid, 99,
                            np.arange(4), [0.25])
        f2 = simulate_path(PARAMS2, pam, DELTA0, table2, small_grid,
                           sample_noise(99, 2, small_grid))
        np.testing.assert_array_equal(br.snapshots[2, 0], f2.values[-1])

    def test_positivity_clip_accounting(self, table2, small_grid):
        opts = SchemeOptions(positivity_clip=True)
        f = simulate_path(PARAMS2, pam_coefficient(2.0), DELTA0, table2, small_grid,
                          sample_noise(11, 5, small_grid), opts=opts)
        assert np.all(f.values >= 0)
        assert f.stats.clipped_mass >= 0
        assert f.stats.clipped_fraction < 0.05

    def test_step_kernel_row_mass(self, table2, table15, grid):
        for tab in (table2, table15):
            gk, half = step_kernel_row(tab, grid)
            assert gk[half] == gk.max()
            assert abs(gk.sum() * grid.dx - 1.0) < 2e-4


class TestCoupled:
    def test_equal_measures_identical(self, table2, small_grid):
        rho = abs_sin_coefficient(1.0)
        f1, f2 = simulate_coupled_pair(PARAMS2, rho, DELTA0, DELTA0, table2,
                                       small_grid, sample_noise(5, 1, small_grid))
        assert np.array_equal(f1.values, f2.values)

    def test_ordering_mostly_holds(self, table2, small_grid):
        mu1 = Combination((DELTA0, LEB))
        rho = abs_sin_coefficient(1.0)
        viol = 0
        cells = 0
        for k in range(20):
            f1, f2 = simulate_coupled_pair(PARAMS2, rho, mu1, DELTA0, table2,
                                           small_grid, sample_noise(17, k, small_grid))
            tol = 1e-10 * (1.0 + np.abs(f2.values))
            viol += int((f1.values < f2.values - tol).sum())
            cells += f1.values.size
        assert viol / cells < 1e-2

    def test_unverifiable_rejected(self, table2, small_grid):
        mu1 = DiracAtoms(((0.5, 1.0),))
        with pytest.raises(ContractError):
            simulate_coupled_pair(PARAMS2, abs_sin_coefficient(1.0), mu1, DELTA0,
                                  table2, small_grid, sample_noise(5, 1, small_grid))


class TestPicard:
    def test_zero_iterations_is_j0(self, table2):
        tiny = SpaceTimeGrid.from_extents(T=0.125, L=2.0, dt=1 / 128, dx=1 / 16)
        f, gaps = picard_solve(PARAMS2, pam_coefficient(1.0), DELTA0, table2, tiny,
                               sample_noise(21, 0, tiny), 0)
        np.testing.assert_allclose(f.values, f.j0.values, atol=1e-12)
        assert gaps == []

    def test_gap_decreases(self, table2):
        tiny = SpaceTimeGrid.from_extents(T=0.125, L=2.0, dt=1 / 128, dx=1 / 16)
        f, gaps = picard_solve(PARAMS2, pam_coefficient(1.0), DELTA0, table2, tiny,
                               sample_noise(21, 0, tiny), 12)
        assert gaps[0] > gaps[-1]
        assert all(g2 < g1 for g1, g2 in zip(gaps[3:], gaps[4:]))
        assert gaps[-1] < 1e-5

    def test_cross_validates_stepping_scheme(self, table2):
        # for the heat case the discrete semigroup matches the sampled kernel
        # to machine precision, so the converged fixed point must coincide
        # with the one-step scheme up to iteration residual
        for m in (7, 8):  # dt = 2^-m
            g = SpaceTimeGrid.from_extents(T=0.125, L=2.0, dt=2.0**-m, dx=2.0 ** -(m // 2 + 2))
            noise = sample_noise(33, 0, g)
            fp, gaps = picard_solve(PARAMS2, pam_coefficient(1.0), DELTA0, table2, g, noise, 14)
            fs = simulate_path(PARAMS2, pam_coefficient(1.0), DELTA0, table2, g, noise)
            interior = np.abs(g.x_grid) <= 1.0
            sup = np.abs(fp.values[-1, interior] - fs.values[-1, interior]).max()
            assert sup < 1e-7


class TestMalliavin:
    def test_constant_coefficient_exact(self, table2, small_grid):
        c = 0.7
        base = simulate_path(PARAMS2, constant_coefficient(c), LEB, table2,
                             small_grid, sample_noise(99, 3, small_grid))
        theta_k = small_grid.nt - 1 - 4
        xi_j = small_grid.x_index(0.0)
        d = simulate_malliavin(base, (theta_k, xi_j))
        lag = (small_grid.nt - 1 - theta_k) * small_grid.dt
        analytic = c * gaussian_kernel(lag, small_grid.x_grid)
        assert np.abs(d.values[-1] - analytic).max() < 1e-12
        assert np.array_equal(d.values[: theta_k + 1], np.zeros_like(d.values[: theta_k + 1]))

    def test_fd_consistency_nonlinear(self, table2, small_grid):
        rho = sin_coefficient(1.0)
        base = simulate_path(PARAMS2, rho, LEB, table2, small_grid,
                             sample_noise(99, 3, small_grid))

        def fd(cell, eps):
            outs = []
            for s in (eps, -eps):
                out = _run_batch_raw(PARAMS2, rho, LEB, table2, small_grid, 99, [3],
                                     keep_traj=False, bump=(cell[0], cell[1], s))
                outs.append(out[0][0].copy())
            return (outs[0] - outs[1]) / (2 * eps)

        errs = {}
        for eps in (1e-3, 1e-4):
            worst = 0.0
            for cell in [(10, 30), (20, 64), (5, 90)]:
                d = simulate_malliavin(base, cell).values[-1]
                f = fd(cell, eps)
                worst = max(worst, np.abs(d - f).max() / np.abs(f).max())
            errs[eps] = worst
        assert errs[1e-4] < 0.05
        assert errs[1e-4] < errs[1e-3]

    def test_missing_derivative_rejected(self, table2, small_grid):
        base = simulate_path(PARAMS2, abs_sin_coefficient(1.0), LEB, table2,
                             small_grid, sample_noise(1, 0, small_grid))
        with pytest.raises(ContractError):
            simulate_malliavin(base, (3, 3))

    def test_matrix_additive_quadrature_oracle(self, table2, small_grid):
        res = malliavin_matrix(PARAMS2, constant_coefficient(1.0), LEB, table2,
                               small_grid, 99, [0, 1], points=(0.0,), t_eval=0.25,
                               window_t=(0.125, 0.25), window_x=(-0.5, 0.5),
                               stride=(1, 1))
        k_eval = small_grid.t_index(0.25)
        acc = 0.0
        for k in range(small_grid.nt - 1):
            slab = ((k + 1) * small_grid.dt, (k + 2) * small_grid.dt)
            if slab[0] >= 0.125 - 1e-12 and slab[1] <= 0.25 + 1e-12 and k + 1 <= k_eval:
                lag = 0.25 - slab[0]
                for z in small_grid.x_grid[np.abs(small_grid.x_grid) <= 0.5 + 1e-12]:
                    acc += gaussian_kernel(lag, z) ** 2 * small_grid.dt * small_grid.dx
        np.testing.assert_allclose(res.sigma[:, 0, 0], acc, rtol=1e-10)

    def test_matrix_symmetric_psd(self, table2, small_grid):
        res = malliavin_matrix(PARAMS2, pam_coefficient(1.0), LEB, table2, small_grid,
                               123, np.arange(8), points=(-0.5, 0.5), t_eval=0.25,
                               window_t=(0.125, 0.25), window_x=(-1.0, 1.0),
                               stride=(2, 2))
        for s in res.sigma:
            np.testing.assert_allclose(s, s.T, rtol=1e-12)
            eig = np.linalg.eigvalsh(s)
            assert eig.min() >= -1e-15 * max(eig.max(), 1e-300)
        assert np.all(res.det > 0)

    def test_empty_window_rejected(self, table2, small_grid):
        with pytest.raises(ContractError):
            malliavin_matrix(PARAMS2, pam_coefficient(1.0), LEB, table2, small_grid,
                             1, [0], points=(0.0,), t_eval=0.25,
                             window_t=(0.2499, 0.24999), window_x=(5.0, 6.0))


class TestDriftShift:
    def test_additive_shift_reproduces_window_smoothing(self, table2):
        # for rho = 1 the drift-shifted run differs from the plain run by
        # exactly the kernel-smoothed window (the first-order response)
        from fracheat.localization import PsiSpec, c_norm, psi
        from fracheat.noise_initial import drift_field

        grid = SpaceTimeGrid.from_extents(T=0.5, L=4.0, dt=1 / 256, dx=1 / 16)
        n, z = 2, 0.8
        cn = c_norm(table2, n)
        df = drift_field(n, [0.0], [z], grid.T, grid, cn)
        rho = constant_coefficient(1.0)
        noise = sample_noise(55, 4, grid)
        f_plain = simulate_path(PARAMS2, rho, DELTA0, table2, grid, noise)
        f_shift = simulate_path(PARAMS2, rho, DELTA0, table2, grid, noise, drift=df)
        diff = f_shift.values[-1] - f_plain.values[-1]
        spec = PsiSpec(n=n, table=table2, T=grid.T, points=(0.0,), c_n=cn)
        expected = z * np.array([psi(spec, 0, grid.T, x) for x in grid.x_grid])
        assert np.abs(diff - expected).max() < 2.5e-2 * np.abs(expected).max()
