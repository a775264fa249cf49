"""Space-time convolution machinery and the second-moment kernel series."""

import numpy as np
import pytest

from fracheat.errors import ContractError, DomainError
from fracheat.moment_kernel import (
    SpaceTimeField,
    SpaceTimeGrid,
    moment_kernel_heat_closed,
    moment_kernel_series,
    second_moment_bound,
    spacetime_convolve,
    squared_kernel_field,
)
from fracheat.stable_kernel import StableParams, kernel_value

# frozen closed-form value at (lam, t, x) = (1, 1, 0): arithmetic evaluation
# of (2 pi)^(-1/2) ((8 pi)^(-1/2) + e^(1/8) Phi(1/2) / 4)
K_CLOSED_1_1_0 = 0.15772324472224477


def naive_convolve(f, g):
    grid = f.grid
    out = np.zeros((grid.nt, grid.nx))
    half = (grid.nx - 1) // 2
    for k in range(grid.nt):
        for i in range(grid.nx):
            acc = 0.0
            for j in range(k):
                for m in range(grid.nx):
                    im = i - m + half
                    if 0 <= im < grid.nx:
                        acc += f.values[j, m] * g.values[k - 1 - j, im]
            out[k, i] = acc * grid.dt * grid.dx
    return out


class TestGrid:
    def test_axes(self):
        g = SpaceTimeGrid.from_extents(T=0.5, L=2.0, dt=1 / 8, dx=1 / 4)
        assert g.nt == 4
        np.testing.assert_allclose(g.t_grid, [0.125, 0.25, 0.375, 0.5])
        assert g.x_grid[0] == -2.0 and g.x_grid[-1] == 2.0
        assert g.x_grid[(g.nx - 1) // 2] == 0.0
        assert g.t_index(0.25) == 1
        assert g.x_index(-2.0) == 0
        with pytest.raises(ContractError):
            g.t_index(0.3)

    def test_bad_grid(self):
        with pytest.raises(DomainError):
            SpaceTimeGrid(dt=-1, dx=0.1, nt=4, nx=5)
        with pytest.raises(ContractError):
            SpaceTimeGrid(dt=0.1, dx=0.1, nt=4, nx=4)


class TestConvolve:
    def test_against_naive(self, rng):
        g = SpaceTimeGrid(dt=0.125, dx=0.25, nt=6, nx=9)
        f1 = SpaceTimeField(g, rng.random((6, 9)))
        f2 = SpaceTimeField(g, rng.random((6, 9)))
        out = spacetime_convolve(f1, f2)
        np.testing.assert_allclose(out.values, naive_convolve(f1, f2), atol=1e-12)

    def test_zero(self):
        g = SpaceTimeGrid(dt=0.1, dx=0.25, nt=5, nx=9)
        z = SpaceTimeField(g, np.zeros((5, 9)))
        f = SpaceTimeField(g, np.ones((5, 9)))
        np.testing.assert_array_equal(spacetime_convolve(z, f).values, 0.0)

    def test_single_cell_delta(self):
        g = SpaceTimeGrid(dt=0.1, dx=0.25, nt=5, nx=9)
        a = np.zeros((5, 9))
        a[0, 4] = 1.0  # time dt, center cell
        f = SpaceTimeField(g, a)
        out = spacetime_convolve(f, f)
        # lands at time index 1 (= 2 dt), center, with weight dt dx
        expected = np.zeros((5, 9))
        expected[1, 4] = g.dt * g.dx
        np.testing.assert_allclose(out.values, expected, atol=1e-15)

    def test_commutes_and_linear(self, rng):
        g = SpaceTimeGrid(dt=0.125, dx=0.25, nt=6, nx=9)
        f1 = SpaceTimeField(g, rng.random((6, 9)))
        f2 = SpaceTimeField(g, rng.random((6, 9)))
        f3 = SpaceTimeField(g, rng.random((6, 9)))
        ab = spacetime_convolve(f1, f2).values
        ba = spacetime_convolve(f2, f1).values
        np.testing.assert_allclose(ab, ba, atol=1e-12)
        lin = spacetime_convolve(SpaceTimeField(g, f1.values + 2 * f3.values), f2).values
        np.testing.assert_allclose(
            lin, ab + 2 * spacetime_convolve(f3, f2).values, atol=1e-12
        )

    def test_grid_mismatch(self):
        g1 = SpaceTimeGrid(dt=0.1, dx=0.25, nt=5, nx=9)
        g2 = SpaceTimeGrid(dt=0.1, dx=0.25, nt=6, nx=9)
        with pytest.raises(ContractError):
            spacetime_convolve(
                SpaceTimeField(g1, np.zeros((5, 9))), SpaceTimeField(g2, np.zeros((6, 9)))
            )


class TestSeries:
    def test_first_term_exact(self):
        params = StableParams(2.0)
        grid = SpaceTimeGrid.from_extents(T=0.25, L=2.0, dt=1 / 64, dx=1 / 16)
        g2 = squared_kernel_field(params, grid)
        k1, _ = moment_kernel_series(params, 1.5, grid, 1)
        np.testing.assert_allclose(k1.values, 1.5**2 * g2.values, rtol=1e-14)

    def test_nondecreasing_in_terms(self, table15):
        params = StableParams(1.5)
        grid = SpaceTimeGrid.from_extents(T=0.25, L=2.0, dt=1 / 64, dx=1 / 16)
        k4, _ = moment_kernel_series(params, 1.0, grid, 4, table15)
        k8, _ = moment_kernel_series(params, 1.0, grid, 8, table15)
        assert np.all(k8.values >= k4.values - 1e-15)

    def test_heat_closed_form_match(self):
        params = StableParams(2.0)
        grid = SpaceTimeGrid.from_extents(T=0.5, L=3.0, dt=1 / 256, dx=1 / 64)
        series, ratio = moment_kernel_series(params, 1.0, grid, 12)
        assert ratio < 1e-8
        for t, x in [(0.25, 0.0), (0.5, 0.0), (0.5, 0.5)]:
            s = series.at(t, x)
            c = moment_kernel_heat_closed(1.0, t, x)
            assert abs(s - c) / c < 1e-2

    def test_recursion_identity(self, table15):
        # K * lam^2 G^2 = K - lam^2 G^2 within series truncation + quadrature
        for params, table in ((StableParams(2.0), None), (StableParams(1.5), table15)):
            grid = SpaceTimeGrid.from_extents(T=0.25, L=2.0, dt=1 / 128, dx=1 / 32)
            g2 = squared_kernel_field(params, grid, table)
            kern, _ = moment_kernel_series(params, 1.0, grid, 14, table, g2=g2)
            lhs = spacetime_convolve(kern, g2).values
            rhs = kern.values - g2.values
            scale = np.abs(rhs).max()
            assert np.abs(lhs - rhs).max() / scale < 1e-5

    def test_scaled_envelope_bound(self, table15):
        # K(t, x) <= C * t^(-1/alpha) G(t,x) (1 + t^(1/alpha) e^(C t)) for one C
        params = StableParams(1.5)
        grid = SpaceTimeGrid.from_extents(T=0.5, L=2.0, dt=1 / 128, dx=1 / 32)
        kern, _ = moment_kernel_series(params, 1.0, grid, 12, table15)
        tt = grid.t_grid[3:, None]
        gg = kernel_value(table15, tt, grid.x_grid[None, :])
        calg = tt ** (-1 / 1.5) * gg
        for c_try in (1.0, 2.0, 4.0, 8.0):
            env = c_try * calg * (1 + tt ** (1 / 1.5) * np.exp(c_try * tt))
            if np.all(kern.values[3:] <= env):
                break
        else:
            pytest.fail("no envelope constant up to 8 works")

    def test_closed_form_frozen_value(self):
        assert moment_kernel_heat_closed(1.0, 1.0, 0.0) == pytest.approx(
            K_CLOSED_1_1_0, rel=1e-12
        )
        # factorized gaussian profile in x
        v0 = moment_kernel_heat_closed(1.0, 0.7, 0.0)
        vx = moment_kernel_heat_closed(1.0, 0.7, 1.3)
        assert vx == pytest.approx(v0 * np.exp(-1.3**2 / 1.4), rel=1e-12)
        assert moment_kernel_heat_closed(0.0, 0.5, 0.1) == 0.0

    def test_divergence_guard(self):
        params = StableParams(2.0)
        grid = SpaceTimeGrid.from_extents(T=0.25, L=1.0, dt=1 / 32, dx=1 / 8)
        with pytest.raises(DomainError):
            moment_kernel_series(params, -1.0, grid, 4)
        with pytest.raises(DomainError):
            moment_kernel_series(params, 1.0, grid, 0)


class TestSecondMomentBound:
    def test_zero_data_zero_noise_floor(self):
        params = StableParams(2.0)
        grid = SpaceTimeGrid.from_extents(T=0.25, L=2.0, dt=1 / 64, dx=1 / 16)
        j0 = SpaceTimeField(grid, np.zeros((grid.nt, grid.nx)))
        bound = second_moment_bound(j0, params, 2.0, 0.0, n_terms=6)
        np.testing.assert_array_equal(bound.values, 0.0)

    def test_additive_floor_quadrature(self):
        # J0 = 0, vs = 1: bound(t, 0) = (1 * K)(t, 0); cross-check by 1-D
        # quadrature of the closed kernel in time (x-integral is exact)
        params = StableParams(2.0)
        grid = SpaceTimeGrid.from_extents(T=0.5, L=4.0, dt=1 / 256, dx=1 / 32)
        j0 = SpaceTimeField(grid, np.zeros((grid.nt, grid.nx)))
        lam = 1.0
        bound = second_moment_bound(j0, params, lam, 1.0, n_terms=12)
        from scipy.integrate import quad
        from scipy.special import ndtr

        def k_x_integral(s):
            # int K(s, y) dy for the closed heat form
            return lam**2 / np.sqrt(8 * np.pi * s) + 0.25 * lam**4 * np.exp(
                lam**4 * s / 8
            ) * ndtr(0.5 * lam**2 * np.sqrt(s))

        for t in (0.25, 0.5):
            oracle, _ = quad(k_x_integral, 0, t, points=[0], limit=200)
            assert bound.at(t, 0.0) == pytest.approx(oracle, rel=2e-2)
