import numpy as np
import pytest

from homlady.grid_core import (
    NOSLIP,
    PERIODIC,
    FlowState,
    MacGrid,
    Projector,
    advect_skew,
    divergence,
    divergence_of_tensor,
    gradient_tensor,
    kinetic_energy,
    leray_project,
    pressure_gradient,
    rho_cells_to_faces,
    trilinear_form,
    viscous_flux,
    zero_state,
)


def random_state(grid, rng, scale=1.0):
    s = zero_state(grid)
    s.u[:] = scale * rng.standard_normal(grid.shape_u)
    s.v[:] = scale * rng.standard_normal(grid.shape_v)
    if grid.bc == NOSLIP:
        s.u[0, :] = s.u[-1, :] = 0.0
        s.v[:, 0] = s.v[:, -1] = 0.0
    return s


def div_free_state(grid, rng, scale=1.0):
    return leray_project(random_state(grid, rng, scale), grid)


@pytest.fixture(params=[PERIODIC, NOSLIP])
def grid(request):
    return MacGrid(16, 16, request.param)


class TestDivergence:
    def test_uniform_flow_periodic(self):
        g = MacGrid(16, 16, PERIODIC)
        s = zero_state(g)
        s.u[:] = 1.0
        assert np.allclose(divergence(s, g), 0.0)

    def test_zero_field(self, grid):
        assert np.allclose(divergence(zero_state(grid), grid), 0.0)

    def test_sinusoid_second_order(self):
        errs = []
        for n in (32, 64):
            g = MacGrid(n, n, PERIODIC)
            s = zero_state(g)
            x = g.u_face_coords()[..., 0]
            s.u[:] = np.sin(2 * np.pi * x)
            xc = g.cell_coords()[..., 0]
            exact = 2 * np.pi * np.cos(2 * np.pi * xc)
            errs.append(np.max(np.abs(divergence(s, g) - exact)))
        rate = np.log2(errs[0] / errs[1])
        assert rate >= 1.9

    def test_shape_mismatch(self):
        g = MacGrid(16, 16, PERIODIC)
        s = zero_state(MacGrid(32, 32, PERIODIC))
        with pytest.raises(ValueError):
            divergence(s, g)


class TestDuality:
    def test_div_grad_adjoint(self, grid):
        rng = np.random.default_rng(0)
        s = random_state(grid, rng)
        q = rng.standard_normal(grid.shape_q)
        lhs = np.sum(divergence(s, grid) * q) * grid.h**2
        gu, gv = pressure_gradient(q, grid)
        rhs = -(np.sum(s.u * gu) + np.sum(s.v * gv)) * grid.h**2
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)

    def test_tensor_divergence_adjoint(self, grid):
        rng = np.random.default_rng(1)
        s = random_state(grid, rng)
        sigma = rng.standard_normal(grid.shape_q + (2, 2))
        G = gradient_tensor(s, grid)
        lhs = -np.sum(sigma * G) * grid.h**2
        du, dv = divergence_of_tensor(sigma, grid)
        rhs = (np.sum(s.u * du) + np.sum(s.v * dv)) * grid.h**2
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)

    def test_gradient_consistency(self):
        # smooth field: collocated Jacobian converges at 2nd order
        errs = []
        for n in (32, 64):
            g = MacGrid(n, n, PERIODIC)
            s = zero_state(g)
            xu = g.u_face_coords()
            xv = g.v_face_coords()
            s.u[:] = np.sin(2 * np.pi * xu[..., 0]) * np.cos(2 * np.pi * xu[..., 1])
            s.v[:] = np.cos(2 * np.pi * xv[..., 0]) * np.sin(2 * np.pi * xv[..., 1])
            xc = g.cell_coords()
            G = gradient_tensor(s, g)
            exact01 = -2 * np.pi * np.sin(2 * np.pi * xc[..., 0]) * np.sin(
                2 * np.pi * xc[..., 1]
            )
            errs.append(np.max(np.abs(G[..., 0, 1] - exact01)))
        assert np.log2(errs[0] / errs[1]) >= 1.8


class TestLerayProject:
    def test_idempotent(self, grid):
        rng = np.random.default_rng(2)
        s1 = leray_project(random_state(grid, rng), grid)
        s2 = leray_project(s1, grid)
        assert np.max(np.abs(s2.u - s1.u)) <= 1e-10
        assert np.max(np.abs(s2.v - s1.v)) <= 1e-10

    def test_pure_gradient_annihilated(self):
        g = MacGrid(16, 16, PERIODIC)
        rng = np.random.default_rng(3)
        phi = rng.standard_normal(g.shape_q)
        gu, gv = pressure_gradient(phi, g)
        s = FlowState(gu, gv, np.zeros(g.shape_q))
        out = leray_project(s, g)
        assert np.max(np.abs(out.u)) <= 1e-10
        assert np.max(np.abs(out.v)) <= 1e-10

    def test_divergence_free_and_contractive(self, grid):
        rng = np.random.default_rng(4)
        s = random_state(grid, rng)
        out = leray_project(s, grid)
        scale = np.max(np.abs(out.u)) + np.max(np.abs(out.v)) + 1.0
        assert np.max(np.abs(divergence(out, grid))) <= 1e-10 * scale
        assert kinetic_energy(out, grid) <= kinetic_energy(s, grid) + 1e-12

    def test_zero_mean_pressure_increment(self, grid):
        rng = np.random.default_rng(5)
        out = leray_project(random_state(grid, rng), grid)
        assert abs(np.sum(out.q) * grid.h**2) <= 1e-12 * max(
            np.max(np.abs(out.q)), 1e-300
        )

    def test_weighted_projection_contractive_in_rho_norm(self, grid):
        rng = np.random.default_rng(6)
        rho_c = 1.0 + 0.4 * rng.random(grid.shape_q)
        rho_f = rho_cells_to_faces(rho_c, grid)
        s = random_state(grid, rng)
        out = leray_project(s, grid, rho_cells=rho_c)
        scale = np.max(np.abs(out.u)) + np.max(np.abs(out.v)) + 1.0
        assert np.max(np.abs(divergence(out, grid))) <= 1e-10 * scale
        assert kinetic_energy(out, grid, rho_f) <= kinetic_energy(s, grid, rho_f) + 1e-12

    def test_weighted_projection_orthogonality(self, grid):
        # removed part is rho^-1 grad(phi): rho-orthogonal to every div-free field
        rng = np.random.default_rng(7)
        rho_c = 1.0 + 0.4 * rng.random(grid.shape_q)
        rho_f = rho_cells_to_faces(rho_c, grid)
        s = random_state(grid, rng)
        out = leray_project(s, grid, rho_cells=rho_c)
        w = div_free_state(grid, np.random.default_rng(8))
        ru, rv = rho_f
        ip = np.sum(ru * (s.u - out.u) * w.u) + np.sum(rv * (s.v - out.v) * w.v)
        assert abs(ip * grid.h**2) <= 1e-10


class TestAdvectSkew:
    def test_zero_velocity(self, grid):
        au, av = advect_skew(zero_state(grid), grid)
        assert np.allclose(au, 0.0) and np.allclose(av, 0.0)

    def test_uniform_flow_periodic(self):
        g = MacGrid(16, 16, PERIODIC)
        s = zero_state(g)
        s.u[:] = 1.3
        s.v[:] = -0.4
        au, av = advect_skew(s, g)
        assert np.max(np.abs(au)) <= 1e-14
        assert np.max(np.abs(av)) <= 1e-14

    def test_energy_neutral_on_divergence_free(self, grid):
        rng = np.random.default_rng(9)
        for trial in range(5):
            s = div_free_state(grid, rng)
            G = gradient_tensor(s, grid)
            h1, _ = np.sum(G * G) * grid.h**2, None
            scale = np.sqrt(kinetic_energy(s, grid)) * h1
            assert abs(trilinear_form(s, grid)) <= 1e-12 * max(scale, 1e-300)

    def test_consistency_smooth_field(self):
        # compare against (u . grad) u for an analytic divergence-free field
        errs = []
        for n in (32, 64):
            g = MacGrid(n, n, PERIODIC)
            s = zero_state(g)
            xu, xv = g.u_face_coords(), g.v_face_coords()
            k = 2 * np.pi
            s.u[:] = np.sin(k * xu[..., 0]) * np.cos(k * xu[..., 1])
            s.v[:] = -np.cos(k * xv[..., 0]) * np.sin(k * xv[..., 1])
            au, _ = advect_skew(s, g)
            x, y = xu[..., 0], xu[..., 1]
            exact = (
                np.sin(k * x) * np.cos(k * y) * k * np.cos(k * x) * np.cos(k * y)
                + (-np.cos(k * x) * np.sin(k * y)) * (-k) * np.sin(k * x) * np.sin(k * y)
            )
            errs.append(np.max(np.abs(au - exact)))
        assert np.log2(errs[0] / errs[1]) >= 1.8


class TestViscousFlux:
    def test_zero_gradient(self):
        G = np.zeros((4, 4, 2, 2))
        a = np.broadcast_to(np.eye(2), (4, 4, 2, 2))
        sigma = viscous_flux(G, a, np.ones((4, 4)), 3.0)
        assert np.allclose(sigma, 0.0)

    def test_p2_linearizes(self):
        rng = np.random.default_rng(10)
        G = rng.standard_normal((3, 3, 2, 2))
        nu0, nu1 = 0.7, 0.3
        a = nu0 * np.broadcast_to(np.eye(2), (3, 3, 2, 2))
        sigma = viscous_flux(G, a, np.full((3, 3), nu1), 2.0)
        assert np.allclose(sigma, (nu0 + nu1) * G)

    def test_p3_scalar_arithmetic(self):
        G = np.zeros((1, 1, 2, 2))
        G[0, 0, 0, 0] = 2.0
        a = np.broadcast_to(np.eye(2), (1, 1, 2, 2))
        sigma = viscous_flux(G, a, np.ones((1, 1)), 3.0)
        expected = np.zeros((2, 2))
        expected[0, 0] = 6.0
        assert np.allclose(sigma[0, 0], expected)

    def test_p_below_two_rejected(self):
        with pytest.raises(ValueError):
            viscous_flux(np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 2, 2)),
                         np.zeros((2, 2)), 1.5)

    def test_monotone_coercive(self):
        rng = np.random.default_rng(11)
        nu0 = 0.6
        a = nu0 * np.broadcast_to(np.eye(2), (8, 1, 2, 2))
        b = np.full((8, 1), 0.4)
        G1 = rng.standard_normal((8, 1, 2, 2))
        G2 = rng.standard_normal((8, 1, 2, 2))
        d = viscous_flux(G1, a, b, 3.0) - viscous_flux(G2, a, b, 3.0)
        lhs = np.sum(d * (G1 - G2), axis=(-2, -1))
        rhs = nu0 * np.sum((G1 - G2) ** 2, axis=(-2, -1))
        assert np.all(lhs >= rhs - 1e-12)


class TestPoissonGuards:
    def test_nonzero_mean_rhs_rejected(self):
        g = MacGrid(16, 16, PERIODIC)
        proj = Projector(g)
        from homlady.errors import LadyError

        with pytest.raises(LadyError):
            proj.solve_poisson(np.ones(g.shape_q))
