"""Staggered-grid discrete calculus on the unit square.

MAC layout: x-velocity u on vertical faces, y-velocity v on horizontal faces,
pressure q at cell centers.  Periodic arrays are (nx, ny); noslip arrays carry
their wall faces explicitly (u is (nx+1, ny) with rows 0 and nx pinned to
zero, v is (nx, ny+1) with columns 0 and ny pinned).

The viscous divergence is built as the exact negative adjoint of the
cell-centered gradient operator, which makes the discrete energy identity
(u, Div sigma) = -<grad u, sigma> hold to round-off.  Advection uses the
central-flux form whose trilinear form vanishes identically on discretely
divergence-free fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import LadyError

PERIODIC = "periodic"
NOSLIP = "noslip"


@dataclass(frozen=True)
class MacGrid:
    nx: int
    ny: int
    bc: str = PERIODIC

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise ValueError("grid must be at least 8x8")
        if self.nx != self.ny:
            raise ValueError("square cells enforced: nx must equal ny")
        if self.bc not in (PERIODIC, NOSLIP):
            raise ValueError(f"unknown bc {self.bc!r}")

    @property
    def h(self):
        return 1.0 / self.nx

    @property
    def shape_u(self):
        return (self.nx, self.ny) if self.bc == PERIODIC else (self.nx + 1, self.ny)

    @property
    def shape_v(self):
        return (self.nx, self.ny) if self.bc == PERIODIC else (self.nx, self.ny + 1)

    @property
    def shape_q(self):
        return (self.nx, self.ny)

    def u_face_coords(self):
        """Coordinates (..., 2) of the u-face locations."""
        h = self.h
        ni, nj = self.shape_u
        x = np.arange(ni) * h
        y = (np.arange(nj) + 0.5) * h
        return np.stack(np.meshgrid(x, y, indexing="ij"), axis=-1)

    def v_face_coords(self):
        h = self.h
        ni, nj = self.shape_v
        x = (np.arange(ni) + 0.5) * h
        y = np.arange(nj) * h
        return np.stack(np.meshgrid(x, y, indexing="ij"), axis=-1)

    def cell_coords(self):
        h = self.h
        x = (np.arange(self.nx) + 0.5) * h
        y = (np.arange(self.ny) + 0.5) * h
        return np.stack(np.meshgrid(x, y, indexing="ij"), axis=-1)


@dataclass
class FlowState:
    """Velocity/pressure snapshot on a MacGrid."""

    u: np.ndarray
    v: np.ndarray
    q: np.ndarray
    time: float = 0.0

    def copy(self):
        return FlowState(self.u.copy(), self.v.copy(), self.q.copy(), self.time)


def zero_state(grid, time=0.0):
    return FlowState(
        np.zeros(grid.shape_u), np.zeros(grid.shape_v), np.zeros(grid.shape_q), time
    )


def enforce_bc(state, grid):
    """Pin wall-normal faces to zero for noslip grids (in place)."""
    if grid.bc == NOSLIP:
        state.u[0, :] = 0.0
        state.u[-1, :] = 0.0
        state.v[:, 0] = 0.0
        state.v[:, -1] = 0.0
    return state


def _check_shapes(state, grid):
    if state.u.shape != grid.shape_u or state.v.shape != grid.shape_v:
        raise ValueError(
            f"state shapes {state.u.shape}/{state.v.shape} do not match grid "
            f"{grid.shape_u}/{grid.shape_v}"
        )


# -- first-order operators ------------------------------------------------------

def divergence(state, grid):
    """Cell-centered divergence (u_E - u_W)/h + (v_N - v_S)/h."""
    _check_shapes(state, grid)
    h = grid.h
    u, v = state.u, state.v
    if grid.bc == PERIODIC:
        return (np.roll(u, -1, 0) - u) / h + (np.roll(v, -1, 1) - v) / h
    return (u[1:, :] - u[:-1, :]) / h + (v[:, 1:] - v[:, :-1]) / h


def pressure_gradient(q, grid):
    """Cell-to-face gradient, the exact negative adjoint of divergence.

    Wall-normal entries are zero for noslip grids.
    """
    h = grid.h
    if grid.bc == PERIODIC:
        gu = (q - np.roll(q, 1, 0)) / h
        gv = (q - np.roll(q, 1, 1)) / h
        return gu, gv
    gu = np.zeros((q.shape[0] + 1, q.shape[1]))
    gv = np.zeros((q.shape[0], q.shape[1] + 1))
    gu[1:-1, :] = (q[1:, :] - q[:-1, :]) / h
    gv[:, 1:-1] = (q[:, 1:] - q[:, :-1]) / h
    return gu, gv


def _avg_corner_to_center(c, grid):
    if grid.bc == PERIODIC:
        return 0.25 * (
            c + np.roll(c, -1, 0) + np.roll(c, -1, 1) + np.roll(np.roll(c, -1, 0), -1, 1)
        )
    return 0.25 * (c[:-1, :-1] + c[1:, :-1] + c[:-1, 1:] + c[1:, 1:])


def _avg_center_to_corner(s, grid):
    if grid.bc == PERIODIC:
        return 0.25 * (
            s + np.roll(s, 1, 0) + np.roll(s, 1, 1) + np.roll(np.roll(s, 1, 0), 1, 1)
        )
    nx, ny = s.shape
    c = np.zeros((nx + 1, ny + 1))
    c[:-1, :-1] += s
    c[1:, :-1] += s
    c[:-1, 1:] += s
    c[1:, 1:] += s
    return 0.25 * c


def _du_dy_corners(u, grid):
    h = grid.h
    if grid.bc == PERIODIC:
        return (u - np.roll(u, 1, 1)) / h
    ni, nj = u.shape  # (nx + 1, ny)
    c = np.zeros((ni, nj + 1))
    c[:, 1:-1] = (u[:, 1:] - u[:, :-1]) / h
    c[:, 0] = 2.0 * u[:, 0] / h        # ghost u = -u across the wall at y = 0
    c[:, -1] = -2.0 * u[:, -1] / h
    return c


def _dv_dx_corners(v, grid):
    h = grid.h
    if grid.bc == PERIODIC:
        return (v - np.roll(v, 1, 0)) / h
    ni, nj = v.shape  # (nx, ny + 1)
    c = np.zeros((ni + 1, nj))
    c[1:-1, :] = (v[1:, :] - v[:-1, :]) / h
    c[0, :] = 2.0 * v[0, :] / h
    c[-1, :] = -2.0 * v[-1, :] / h
    return c


def gradient_tensor(state, grid):
    """Velocity Jacobian collocated at cell centers: G[.., c, d] = d u_c / d x_d."""
    _check_shapes(state, grid)
    h = grid.h
    u, v = state.u, state.v
    G = np.empty(grid.shape_q + (2, 2))
    if grid.bc == PERIODIC:
        G[..., 0, 0] = (np.roll(u, -1, 0) - u) / h
        G[..., 1, 1] = (np.roll(v, -1, 1) - v) / h
    else:
        G[..., 0, 0] = (u[1:, :] - u[:-1, :]) / h
        G[..., 1, 1] = (v[:, 1:] - v[:, :-1]) / h
    G[..., 0, 1] = _avg_corner_to_center(_du_dy_corners(u, grid), grid)
    G[..., 1, 0] = _avg_corner_to_center(_dv_dx_corners(v, grid), grid)
    return G


def _du_dy_corners_adjoint(tau, grid):
    """Transpose of _du_dy_corners: corner field -> u faces (without the -1/h)."""
    h = grid.h
    if grid.bc == PERIODIC:
        return (np.roll(tau, -1, 1) - tau) / h
    out = np.zeros((tau.shape[0], tau.shape[1] - 1))
    out[:, 1:-1] = (tau[:, 2:-1] - tau[:, 1:-2]) / h
    out[:, 0] = (tau[:, 1] - 2.0 * tau[:, 0]) / h
    out[:, -1] = (2.0 * tau[:, -1] - tau[:, -2]) / h
    return out


def _dv_dx_corners_adjoint(tau, grid):
    h = grid.h
    if grid.bc == PERIODIC:
        return (np.roll(tau, -1, 0) - tau) / h
    out = np.zeros((tau.shape[0] - 1, tau.shape[1]))
    out[1:-1, :] = (tau[2:-1, :] - tau[1:-2, :]) / h
    out[0, :] = (tau[1, :] - 2.0 * tau[0, :]) / h
    out[-1, :] = (2.0 * tau[-1, :] - tau[-2, :]) / h
    return out


def divergence_of_tensor(sigma, grid):
    """Face-valued Div sigma, the exact negative adjoint of gradient_tensor.

    Satisfies sum_faces (w . Div sigma) h^2 = -sum_cells (sigma : grad w) h^2
    for every admissible velocity field w, including noslip walls.
    """
    h = grid.h
    s00, s01 = sigma[..., 0, 0], sigma[..., 0, 1]
    s10, s11 = sigma[..., 1, 0], sigma[..., 1, 1]
    tau01 = _avg_center_to_corner(s01, grid)
    tau10 = _avg_center_to_corner(s10, grid)
    if grid.bc == PERIODIC:
        du = (s00 - np.roll(s00, 1, 0)) / h
        dv = (s11 - np.roll(s11, 1, 1)) / h
    else:
        du = np.zeros(grid.shape_u)
        dv = np.zeros(grid.shape_v)
        du[1:-1, :] = (s00[1:, :] - s00[:-1, :]) / h
        dv[:, 1:-1] = (s11[:, 1:] - s11[:, :-1]) / h
    du = du + _du_dy_corners_adjoint(tau01, grid)
    dv = dv + _dv_dx_corners_adjoint(tau10, grid)
    if grid.bc == NOSLIP:
        du[0, :] = du[-1, :] = 0.0
        dv[:, 0] = dv[:, -1] = 0.0
    return du, dv


def viscous_flux(gradient, a_vals, b_vals, p):
    """Nonlinear stress sigma = grad . a + b |grad|^(p-2) grad.

    `gradient` is the (.., 2, 2) Jacobian, `a_vals` the symmetric (.., 2, 2)
    viscosity matrix, `b_vals` scalar.  |grad| is the Frobenius norm; the
    power-law term is exactly zero where the gradient vanishes (p > 2).
    """
    if p < 2:
        raise ValueError("p must be at least 2")
    lin = np.einsum("...kj,...ji->...ki", gradient, a_vals)
    mod = np.sqrt(np.sum(gradient * gradient, axis=(-2, -1)))
    if p == 2:
        nl = b_vals[..., None, None] * gradient
    else:
        nl = (b_vals * mod ** (p - 2.0))[..., None, None] * gradient
    return lin + nl


def advect_skew(state, grid):
    """Energy-neutral advection fluxes at faces.

    Central-flux (skew-symmetric) form: transport velocities are two-point
    face averages, transported quantities likewise, so the discrete trilinear
    form b_h(u, u, u) vanishes to round-off whenever the cell divergence does.
    """
    _check_shapes(state, grid)
    h = grid.h
    u, v = state.u, state.v
    if grid.bc == PERIODIC:
        ubar_x = 0.5 * (u + np.roll(u, -1, 0))          # centers
        vbar_y = 0.5 * (v + np.roll(v, -1, 1))          # centers
        ubar_y = 0.5 * (u + np.roll(u, 1, 1))           # corners
        vbar_x = 0.5 * (v + np.roll(v, 1, 0))           # corners
        f_cc_u = ubar_x * ubar_x
        f_cc_v = vbar_y * vbar_y
        f_corner = ubar_y * vbar_x
        adv_u = (f_cc_u - np.roll(f_cc_u, 1, 0)) / h + (
            np.roll(f_corner, -1, 1) - f_corner
        ) / h
        adv_v = (np.roll(f_corner, -1, 0) - f_corner) / h + (
            f_cc_v - np.roll(f_cc_v, 1, 1)
        ) / h
        return adv_u, adv_v
    # noslip: wall-normal velocities are pinned, corner fluxes on walls vanish
    ubar_x = 0.5 * (u[:-1, :] + u[1:, :])               # centers (nx, ny)
    vbar_y = 0.5 * (v[:, :-1] + v[:, 1:])
    f_cc_u = ubar_x * ubar_x
    f_cc_v = vbar_y * vbar_y
    f_corner = np.zeros((grid.nx + 1, grid.ny + 1))
    ubar_y = 0.5 * (u[:, :-1] + u[:, 1:])               # interior corner rows
    vbar_x = 0.5 * (v[:-1, :] + v[1:, :])               # interior corner columns
    f_corner[1:-1, 1:-1] = ubar_y[1:-1, :] * vbar_x[:, 1:-1]
    adv_u = np.zeros(grid.shape_u)
    adv_v = np.zeros(grid.shape_v)
    adv_u[1:-1, :] = (f_cc_u[1:, :] - f_cc_u[:-1, :]) / h + (
        f_corner[1:-1, 1:] - f_corner[1:-1, :-1]
    ) / h
    adv_v[:, 1:-1] = (f_corner[1:, 1:-1] - f_corner[:-1, 1:-1]) / h + (
        f_cc_v[:, 1:] - f_cc_v[:, :-1]
    ) / h
    return adv_u, adv_v


def trilinear_form(state, grid):
    """b_h(u, u, u) = sum advect_skew(u) . u h^2 (should vanish on H)."""
    adv_u, adv_v = advect_skew(state, grid)
    return float(
        (np.sum(adv_u * state.u) + np.sum(adv_v * state.v)) * grid.h**2
    )


# -- norms ----------------------------------------------------------------------

def kinetic_energy(state, grid, rho_faces=None):
    """integral |u|^2 (or the rho-weighted version when rho_faces given)."""
    if rho_faces is None:
        s = np.sum(state.u**2) + np.sum(state.v**2)
    else:
        ru, rv = rho_faces
        s = np.sum(ru * state.u**2) + np.sum(rv * state.v**2)
    return float(s * grid.h**2)


def grad_norms(G, grid, p):
    """(||grad u||_2^2, ||grad u||_p^p) from a collocated gradient tensor."""
    sq = np.sum(G * G, axis=(-2, -1))
    h2 = grid.h**2
    return float(np.sum(sq) * h2), float(np.sum(sq ** (p / 2.0)) * h2)


def pressure_norm(q, grid, p_conj):
    return float((np.sum(np.abs(q) ** p_conj) * grid.h**2) ** (1.0 / p_conj))


# -- Leray projection -------------------------------------------------------------

def rho_cells_to_faces(rho_cells, grid):
    """Two-point average of a cell field onto both face families."""
    r = np.asarray(rho_cells, dtype=float)
    if grid.bc == PERIODIC:
        ru = 0.5 * (r + np.roll(r, 1, 0))
        rv = 0.5 * (r + np.roll(r, 1, 1))
        return ru, rv
    ru = np.zeros(grid.shape_u)
    rv = np.zeros(grid.shape_v)
    ru[1:-1, :] = 0.5 * (r[1:, :] + r[:-1, :])
    ru[0, :], ru[-1, :] = r[0, :], r[-1, :]
    rv[:, 1:-1] = 0.5 * (r[:, 1:] + r[:, :-1])
    rv[:, 0], rv[:, -1] = r[:, 0], r[:, -1]
    return ru, rv


class Projector:
    """Discrete Helmholtz-Leray projection onto divergence-free fields.

    With face densities it projects in the rho-weighted inner product, i.e.
    the removed component is rho^-1 grad(phi).  Periodic constant-density
    grids use an FFT Poisson solve; everything else a cached sparse LU.
    """

    def __init__(self, grid, rho_faces=None):
        self.grid = grid
        self.rho_faces = rho_faces
        if rho_faces is None:
            self.wu = self.wv = None
        else:
            ru, rv = rho_faces
            self.wu, self.wv = 1.0 / ru, 1.0 / rv
            if grid.bc == NOSLIP:  # wall faces never move
                self.wu = self.wu.copy()
                self.wv = self.wv.copy()
                self.wu[0, :] = self.wu[-1, :] = 0.0
                self.wv[:, 0] = self.wv[:, -1] = 0.0
        if grid.bc == PERIODIC and rho_faces is None:
            n = grid.nx
            theta = 2.0 * np.pi * np.fft.fftfreq(n)
            cx = np.cos(theta)[:, None]
            cy = np.cos(theta)[None, :]
            sym = (2.0 * cx - 2.0 + 2.0 * cy - 2.0) / grid.h**2
            sym[0, 0] = 1.0  # zero mode handled separately
            self._symbol = sym
            self._lu = None
        else:
            self._symbol = None
            self._lu = spla.splu(self._assemble().tocsc())

    def _weights(self):
        if self.wu is not None:
            return self.wu, self.wv
        grid = self.grid
        wu = np.ones(grid.shape_u)
        wv = np.ones(grid.shape_v)
        if grid.bc == NOSLIP:
            wu[0, :] = wu[-1, :] = 0.0
            wv[:, 0] = wv[:, -1] = 0.0
        return wu, wv

    def _assemble(self):
        grid = self.grid
        nx, ny = grid.nx, grid.ny
        h2 = grid.h**2
        wu, wv = self._weights()
        idx = np.arange(nx * ny).reshape(nx, ny)
        rows, cols, vals = [], [], []

        def add(rc, cc, val):
            rows.append(rc.ravel())
            cols.append(cc.ravel())
            vals.append(val.ravel())

        if grid.bc == PERIODIC:
            wE = np.roll(wu, -1, 0)  # weight on the face east of each cell
            wW = wu
            wN = np.roll(wv, -1, 1)
            wS = wv
            east = np.roll(idx, -1, 0)
            west = np.roll(idx, 1, 0)
            north = np.roll(idx, -1, 1)
            south = np.roll(idx, 1, 1)
        else:
            wE = wu[1:, :]
            wW = wu[:-1, :]
            wN = wv[:, 1:]
            wS = wv[:, :-1]
            pad = -1
            east = np.full((nx, ny), pad)
            east[:-1, :] = idx[1:, :]
            west = np.full((nx, ny), pad)
            west[1:, :] = idx[:-1, :]
            north = np.full((nx, ny), pad)
            north[:, :-1] = idx[:, 1:]
            south = np.full((nx, ny), pad)
            south[:, 1:] = idx[:, :-1]
        diag = -(wE + wW + wN + wS) / h2
        add(idx, idx, diag)
        for nb, w in ((east, wE), (west, wW), (north, wN), (south, wS)):
            mask = nb >= 0
            rows.append(idx[mask])
            cols.append(nb[mask])
            vals.append((w / h2)[mask])
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nx * ny, nx * ny),
        ).tolil()
        mat[0, :] = 0.0
        mat[0, 0] = 1.0  # pin the constant nullspace
        return mat

    def solve_poisson(self, rhs):
        """Solve div(w grad phi) = rhs with the compatible zero-mean gauge."""
        scale = float(np.max(np.abs(rhs)))
        # exact telescoping makes the mean vanish; the floor absorbs round-off
        # of fields that are already divergence-free
        if abs(float(np.mean(rhs))) > 1e-12 * scale + 1e-13:
            raise LadyError("internal: Poisson right-hand side has nonzero mean")
        if self._symbol is not None:
            rhat = np.fft.fft2(rhs)
            rhat[0, 0] = 0.0
            phi = np.real(np.fft.ifft2(rhat / self._symbol))
        else:
            b = rhs.ravel().copy()
            b[0] = 0.0
            phi = self._lu.solve(b).reshape(rhs.shape)
        return phi - np.mean(phi)

    def project(self, state):
        """Return (projected state, phi).  The state's q is left untouched."""
        grid = self.grid
        rhs = divergence(state, grid)
        phi = self.solve_poisson(rhs)
        gu, gv = pressure_gradient(phi, grid)
        wu, wv = self._weights()
        out = FlowState(state.u - wu * gu, state.v - wv * gv, state.q, state.time)
        return out, phi


def leray_project(state, grid, rho_cells=None, rho_faces=None):
    """Project onto discretely divergence-free fields; q becomes the zero-mean
    pressure increment of the solve."""
    if rho_faces is None and rho_cells is not None:
        rho_faces = rho_cells_to_faces(rho_cells, grid)
    proj = Projector(grid, rho_faces)
    out, phi = proj.project(state)
    out.q = phi
    return out
