"""Explicit time integrator for the oscillating-coefficient flow problem.

One step: u* = u + dt * rho_eps^-1 [Div sigma(grad u) - advection + rho_eps f],
followed by the rho-weighted Leray projection.  Coefficients are sampled
pointwise: the viscosities at cell centers (where the stress lives), the
density at faces (where velocities live).  Diagnostics mirror the a-priori
energy estimates: kinetic and weighted energy, H1 and W1p gradient norms,
and the conjugate-exponent pressure norm, recorded every step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ap_field import CoefficientSet, saturation
from .errors import InstabilityError
from .grid_core import (
    FlowState,
    MacGrid,
    Projector,
    advect_skew,
    divergence,
    divergence_of_tensor,
    enforce_bc,
    grad_norms,
    gradient_tensor,
    kinetic_energy,
    pressure_norm,
    viscous_flux,
)

log = logging.getLogger(__name__)

DEFAULT_CFL_SAFETY = 0.4


def stable_dt(coeffs, grid, gmax, cfl_safety=DEFAULT_CFL_SAFETY):
    """Largest admissible explicit step for the p-dependent diffusive CFL."""
    p = coeffs.p
    denom = 2.0 * (coeffs.bounds.nu2 * max(1.0, gmax ** (p - 2.0)) + coeffs.a_sup_bound)
    return cfl_safety * grid.h**2 / denom


@dataclass
class MicroProblem:
    coeffs: CoefficientSet
    eps: float
    grid: MacGrid
    T: float
    dt: float
    u0: FlowState
    gmax: float = 4.0
    cfl_safety: float = DEFAULT_CFL_SAFETY
    snapshot_times: np.ndarray | None = None
    diag_stride: int = 1  # record diagnostics every this many steps

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.T < 0 or self.dt <= 0:
            raise ValueError("T must be nonnegative and dt positive")
        limit = stable_dt(self.coeffs, self.grid, self.gmax, self.cfl_safety)
        if self.dt > limit * (1.0 + 1e-12):
            raise ValueError(
                f"dt = {self.dt:.3e} violates the CFL bound {limit:.3e} "
                f"(gmax = {self.gmax}, cfl_safety = {self.cfl_safety})"
            )
        if self.grid.h > self.eps / 8.0 * (1.0 + 1e-12):
            log.warning(
                "grid h = %.4g does not resolve oscillations at eps = %.4g "
                "(want h <= eps/8)", self.grid.h, self.eps,
            )

    @property
    def p(self):
        return self.coeffs.p


@dataclass
class Trajectory:
    """Snapshot record plus per-step diagnostics.

    ``diagnostics`` has one row per recorded time with columns
    (t, E, E_rho, H1, Wp, q_norm).
    """

    snapshot_times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    diagnostics: np.ndarray | None = None
    grid: MacGrid | None = None

    COLUMNS = ("t", "E", "E_rho", "H1", "Wp", "q_norm")

    def column(self, name):
        return self.diagnostics[:, self.COLUMNS.index(name)]

    def final_state(self):
        return self.snapshots[-1]


@dataclass
class EnergyReport:
    sup_energy: float          # sup_t |u(t)|^2
    h1_dissipation: float      # int_0^T ||grad u||_2^2 dt
    wp_dissipation: float      # int_0^T ||grad u||_p^p dt
    sup_pressure: float        # sup_t ||q||_{p'}

    def as_tuple(self):
        return (self.sup_energy, self.h1_dissipation, self.wp_dissipation,
                self.sup_pressure)


class MicroStepper:
    """Holds the sampled coefficient fields and the projection factorization."""

    def __init__(self, problem):
        self.problem = problem
        grid, coeffs, eps = problem.grid, problem.coeffs, problem.eps
        self.grid = grid
        self.p = coeffs.p
        centers = grid.cell_coords()
        self._centers = centers
        ru = coeffs.sample_rho(eps, grid.u_face_coords())
        rv = coeffs.sample_rho(eps, grid.v_face_coords())
        self.rho_faces = (ru, rv)
        self.inv_ru, self.inv_rv = 1.0 / ru, 1.0 / rv
        self.projector = Projector(grid, rho_faces=self.rho_faces)
        self._frozen = coeffs.a_is_time_independent() and coeffs.b_is_time_independent()
        if self._frozen:
            self._a_c = coeffs.sample_a(eps, centers, 0.0)
            self._b_c = coeffs.sample_b(eps, centers, 0.0)
        else:
            log.warning("tau-dependent viscosities: resampling every step")

    def coefficients_at(self, t):
        if self._frozen:
            return self._a_c, self._b_c
        coeffs, eps = self.problem.coeffs, self.problem.eps
        return (coeffs.sample_a(eps, self._centers, t),
                coeffs.sample_b(eps, self._centers, t))

    def forcing_at(self, t, state):
        coeffs, eps = self.problem.coeffs, self.problem.eps
        tau = t / eps**2
        law = coeffs.forcing
        gx = law.g[0].evaluate((tau,))
        gy = law.g[1].evaluate((tau,))
        gain = law.saturation_gain
        fu = gx + gain * saturation(state.u)
        fv = gy + gain * saturation(state.v)
        return fu, fv

    def step(self, state, t=None):
        """Advance one explicit step; returns the projected state at t + dt."""
        problem, grid = self.problem, self.grid
        dt = problem.dt
        t = state.time if t is None else t
        a_c, b_c = self.coefficients_at(t)
        G = gradient_tensor(state, grid)
        sigma = viscous_flux(G, a_c, b_c, self.p)
        du, dv = divergence_of_tensor(sigma, grid)
        au, av = advect_skew(state, grid)
        fu, fv = self.forcing_at(t, state)
        u_star = state.u + dt * ((du - au) * self.inv_ru + fu)
        v_star = state.v + dt * ((dv - av) * self.inv_rv + fv)
        if not (np.all(np.isfinite(u_star)) and np.all(np.isfinite(v_star))):
            for name, arrs in (("viscous flux divergence", (du, dv)),
                               ("advection", (au, av)),
                               ("forcing", (fu, fv))):
                if not all(np.all(np.isfinite(a)) for a in arrs):
                    raise InstabilityError(name)
            raise InstabilityError("update")
        trial = FlowState(u_star, v_star, state.q, t + dt)
        enforce_bc(trial, grid)
        out, phi = self.projector.project(trial)
        if not (np.all(np.isfinite(out.u)) and np.all(np.isfinite(out.v))):
            raise InstabilityError("projection")
        out.q = phi / dt
        out.q -= np.mean(out.q)
        out.time = t + dt
        return out

    def diagnostics_row(self, state):
        grid, p = self.grid, self.p
        G = gradient_tensor(state, grid)
        h1, wp = grad_norms(G, grid, p)
        p_conj = p / (p - 1.0)
        return (
            state.time,
            kinetic_energy(state, grid),
            kinetic_energy(state, grid, self.rho_faces),
            h1,
            wp,
            pressure_norm(state.q, grid, p_conj),
        )


def step(state, problem):
    """One explicit step (builds a fresh stepper; use MicroStepper for runs)."""
    return MicroStepper(problem).step(state)


def _prepare_initial(problem, stepper):
    grid = problem.grid
    state = problem.u0.copy()
    enforce_bc(state, grid)
    scale = np.max(np.abs(state.u)) + np.max(np.abs(state.v)) + 1.0
    if np.max(np.abs(divergence(state, grid))) > 1e-10 * scale:
        log.warning("initial data not divergence-free; projecting once")
        state, _ = stepper.projector.project(state)
    state.time = 0.0
    state.q = np.zeros(grid.shape_q)
    return state


def solve(problem):
    """Integrate to T, recording per-step diagnostics and requested snapshots."""
    stepper = MicroStepper(problem)
    state = _prepare_initial(problem, stepper)
    n_steps = int(round(problem.T / problem.dt)) if problem.T > 0 else 0
    if problem.T > 0 and abs(n_steps * problem.dt - problem.T) > 1e-9 * problem.T:
        raise ValueError("T must be an integer multiple of dt")
    want = None
    if problem.snapshot_times is not None:
        want = sorted(float(t) for t in problem.snapshot_times)
        for t in want:
            if abs(t / problem.dt - round(t / problem.dt)) > 1e-6:
                raise ValueError(f"snapshot time {t} is not a multiple of dt")
    traj = Trajectory(grid=problem.grid)
    rows = [stepper.diagnostics_row(state)]

    def record(s):
        traj.snapshot_times.append(s.time)
        traj.snapshots.append(s.copy())

    if want is None:
        want = [0.0, n_steps * problem.dt] if n_steps > 0 else [0.0]
    pending = list(want)
    if pending and abs(pending[0] - 0.0) <= 0.5 * problem.dt:
        record(state)
        pending.pop(0)
    stride = max(1, int(problem.diag_stride))
    for n in range(n_steps):
        state = stepper.step(state)
        if (n + 1) % stride == 0 or n == n_steps - 1:
            rows.append(stepper.diagnostics_row(state))
        if pending and abs(state.time - pending[0]) <= 0.5 * problem.dt:
            record(state)
            pending.pop(0)
    traj.diagnostics = np.array(rows)
    if not traj.snapshots:
        record(state)
    return traj


def energy_report(traj):
    """Time-integrated mirror of the a-priori estimates."""
    if traj.diagnostics is None or len(traj.diagnostics) == 0:
        raise ValueError("empty trajectory")
    d = traj.diagnostics
    t = d[:, 0]
    if len(t) == 1:
        return EnergyReport(float(d[0, 1]), 0.0, 0.0, float(d[0, 5]))
    return EnergyReport(
        sup_energy=float(np.max(d[:, 1])),
        h1_dissipation=float(np.trapezoid(d[:, 3], t)),
        wp_dissipation=float(np.trapezoid(d[:, 4], t)),
        sup_pressure=float(np.max(d[:, 5])),
    )
