"""Macroscopic solver: the homogenized problem with the effective flux law.

Stepping is byte-for-byte the micro scheme with three substitutions: the
pointwise stress sigma(grad u) becomes the effective law F(grad u) evaluated
per cell, the oscillating density becomes its mean, and the forcing becomes
its (y, tau)-mean.  Identical discrete operators make micro-to-macro
comparisons a pure modeling difference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

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
)
from .micro_solver import Trajectory

log = logging.getLogger(__name__)


def mean_forcing(coeffs, u_sample):
    """Mean of rho f(tau, u): rho and f depend on separate variables, so the
    (y, tau)-mean factorizes into the product of means."""
    rho_bar = coeffs.rho.mean_value()
    g_bar = coeffs.forcing.mean_g()
    r = np.asarray(u_sample, dtype=float)
    return rho_bar * (g_bar + coeffs.forcing.saturation_gain * saturation(r))


def macro_stable_dt(law, grid, gmax, cfl_safety=0.4):
    return cfl_safety * grid.h**2 / (2.0 * law.lipschitz_bound(gmax))


@dataclass
class HomogenizedProblem:
    rho_bar: float
    law: object                  # EffectiveLaw
    coeffs: CoefficientSet       # supplies the forcing (and rho mean)
    grid: MacGrid
    T: float
    dt: float
    u0: FlowState
    gmax: float = 4.0
    cfl_safety: float = 0.4
    snapshot_times: np.ndarray | None = None
    diag_stride: int = 1

    def __post_init__(self):
        if self.rho_bar <= 0:
            raise ValueError("mean density must be positive")
        limit = macro_stable_dt(self.law, self.grid, self.gmax, self.cfl_safety)
        if self.dt > limit * (1.0 + 1e-12):
            raise ValueError(
                f"dt = {self.dt:.3e} violates the effective-law CFL bound "
                f"{limit:.3e}"
            )

    @staticmethod
    def from_coefficient_set(coeffs, law, grid, T, dt, u0, **kw):
        return HomogenizedProblem(
            rho_bar=coeffs.rho.mean_value(), law=law, coeffs=coeffs, grid=grid,
            T=T, dt=dt, u0=u0, **kw,
        )

    @property
    def p(self):
        return self.law.p


class MacroStepper:
    def __init__(self, problem):
        self.problem = problem
        self.grid = problem.grid
        self.p = problem.law.p
        self.projector = Projector(self.grid)  # constant density: plain projection
        self._g_mean = problem.coeffs.forcing.mean_g()
        self._gain = problem.coeffs.forcing.saturation_gain

    def forcing_at(self, state):
        fu = self._g_mean[0] + self._gain * saturation(state.u)
        fv = self._g_mean[1] + self._gain * saturation(state.v)
        return fu, fv

    def step(self, state, t=None):
        problem, grid = self.problem, self.grid
        dt = problem.dt
        t = state.time if t is None else t
        G = gradient_tensor(state, grid)
        m, Mx = problem.law.evaluate_batch(G)
        sigma = m + Mx
        du, dv = divergence_of_tensor(sigma, grid)
        au, av = advect_skew(state, grid)
        fu, fv = self.forcing_at(state)
        inv_rho = 1.0 / problem.rho_bar
        u_star = state.u + dt * ((du - au) * inv_rho + fu)
        v_star = state.v + dt * ((dv - av) * inv_rho + fv)
        if not (np.all(np.isfinite(u_star)) and np.all(np.isfinite(v_star))):
            for name, arrs in (("effective flux divergence", (du, dv)),
                               ("advection", (au, av))):
                if not all(np.all(np.isfinite(a)) for a in arrs):
                    raise InstabilityError(name)
            raise InstabilityError("update")
        trial = FlowState(u_star, v_star, state.q, t + dt)
        enforce_bc(trial, grid)
        out, phi = self.projector.project(trial)
        out.q = phi / dt
        out.q -= np.mean(out.q)
        out.time = t + dt
        return out

    def diagnostics_row(self, state):
        grid, p = self.grid, self.p
        G = gradient_tensor(state, grid)
        h1, wp = grad_norms(G, grid, p)
        p_conj = p / (p - 1.0)
        rho_u = (np.full(grid.shape_u, self.problem.rho_bar),
                 np.full(grid.shape_v, self.problem.rho_bar))
        return (
            state.time,
            kinetic_energy(state, grid),
            kinetic_energy(state, grid, rho_u),
            h1,
            wp,
            pressure_norm(state.q, grid, p_conj),
        )


def solve_homogenized(problem):
    """Integrate the homogenized problem; trajectory format matches micro."""
    stepper = MacroStepper(problem)
    grid = problem.grid
    state = problem.u0.copy()
    enforce_bc(state, grid)
    scale = np.max(np.abs(state.u)) + np.max(np.abs(state.v)) + 1.0
    if np.max(np.abs(divergence(state, grid))) > 1e-10 * scale:
        log.warning("initial data not divergence-free; projecting once")
        state, _ = stepper.projector.project(state)
    state.time = 0.0
    state.q = np.zeros(grid.shape_q)
    n_steps = int(round(problem.T / problem.dt)) if problem.T > 0 else 0
    if problem.T > 0 and abs(n_steps * problem.dt - problem.T) > 1e-9 * problem.T:
        raise ValueError("T must be an integer multiple of dt")
    want = None
    if problem.snapshot_times is not None:
        want = sorted(float(t) for t in problem.snapshot_times)
    traj = Trajectory(grid=grid)
    rows = [stepper.diagnostics_row(state)]

    def record(s):
        traj.snapshot_times.append(s.time)
        traj.snapshots.append(s.copy())

    if want is None:
        want = [0.0, n_steps * problem.dt] if n_steps > 0 else [0.0]
    pending = list(want)
    if pending and abs(pending[0]) <= 0.5 * problem.dt:
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
