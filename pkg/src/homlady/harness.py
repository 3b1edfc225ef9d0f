"""Experiment orchestration: scenario registry, epsilon sweeps, error metrics,
the Sigma-convergence functional test, and deterministic report emission."""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ap_field import Bounds, CoefficientSet, ForcingLaw, TrigPolynomial
from .cell_solver import CellProblemSpec, EffectiveLaw, solve_corrector_batch
from .errors import LadyError, StudyError
from .grid_core import (
    NOSLIP,
    PERIODIC,
    FlowState,
    MacGrid,
    gradient_tensor,
    leray_project,
    zero_state,
)
from .macro_solver import HomogenizedProblem, macro_stable_dt, solve_homogenized
from .micro_solver import MicroProblem, energy_report, solve as micro_solve, stable_dt

STUDY_SCHEMA = "ladystudy/1"
REPORT_SCHEMA = "ladyreport/1"
TWO_PI = 2.0 * np.pi


# -- scenarios --------------------------------------------------------------------

def laminate_scenario(p=3.0, forcing_amp=1.0, saturation_gain=0.25):
    """Spatial laminate: a = (2 + cos 2 pi y1) I, b = 1 + cos(2 pi y1)/2,
    rho = 1 + 0.4 cos(2 pi y1), tau-oscillating forcing."""
    a_diag = TrigPolynomial.from_cosines(3, [((TWO_PI, 0.0, 0.0), 1.0)]) + 2.0
    a_off = TrigPolynomial(3, ())
    b = TrigPolynomial.from_cosines(3, [((TWO_PI, 0.0, 0.0), 0.5)]) + 1.0
    rho = TrigPolynomial.from_cosines(2, [((TWO_PI, 0.0), 0.4)]) + 1.0
    gx = TrigPolynomial.from_cosines(1, [((1.0,), 0.5 * forcing_amp)]) + forcing_amp
    gy = TrigPolynomial(1, ())
    k = max(1.5 * abs(forcing_amp), saturation_gain, 1e-9)
    return CoefficientSet(
        rho=rho,
        a=((a_diag, a_off), (a_off, a_diag)),
        b=b,
        forcing=ForcingLaw((gx, gy), saturation_gain=saturation_gain),
        bounds=Bounds(nu0=1.0, nu1=0.5, nu2=1.5, Lambda=1.0 / 0.6, lipschitz_k=k),
        p=p,
    )


def constant_scenario(p=2.0, nu0=1.0, nu1=0.5, forcing_amp=0.0):
    a_diag = TrigPolynomial.constant(nu0, 3)
    a_off = TrigPolynomial(3, ())
    gx = TrigPolynomial.constant(forcing_amp)
    gy = TrigPolynomial(1, ())
    return CoefficientSet(
        rho=TrigPolynomial.constant(1.0, 2),
        a=((a_diag, a_off), (a_off, a_diag)),
        b=TrigPolynomial.constant(nu1, 3),
        forcing=ForcingLaw((gx, gy)),
        bounds=Bounds(nu0=nu0, nu1=nu1, nu2=nu1, Lambda=1.0,
                      lipschitz_k=max(abs(forcing_amp), 1e-9)),
        p=p,
    )


SCENARIOS = {"laminate": laminate_scenario, "constant": constant_scenario}


# -- initial data -----------------------------------------------------------------

def initial_state(grid, kind, amplitude):
    s = zero_state(grid)
    xu, xv = grid.u_face_coords(), grid.v_face_coords()
    if kind == "zero":
        return s
    if kind == "taylor_green":
        k = TWO_PI
        s.u[:] = amplitude * np.sin(k * xu[..., 0]) * np.cos(k * xu[..., 1])
        s.v[:] = -amplitude * np.cos(k * xv[..., 0]) * np.sin(k * xv[..., 1])
    elif kind == "stream_bump":
        # psi = A f(x) g(y) with f = sin^2(pi x)(1 + 0.6 x) and
        # g = sin^2(pi y)(1 + 0.8 y): velocity and its tangential trace vanish
        # on the boundary; the tilts break the x/y reflection symmetries that
        # would otherwise cancel weak oscillatory pairings exactly
        pi_ = np.pi

        def f(x):
            return np.sin(pi_ * x) ** 2 * (1.0 + 0.6 * x)

        def fp(x):
            return (pi_ * np.sin(2.0 * pi_ * x) * (1.0 + 0.6 * x)
                    + 0.6 * np.sin(pi_ * x) ** 2)

        def g(y):
            return np.sin(pi_ * y) ** 2 * (1.0 + 0.8 * y)

        def gp(y):
            return (pi_ * np.sin(2.0 * pi_ * y) * (1.0 + 0.8 * y)
                    + 0.8 * np.sin(pi_ * y) ** 2)

        s.u[:] = amplitude * f(xu[..., 0]) * gp(xu[..., 1])
        s.v[:] = -amplitude * fp(xv[..., 0]) * g(xv[..., 1])
    else:
        raise ValueError(f"unknown initial data kind {kind!r}")
    return leray_project(s, grid)


# -- grid transfer ----------------------------------------------------------------

def restrict_state(state, grid_fine, grid_coarse):
    """Conservative face averaging onto a coarser grid of the same bc.

    Coarse faces are geometric subsets of fine face lines; the restriction
    averages the fine values on each coarse face, which commutes with the
    discrete divergence (block mean of fine divergences).
    """
    if grid_fine.bc != grid_coarse.bc:
        raise ValueError("grids must share the boundary condition")
    r = grid_fine.nx // grid_coarse.nx
    if r * grid_coarse.nx != grid_fine.nx:
        raise ValueError("fine resolution must be an integer multiple of coarse")
    if r == 1:
        return state.copy()
    u, v, q = state.u, state.v, state.q
    if grid_fine.bc == PERIODIC:
        uc = u[::r, :].reshape(grid_coarse.nx, grid_coarse.ny, r).mean(axis=-1)
        vc = v[:, ::r].reshape(grid_coarse.nx, r, grid_coarse.ny).mean(axis=1)
    else:
        uc = u[::r, :].reshape(grid_coarse.nx + 1, grid_coarse.ny, r).mean(axis=-1)
        vc = v[:, ::r].reshape(grid_coarse.nx, r, grid_coarse.ny + 1).mean(axis=1)
    qc = q.reshape(grid_coarse.nx, r, grid_coarse.ny, r).mean(axis=(1, 3))
    return FlowState(uc, vc, qc, state.time)


def l2_state_distance(a, b, grid):
    du = a.u - b.u
    dv = a.v - b.v
    return float(np.sqrt((np.sum(du**2) + np.sum(dv**2)) * grid.h**2))


def l2_qt_error(traj_fine, grid_fine, traj_coarse, grid_coarse):
    """L^2(Q x (0,T)) velocity distance on common snapshot times, evaluated on
    the coarser grid."""
    times = traj_coarse.snapshot_times
    if len(traj_fine.snapshot_times) != len(times):
        raise ValueError("trajectories must share snapshot times")
    vals = []
    for sf, sc, (tf, tc) in zip(traj_fine.snapshots, traj_coarse.snapshots,
                                zip(traj_fine.snapshot_times, times)):
        if abs(tf - tc) > 1e-9 * max(1.0, abs(tc)):
            raise ValueError("snapshot times differ between runs")
        if grid_fine.nx >= grid_coarse.nx:
            d = l2_state_distance(restrict_state(sf, grid_fine, grid_coarse), sc,
                                  grid_coarse)
        else:
            d = l2_state_distance(sf, restrict_state(sc, grid_coarse, grid_fine),
                                  grid_fine)
        vals.append(d**2)
    return float(np.sqrt(np.trapezoid(vals, times)))


def transfer_cell_field(field, grid_from, grid_to):
    """Map a cell field between grids: piecewise-constant prolongation when
    refining, block mean when coarsening (leading two axes are the grid)."""
    if grid_to.nx >= grid_from.nx:
        r = grid_to.nx // grid_from.nx
        return np.repeat(np.repeat(field, r, axis=0), r, axis=1)
    r = grid_from.nx // grid_to.nx
    shape = (grid_to.nx, r, grid_to.ny, r) + field.shape[2:]
    return field.reshape(shape).mean(axis=(1, 3))


# -- corrector-augmented gradient error --------------------------------------------

class CorrectorFieldCache:
    """Corrector velocity fields on a coarse gradient lattice, for the
    two-scale error measurement."""

    def __init__(self, spec_proto, quant=0.25):
        self.proto = spec_proto
        self.quant = quant
        self._fields = {}

    def _solve_missing(self, keys):
        missing = [k for k in keys if k not in self._fields]
        if not missing:
            return
        xis = np.array(missing, dtype=float).reshape(-1, 2, 2) * self.quant
        _, _, fields = solve_corrector_batch(xis, self.proto, return_fields=True)
        for key, pi in zip(missing, fields):
            self._fields[key] = pi

    def keys_for(self, xi_cells):
        keys = np.round(np.asarray(xi_cells).reshape(-1, 4) / self.quant).astype(int)
        self._solve_missing(sorted({tuple(k) for k in keys}))
        return keys

    def sample_component(self, keys, comp, y_points):
        """pi_comp(node(key))(y) at torus points, bilinearly interpolated."""
        M = self.proto.resolution
        Q = self.proto.Q
        yy = (np.asarray(y_points) % Q) / (Q / M)
        i0 = np.floor(yy[:, 0]).astype(int) % M
        j0 = np.floor(yy[:, 1]).astype(int) % M
        fx = yy[:, 0] - np.floor(yy[:, 0])
        fy = yy[:, 1] - np.floor(yy[:, 1])
        i1 = (i0 + 1) % M
        j1 = (j0 + 1) % M
        out = np.empty(keys.shape[0])
        for key in {tuple(k) for k in keys}:
            mask = np.all(keys == np.array(key), axis=1)
            g = self._fields[key][comp]  # (M, M)
            out[mask] = ((1 - fx[mask]) * (1 - fy[mask]) * g[i0[mask], j0[mask]]
                         + fx[mask] * (1 - fy[mask]) * g[i1[mask], j0[mask]]
                         + (1 - fx[mask]) * fy[mask] * g[i0[mask], j1[mask]]
                         + fx[mask] * fy[mask] * g[i1[mask], j1[mask]])
        return out


def corrector_velocity_state(grid_eps, eps, G0_cells, corr_cache):
    """Discrete reconstruction of the first-order two-scale term.

    Samples eps * pi(grad u0)(x / eps) at the micro faces, so the corrector
    gradient below carries the same discrete attenuation as the solved field.
    """
    nx, ny = grid_eps.nx, grid_eps.ny
    keys_cells = corr_cache.keys_for(G0_cells).reshape(nx, ny, 4)
    w = zero_state(grid_eps)
    xu = grid_eps.u_face_coords()
    cell_of_u = np.minimum(np.arange(xu.shape[0]), nx - 1)
    keys_u = keys_cells[cell_of_u, :, :].reshape(-1, 4)
    w.u[:] = eps * corr_cache.sample_component(
        keys_u, 0, (xu.reshape(-1, 2) / eps)).reshape(xu.shape[:2])
    xv = grid_eps.v_face_coords()
    cell_of_v = np.minimum(np.arange(xv.shape[1]), ny - 1)
    keys_v = keys_cells[:, cell_of_v, :].reshape(-1, 4)
    w.v[:] = eps * corr_cache.sample_component(
        keys_v, 1, (xv.reshape(-1, 2) / eps)).reshape(xv.shape[:2])
    if grid_eps.bc == NOSLIP:
        w.u[0, :] = w.u[-1, :] = 0.0
        w.v[:, 0] = w.v[:, -1] = 0.0
    return w


def gradient_errors(traj_eps, grid_eps, eps, macro_traj, macro_grid,
                    corr_cache):
    """(plain, corrected) L^2(Q_T) gradient errors on the micro grid.

    The corrected error subtracts the discrete gradient of the reconstructed
    corrector velocity eps * pi(grad u0)(x / eps); evaluation happens on the
    fine (micro) grid because the corrector oscillates at scale eps.  The
    t = 0 snapshot is excluded: the oscillatory structure only develops after
    an initial layer, so both errors integrate over positive times.
    """
    keep = [i for i, t in enumerate(traj_eps.snapshot_times) if t > 0.0]
    times = [traj_eps.snapshot_times[i] for i in keep]
    plain_sq, corr_sq = [], []
    for s_eps, s0 in zip([traj_eps.snapshots[i] for i in keep],
                         [macro_traj.snapshots[i] for i in keep]):
        G_eps = gradient_tensor(s_eps, grid_eps)
        G0 = gradient_tensor(s0, macro_grid)
        G0_f = transfer_cell_field(G0, macro_grid, grid_eps)
        diff = G_eps - G0_f
        plain_sq.append(np.sum(diff**2) * grid_eps.h**2)
        w = corrector_velocity_state(grid_eps, eps, G0_f.reshape(-1, 2, 2),
                                     corr_cache)
        diff_corr = diff - gradient_tensor(w, grid_eps)
        corr_sq.append(np.sum(diff_corr**2) * grid_eps.h**2)
    plain = float(np.sqrt(np.trapezoid(plain_sq, times)))
    corr = float(np.sqrt(np.trapezoid(corr_sq, times)))
    return plain, corr


def pressure_weak_error(traj_eps, grid_eps, macro_traj, macro_grid):
    """|integral (q_eps - q_0) phi dx dt| for phi = sin(pi x) sin(pi y).

    Each pairing is computed on its own grid, so no transfer enters.
    """
    def pairings(traj, grid):
        c = grid.cell_coords()
        phi = np.sin(np.pi * c[..., 0]) * np.sin(np.pi * c[..., 1])
        return [float(np.sum(s.q * phi) * grid.h**2) for s in traj.snapshots]

    pe = pairings(traj_eps, grid_eps)
    p0 = pairings(macro_traj, macro_grid)
    diffs = np.array(pe) - np.array(p0)
    return float(abs(np.trapezoid(diffs, traj_eps.snapshot_times)))


# -- Sigma-convergence functional test ----------------------------------------------

@dataclass(frozen=True)
class SigmaTestFn:
    """Oscillatory test function envelope(x, t) * poly(y, tau) * e_component."""

    name: str
    micro: TrigPolynomial     # dim 2 (y only) or dim 3 (y, tau)
    component: int = 0
    envelope: str = "bump"

    def envelope_at(self, x, t, T):
        if self.envelope == "one":
            return np.ones(x.shape[:-1])
        env = (np.sin(np.pi * x[..., 0]) ** 2) * (np.sin(np.pi * x[..., 1]) ** 2)
        if T > 0:
            env = env * np.sin(np.pi * t / T) ** 2
        return env


def _center_velocity(state, grid, component):
    if grid.bc == PERIODIC:
        if component == 0:
            return 0.5 * (state.u + np.roll(state.u, -1, 0))
        return 0.5 * (state.v + np.roll(state.v, -1, 1))
    if component == 0:
        return 0.5 * (state.u[:-1, :] + state.u[1:, :])
    return 0.5 * (state.v[:, :-1] + state.v[:, 1:])


def sigma_test(traj_eps, grid_eps, eps, macro_traj, macro_grid, test_fn, T):
    """Weak two-scale pairing test.

    lhs pairs the oscillating solution with the rescaled test function;
    rhs pairs the homogenized solution with the (y, tau)-mean of the test
    function (exact for trigonometric polynomials).  Both integrals use
    snapshot trapezoid quadrature on their own grids.
    """
    c_eps = grid_eps.cell_coords()
    lhs_t = []
    for s, t in zip(traj_eps.snapshots, traj_eps.snapshot_times):
        u_c = _center_velocity(s, grid_eps, test_fn.component)
        env = test_fn.envelope_at(c_eps, t, T)
        if test_fn.micro.dim == 2:
            osc = test_fn.micro.scale_sample(eps, x=c_eps)
        else:
            osc = test_fn.micro.scale_sample(eps, x=c_eps, t=t)
        lhs_t.append(float(np.sum(u_c * env * osc) * grid_eps.h**2))
    lhs = float(np.trapezoid(lhs_t, traj_eps.snapshot_times))
    mean = test_fn.micro.mean_value()
    c0 = macro_grid.cell_coords()
    rhs_t = []
    for s, t in zip(macro_traj.snapshots, macro_traj.snapshot_times):
        u_c = _center_velocity(s, macro_grid, test_fn.component)
        env = test_fn.envelope_at(c0, t, T)
        rhs_t.append(float(np.sum(u_c * env * mean) * macro_grid.h**2))
    rhs = float(np.trapezoid(rhs_t, macro_traj.snapshot_times))
    return lhs, rhs, abs(lhs - rhs)


def sigma_test_spec(traj_eps, u0_u1, test_fn, *, grid_eps, eps, T):
    """Spec-shaped wrapper: u0_u1 is (macro trajectory, corrector solution).

    The corrector member is accepted for two-scale limits with micro-variable
    dependence; the tested limits here carry none, so only u0 enters.
    """
    macro_traj, _corrector = u0_u1
    return sigma_test(traj_eps, grid_eps, eps, macro_traj, macro_traj.grid,
                      test_fn, T)


# -- study configuration -------------------------------------------------------------

@dataclass
class StudyConfig:
    scenario: str | None = "laminate"
    scenario_params: dict = field(default_factory=dict)
    coefficients: CoefficientSet | None = None
    eps_list: tuple = (0.25, 0.125, 0.0625)
    bc: str = NOSLIP
    grid_factor: int = 8
    max_resolution: int = 512
    T: float = 0.25
    cfl_safety: float = 0.4
    gmax: float = 1.0
    macro_nx: int = 64
    cell_resolution: int = 32
    Q: int = 1
    quant_step: float = 0.1
    corrector_quant: float = 0.05
    n_snapshots: int = 11
    diag_stride: int = 8
    u0_kind: str = "stream_bump"
    u0_amplitude: float = 0.02
    sigma_tests: tuple = ()
    seed: int = 0
    out_dir: str = "."

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps_list)
        if not eps:
            raise ValueError("eps_list must be nonempty")
        if any(e2 >= e1 for e1, e2 in zip(eps, eps[1:])):
            raise ValueError("eps_list must be strictly decreasing")
        self.eps_list = eps
        for e in eps:
            if self.micro_nx(e) > self.max_resolution:
                raise ValueError(
                    f"eps = {e} needs resolution {self.micro_nx(e)} "
                    f"> max_resolution {self.max_resolution}"
                )

    def micro_nx(self, eps):
        """Smallest power-of-two resolution with h <= eps / grid_factor."""
        need = self.grid_factor / eps
        nx = 8
        while nx < need - 1e-12:
            nx *= 2
        return nx

    def resolve_coefficients(self):
        if self.coefficients is not None:
            return self.coefficients
        try:
            builder = SCENARIOS[self.scenario]
        except KeyError:
            raise ValueError(f"unknown scenario {self.scenario!r}") from None
        return builder(**self.scenario_params)

    def resolve_sigma_tests(self):
        out = []
        for item in self.sigma_tests:
            if isinstance(item, SigmaTestFn):
                out.append(item)
                continue
            freq = tuple(item["freq"])
            dim = len(freq)
            phase = float(item.get("phase", 0.0))
            poly = TrigPolynomial.from_cosines(dim, [(freq, 1.0, phase)])
            out.append(SigmaTestFn(
                name=item.get("name", "sigma"),
                micro=poly,
                component=int(item.get("component", 0)),
                envelope=item.get("envelope", "bump"),
            ))
        return out

    def to_dict(self):
        d = {
            "schema": STUDY_SCHEMA,
            "scenario": self.scenario,
            "scenario_params": dict(self.scenario_params),
            "eps_list": list(self.eps_list),
            "bc": self.bc,
            "grid_factor": self.grid_factor,
            "max_resolution": self.max_resolution,
            "T": self.T,
            "cfl_safety": self.cfl_safety,
            "gmax": self.gmax,
            "macro_nx": self.macro_nx,
            "cell_resolution": self.cell_resolution,
            "Q": self.Q,
            "quant_step": self.quant_step,
            "corrector_quant": self.corrector_quant,
            "n_snapshots": self.n_snapshots,
            "diag_stride": self.diag_stride,
            "u0": {"type": self.u0_kind, "amplitude": self.u0_amplitude},
            "sigma_tests": [
                {"name": s.name,
                 "freq": [k for k in next(iter(s.micro.terms))[0]],
                 "component": s.component, "envelope": s.envelope}
                if isinstance(s, SigmaTestFn) else dict(s)
                for s in self.sigma_tests
            ],
            "seed": self.seed,
            "out_dir": self.out_dir,
        }
        if self.coefficients is not None:
            d["coefficients"] = self.coefficients.to_dict()
        return d

    @staticmethod
    def from_dict(data):
        if data.get("schema", STUDY_SCHEMA) != STUDY_SCHEMA:
            raise ValueError(f"unknown study schema {data.get('schema')!r}")
        u0 = data.get("u0", {})
        coeffs = None
        if "coefficients" in data:
            coeffs = CoefficientSet.from_dict(data["coefficients"])
        return StudyConfig(
            scenario=data.get("scenario", "laminate"),
            scenario_params=data.get("scenario_params", {}),
            coefficients=coeffs,
            eps_list=tuple(data.get("eps_list", (0.25, 0.125, 0.0625))),
            bc=data.get("bc", NOSLIP),
            grid_factor=int(data.get("grid_factor", 8)),
            max_resolution=int(data.get("max_resolution", 512)),
            T=float(data.get("T", 0.25)),
            cfl_safety=float(data.get("cfl_safety", 0.4)),
            gmax=float(data.get("gmax", 1.0)),
            macro_nx=int(data.get("macro_nx", 64)),
            cell_resolution=int(data.get("cell_resolution", 32)),
            Q=int(data.get("Q", 1)),
            quant_step=float(data.get("quant_step", 0.1)),
            corrector_quant=float(data.get("corrector_quant", 0.05)),
            n_snapshots=int(data.get("n_snapshots", 11)),
            diag_stride=int(data.get("diag_stride", 8)),
            u0_kind=u0.get("type", "stream_bump"),
            u0_amplitude=float(u0.get("amplitude", 0.05)),
            sigma_tests=tuple(data.get("sigma_tests", ())),
            seed=int(data.get("seed", 0)),
            out_dir=data.get("out_dir", "."),
        )


# -- report -----------------------------------------------------------------------

@dataclass
class EpsRow:
    eps: float
    nx: int
    l2_error: float
    gradient_error: float
    corrector_error: float
    pressure_weak_error: float
    runtime_s: float
    energy: tuple  # (sup |u|^2, int H1, int Wp, sup |q|_{p'})
    error: str = ""


@dataclass
class ConvergenceReport:
    scenario: str
    seed: int
    rows: list
    sigma_rows: list            # dicts: name, eps, lhs, rhs, gap
    monotone: bool
    final_over_initial: float
    eps_uniform_factor: float
    macro_runtime_s: float

    def to_dict(self, with_timings=False):
        """Timings are excluded by default so reports stay byte-deterministic
        across reruns with the same config and seed."""
        d = {
            "schema": REPORT_SCHEMA,
            "scenario": self.scenario,
            "seed": self.seed,
            "rows": [
                {
                    "eps": r.eps, "nx": r.nx, "l2_error": r.l2_error,
                    "gradient_error": r.gradient_error,
                    "corrector_error": r.corrector_error,
                    "pressure_weak_error": r.pressure_weak_error,
                    "energy": list(r.energy),
                    "error": r.error,
                }
                for r in self.rows
            ],
            "sigma": list(self.sigma_rows),
            "monotone": self.monotone,
            "final_over_initial": self.final_over_initial,
            "eps_uniform_factor": self.eps_uniform_factor,
        }
        if with_timings:
            for row, r in zip(d["rows"], self.rows):
                row["runtime_s"] = r.runtime_s
            d["macro_runtime_s"] = self.macro_runtime_s
        return d


def _worker_count(n_jobs):
    cap = os.environ.get("HOM_LADY_THREADS")
    cap = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n_jobs, cap))


def _snap_times(T, n):
    return np.linspace(0.0, T, n)


def _fitted_dt(T, dt_max, n_segments):
    """Largest dt <= dt_max such that T / (n_segments * k) steps land exactly
    on the snapshot grid."""
    seg = T / n_segments
    k = int(np.ceil(seg / dt_max))
    return seg / k


def run_convergence_study(config):
    """Solve the micro problems over the eps sweep and the macro problem once;
    assemble errors, energy diagnostics and Sigma-test rows."""
    coeffs = config.resolve_coefficients()
    law = EffectiveLaw.from_coefficient_set(
        coeffs, resolution=config.cell_resolution, Q=config.Q,
        quant_step=config.quant_step,
    )
    bc = config.bc
    T = config.T
    snap = _snap_times(T, config.n_snapshots)
    n_seg = config.n_snapshots - 1

    macro_grid = MacGrid(config.macro_nx, config.macro_nx, bc)
    u0_macro = initial_state(macro_grid, config.u0_kind, config.u0_amplitude)
    t0 = time.perf_counter()
    dt_mac = _fitted_dt(T, macro_stable_dt(law, macro_grid, config.gmax,
                                           config.cfl_safety), n_seg)
    macro_traj = solve_homogenized(HomogenizedProblem.from_coefficient_set(
        coeffs, law, macro_grid, T=T, dt=dt_mac, u0=u0_macro, gmax=config.gmax,
        cfl_safety=config.cfl_safety, snapshot_times=snap,
        diag_stride=config.diag_stride,
    ))
    macro_runtime = time.perf_counter() - t0

    cell_proto = CellProblemSpec.from_coefficient_set(
        coeffs, np.zeros((2, 2)), config.cell_resolution, Q=config.Q)
    corr_cache = CorrectorFieldCache(cell_proto, quant=config.corrector_quant)
    tests = config.resolve_sigma_tests()

    def run_one(eps):
        nx = config.micro_nx(eps)
        grid = MacGrid(nx, nx, bc)
        u0 = initial_state(grid, config.u0_kind, config.u0_amplitude)
        dt = _fitted_dt(T, stable_dt(coeffs, grid, config.gmax,
                                     config.cfl_safety), n_seg)
        prob = MicroProblem(coeffs=coeffs, eps=eps, grid=grid, T=T, dt=dt,
                            u0=u0, gmax=config.gmax,
                            cfl_safety=config.cfl_safety, snapshot_times=snap,
                            diag_stride=config.diag_stride)
        start = time.perf_counter()
        traj = micro_solve(prob)
        runtime = time.perf_counter() - start
        return grid, traj, runtime

    results = {}
    failures = {}
    workers = _worker_count(len(config.eps_list))
    if workers == 1:
        for eps in config.eps_list:
            try:
                results[eps] = run_one(eps)
            except LadyError as exc:
                failures[eps] = str(exc)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {eps: pool.submit(run_one, eps) for eps in config.eps_list}
            for eps, fut in futures.items():
                try:
                    results[eps] = fut.result()
                except LadyError as exc:
                    failures[eps] = str(exc)
    if not results:
        raise StudyError(f"every micro solve failed: {failures}")

    rows = []
    sigma_rows = []
    for eps in sorted(results, reverse=True):
        grid, traj, runtime = results[eps]
        l2 = l2_qt_error(traj, grid, macro_traj, macro_grid)
        plain, corr = gradient_errors(traj, grid, eps, macro_traj, macro_grid,
                                      corr_cache)
        pw = pressure_weak_error(traj, grid, macro_traj, macro_grid)
        rep = energy_report(traj)
        rows.append(EpsRow(
            eps=eps, nx=grid.nx, l2_error=l2, gradient_error=plain,
            corrector_error=corr, pressure_weak_error=pw, runtime_s=runtime,
            energy=rep.as_tuple(),
        ))
        for fn in tests:
            lhs, rhs, gap = sigma_test(traj, grid, eps, macro_traj, macro_grid,
                                       fn, T)
            sigma_rows.append({"name": fn.name, "eps": eps, "lhs": lhs,
                               "rhs": rhs, "gap": gap})
    for eps in sorted(failures, reverse=True):
        rows.append(EpsRow(eps=eps, nx=config.micro_nx(eps), l2_error=np.nan,
                           gradient_error=np.nan, corrector_error=np.nan,
                           pressure_weak_error=np.nan, runtime_s=0.0,
                           energy=(np.nan,) * 4, error=failures[eps]))
        rows.sort(key=lambda r: -r.eps)

    good = [r for r in rows if not r.error]
    errs = [r.l2_error for r in good]
    monotone = all(e2 < e1 for e1, e2 in zip(errs, errs[1:])) and len(errs) > 1
    ratio = errs[-1] / errs[0] if len(errs) > 1 and errs[0] > 0 else float("nan")
    factor = float("nan")
    if good:
        per_q = []
        for idx in range(4):
            vals = [r.energy[idx] for r in good]
            lo, hi = min(vals), max(vals)
            if hi > 1e-12:
                per_q.append(hi / max(lo, 1e-300))
        factor = max(per_q) if per_q else 1.0
    return ConvergenceReport(
        scenario=config.scenario or "custom", seed=config.seed, rows=rows,
        sigma_rows=sigma_rows, monotone=monotone, final_over_initial=ratio,
        eps_uniform_factor=factor, macro_runtime_s=macro_runtime,
    )


# -- emission ----------------------------------------------------------------------

CSV_COLUMNS = ("eps", "nx", "l2_error", "gradient_error", "corrector_error",
               "pressure_weak_error", "sup_energy", "int_H1", "int_Wp",
               "sup_pressure")


def emit_report(report, formats=("csv", "json"), out_dir="."):
    """Write the report; identical inputs produce byte-identical files.

    Wall-clock timings go to a separate timings.csv, which is the one output
    allowed to differ between reruns.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "json" in formats:
        path = os.path.join(out_dir, "report.json")
        with open(path, "w") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")
        written.append(path)
    if "csv" in formats:
        path = os.path.join(out_dir, "report.csv")
        with open(path, "w", newline="") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for r in report.rows:
                vals = [r.eps, r.nx, r.l2_error, r.gradient_error,
                        r.corrector_error, r.pressure_weak_error, *r.energy]
                fh.write(",".join(repr(float(v)) for v in vals) + "\n")
        written.append(path)
        path = os.path.join(out_dir, "timings.csv")
        with open(path, "w", newline="") as fh:
            fh.write("eps,runtime_s\n")
            fh.write(f"macro,{report.macro_runtime_s!r}\n")
            for r in report.rows:
                fh.write(f"{r.eps!r},{r.runtime_s!r}\n")
        written.append(path)
        if report.sigma_rows:
            path = os.path.join(out_dir, "sigma.csv")
            with open(path, "w", newline="") as fh:
                fh.write("name,eps,lhs,rhs,gap\n")
                for row in report.sigma_rows:
                    fh.write(
                        f"{row['name']},{row['eps']!r},{row['lhs']!r},"
                        f"{row['rhs']!r},{row['gap']!r}\n"
                    )
            written.append(path)
    if "plotdata" in formats:
        for col in ("l2_error", "corrector_error"):
            path = os.path.join(out_dir, f"{col}.dat")
            with open(path, "w", newline="") as fh:
                for r in report.rows:
                    if not r.error:
                        fh.write(f"{r.eps!r} {getattr(r, col)!r}\n")
            written.append(path)
    return written
