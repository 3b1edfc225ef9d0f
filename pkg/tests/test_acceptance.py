"""Acceptance suite: one test per criterion, printed pass/fail lines.

The slow convergence study (criteria 4-6) runs once as a session fixture at
its stated parameters: laminate microstructure, eps in {1/4, 1/8, 1/16},
h = eps/8, T = 0.25.
"""

import time

import numpy as np
import pytest

from homlady.ap_field import TrigPolynomial
from homlady.cell_solver import (
    CellProblemSpec,
    EffectiveLaw,
    TorusOperators,
    _effective_tensors,
    solve_corrector,
    verify_uniqueness,
)
from homlady.grid_core import (
    MacGrid,
    NOSLIP,
    PERIODIC,
    gradient_tensor,
    grad_norms,
    kinetic_energy,
    leray_project,
    trilinear_form,
    zero_state,
)
from homlady.harness import (
    StudyConfig,
    initial_state,
    run_convergence_study,
)
from homlady.micro_solver import MicroProblem, solve as micro_solve, stable_dt

from conftest import make_constant, make_laminate
from oracles import LaminateShearOracle, laminate_alpha, laminate_beta

TWO_PI = 2.0 * np.pi


def report(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def laminate_study():
    config = StudyConfig(
        scenario="laminate",
        eps_list=(0.25, 0.125, 0.0625),
        bc=NOSLIP,
        grid_factor=8,
        T=0.25,
        macro_nx=64,
        cell_resolution=32,
        n_snapshots=11,
        gmax=1.0,
        u0_kind="stream_bump",
        u0_amplitude=0.02,
        diag_stride=8,
        sigma_tests=(
            {"name": "sin_y1_v", "freq": [TWO_PI, 0.0], "component": 1,
             "phase": -np.pi / 2},
        ),
        seed=0,
    )
    t0 = time.perf_counter()
    rep = run_convergence_study(config)
    wall = time.perf_counter() - t0
    return rep, wall


def test_criterion_1_constant_coefficient_corrector():
    t0 = time.perf_counter()
    nu0, nu1 = 1.0, 0.5
    rng = np.random.default_rng(101)
    worst_grad, worst_rel = 0.0, 0.0
    for p in (2.0, 3.0):
        coeffs = make_constant(nu0=nu0, nu1=nu1, p=p)
        for _ in range(5):
            xi = rng.uniform(-2.0, 2.0, (2, 2))
            spec = CellProblemSpec.from_coefficient_set(coeffs, xi, 64, Q=1)
            sol = solve_corrector(spec)
            grad_norm = np.sqrt(np.mean(np.sum(sol.grad_pi**2, axis=(0, 1))))
            worst_grad = max(worst_grad, grad_norm)
            mod = np.linalg.norm(xi)
            m_exact = nu0 * xi
            M_exact = nu1 * mod ** (p - 2.0) * xi
            rel_m = np.max(np.abs(sol.m_xi - m_exact)) / max(np.max(np.abs(m_exact)),
                                                             1e-30)
            rel_M = np.max(np.abs(sol.M_xi - M_exact)) / max(np.max(np.abs(M_exact)),
                                                             1e-30)
            worst_rel = max(worst_rel, rel_m, rel_M)
    elapsed = time.perf_counter() - t0
    ok = worst_grad <= 1e-10 and worst_rel <= 1e-10 and elapsed < 10.0
    report(1, ok,
           f"constant corrector: max ||grad pi|| = {worst_grad:.2e}, "
           f"max flux rel err = {worst_rel:.2e}, runtime {elapsed:.1f}s < 10s")


def test_criterion_2_laminate_shear_oracle():
    t0 = time.perf_counter()
    coeffs = make_laminate(p=3.0)
    M = 128
    worst_grad, worst_flux = 0.0, 0.0
    for gamma in (0.5, 1.0, 2.0):
        oracle = LaminateShearOracle(laminate_alpha, laminate_beta, gamma, 3.0)
        xi = gamma * np.array([[0.0, 0.0], [1.0, 0.0]])
        sol = solve_corrector(
            CellProblemSpec.from_coefficient_set(coeffs, xi, M, Q=1))
        y = np.arange(M) / M
        expected = oracle.phi_prime_at(y)
        got = sol.grad_pi[1, 0, :, 0]
        scale = np.max(np.abs(oracle.e_at(y)))
        worst_grad = max(worst_grad, np.max(np.abs(got - expected)) / scale)
        m_ref, M_ref = oracle.effective_shear_flux()
        worst_flux = max(
            worst_flux,
            abs(sol.m_xi[1, 0] - m_ref) / abs(m_ref),
            abs(sol.M_xi[1, 0] - M_ref) / abs(M_ref),
        )
    elapsed = time.perf_counter() - t0
    ok = worst_grad <= 1e-4 and worst_flux <= 1e-4 and elapsed < 120.0
    report(2, ok,
           f"laminate oracle at 128: gradient rel err {worst_grad:.2e}, "
           f"flux rel err {worst_flux:.2e}, runtime {elapsed:.1f}s < 120s")


def test_criterion_3_discrete_energy_law():
    coeffs = make_laminate(p=3.0)  # f = 0: no forcing terms
    grid = MacGrid(64, 64, NOSLIP)
    eps = 0.125
    T = 0.5
    dt0 = stable_dt(coeffs, grid, 1.0)
    n = int(np.ceil(T / dt0))
    dt = T / n
    u0 = initial_state(grid, "stream_bump", 0.05)
    prob = MicroProblem(coeffs=coeffs, eps=eps, grid=grid, T=T, dt=dt, u0=u0,
                        gmax=1.0, diag_stride=1)
    traj = micro_solve(prob)
    d = traj.diagnostics
    nu0, nu1 = coeffs.bounds.nu0, coeffs.bounds.nu1
    lhs = d[1:, 2] + 2.0 * dt * (nu0 * d[:-1, 3] + nu1 * d[:-1, 4])
    rhs = d[:-1, 2] * (1.0 + 1e-8)
    margin = np.min(rhs - lhs)
    ok = bool(np.all(lhs <= rhs))
    report(3, ok,
           f"energy law over {len(d) - 1} steps (T = 0.5, 64^2): "
           f"min slack {margin:.3e} >= 0")


def test_criterion_4_eps_uniform_bounds(laminate_study):
    rep, _ = laminate_study
    good = [r for r in rep.rows if not r.error]
    factors = []
    for idx, name in enumerate(("sup|u|^2", "int H1", "int Wp", "sup |q|_p'")):
        vals = [r.energy[idx] for r in good]
        factors.append((name, max(vals) / max(min(vals), 1e-300)))
    worst = max(f for _, f in factors)
    ok = len(good) == 3 and worst < 2.0
    report(4, ok,
           "eps-uniform energy bounds: "
           + ", ".join(f"{n} x{f:.3f}" for n, f in factors)
           + f" (max {worst:.3f} < 2)")


def test_criterion_5_convergence_study(laminate_study):
    rep, wall = laminate_study
    good = [r for r in rep.rows if not r.error]
    errs = [r.l2_error for r in good]
    ratio = errs[-1] / errs[0]
    ok = (len(good) == 3 and rep.monotone and ratio <= 0.6 and wall < 1800.0)
    report(5, ok,
           f"L2(Q_T) errors {[f'{e:.3e}' for e in errs]} strictly decreasing, "
           f"final/initial = {ratio:.3f} <= 0.6, wall {wall / 60:.1f} min < 30")


def test_corrector_improves_gradient_error(laminate_study):
    # not a numbered criterion: the corrector-augmented gradient error must
    # beat the plain one at every eps of the study
    rep, _ = laminate_study
    good = [r for r in rep.rows if not r.error]
    ok = all(r.corrector_error <= r.gradient_error for r in good)
    detail = ", ".join(
        f"eps={r.eps:g}: {r.corrector_error:.3e} <= {r.gradient_error:.3e}"
        for r in good
    )
    print(f"[{'PASS' if ok else 'FAIL'}] corrector improvement: {detail}")
    assert ok


def test_criterion_6_sigma_convergence(laminate_study):
    rep, _ = laminate_study
    gaps = {row["eps"]: row["gap"] for row in rep.sigma_rows
            if row["name"] == "sin_y1_v"}
    ratio = gaps[0.0625] / gaps[0.125]
    ok = 0.375 <= ratio <= 0.625
    report(6, ok,
           f"sigma gap {gaps[0.125]:.3e} -> {gaps[0.0625]:.3e}, "
           f"ratio {ratio:.3f} in [0.375, 0.625]")


def test_criterion_7_skew_advection_identity():
    grid = MacGrid(64, 64, PERIODIC)
    rng = np.random.default_rng(107)
    worst = 0.0
    for _ in range(20):
        s = zero_state(grid)
        s.u[:] = rng.standard_normal(grid.shape_u)
        s.v[:] = rng.standard_normal(grid.shape_v)
        s = leray_project(s, grid)
        G = gradient_tensor(s, grid)
        h1, _ = grad_norms(G, grid, 2.0)
        scale = np.sqrt(kinetic_energy(s, grid)) * h1
        worst = max(worst, abs(trilinear_form(s, grid)) / scale)
    ok = worst <= 1e-12
    report(7, ok, f"skew advection: max |b_h(u,u,u)| = {worst:.2e} relative "
                  "<= 1e-12 over 20 random divergence-free fields")


def test_criterion_8_effective_law_monotonicity():
    coeffs = make_laminate(p=3.0)
    spec = CellProblemSpec.from_coefficient_set(coeffs, np.zeros((2, 2)), 32, Q=1)
    law = EffectiveLaw.from_cell_problem(spec)
    rng = np.random.default_rng(108)
    nu0 = coeffs.bounds.nu0
    worst = np.inf
    for _ in range(10):
        x1 = rng.uniform(-1.5, 1.5, (2, 2))
        x2 = rng.uniform(-1.5, 1.5, (2, 2))
        F1 = law.total(x1, exact=True)
        F2 = law.total(x2, exact=True)
        lhs = np.sum((F1 - F2) * (x1 - x2))
        slack = lhs - (nu0 * np.sum((x1 - x2) ** 2) - 1e-6)
        worst = min(worst, slack)
    ok = worst >= 0.0
    report(8, ok, f"effective-law monotonicity: min slack {worst:.3e} >= 0 "
                  "over 10 random pairs")


def test_criterion_9_gauge_and_uniqueness():
    coeffs = make_laminate(p=3.0)
    xi = np.array([[0.0, 0.0], [1.0, 0.0]])
    spec = CellProblemSpec.from_coefficient_set(coeffs, xi, 64, Q=1)
    rep = verify_uniqueness(spec, trials=3, seed=109)
    sol = solve_corrector(spec)
    ops = TorusOperators(64, 1.0)
    a, b, rho = spec.samples(ops)
    shifted = sol.pi + np.array([0.7, -0.3])[:, None, None]
    E = xi[:, :, None, None] + ops.grad_vector(shifted)
    m2, M2 = _effective_tensors(E, a, b, spec.p)
    gauge_change = max(np.max(np.abs(m2 - sol.m_xi)), np.max(np.abs(M2 - sol.M_xi)))
    ok = rep.passed and rep.max_pairwise <= 1e-6 and gauge_change <= 1e-12
    report(9, ok,
           f"uniqueness over 3 random starts: max pairwise {rep.max_pairwise:.2e} "
           f"<= 1e-6; constant shift changes F by {gauge_change:.2e} <= 1e-12")


def test_criterion_10_mean_value_toolkit():
    freqs = [1.0, np.sqrt(2.0), np.sqrt(5.0), np.sqrt(11.0), np.sqrt(17.0)]
    poly = TrigPolynomial.from_cosines(1, [((k,), 1.0) for k in freqs])
    exact = np.sqrt(sum(abs(c) ** 2 for _, c in poly.terms))
    got = poly.besicovitch_seminorm(2, 200.0)
    parseval_err = abs(got - exact)
    rng = np.random.default_rng(110)
    L = 80.0
    worst_excess = -np.inf
    for _ in range(20):
        n = rng.integers(1, 5)
        modes = [((rng.uniform(0.3, 4.0),), rng.uniform(-2, 2),
                  rng.uniform(0, TWO_PI)) for _ in range(n)]
        p = TrigPolynomial.from_cosines(1, modes) + rng.uniform(-3, 3)
        kmin = min((abs(k[0]) for k, _ in p.terms if k != (0.0,)), default=None)
        if kmin is None:
            continue
        bound = p.l1_offmean / (L * kmin)
        err = abs(p.empirical_mean(L, samples=40_000) - p.mean_value())
        worst_excess = max(worst_excess, err - bound)
    ok = parseval_err <= 0.02 and worst_excess <= 1e-9
    report(10, ok,
           f"Parseval at window 200: err {parseval_err:.4f} <= 0.02; "
           f"empirical mean within the l1/(L k_min) bound "
           f"(max excess {worst_excess:.2e})")
