"""Command-line interface.

Verbs: validate, micro, cell, macro, study, sigma-test.  All take --config
(JSON) and --out (directory).  Exit code 0 on success, 2 on a property
violation, 1 on error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .ap_field import CoefficientSet
from .cell_solver import (
    CellProblemSpec,
    EffectiveLaw,
    TimePeriodic,
    solve_corrector,
    verify_uniqueness,
)
from .errors import LadyError
from .grid_core import MacGrid
from .harness import (
    SCENARIOS,
    StudyConfig,
    emit_report,
    initial_state,
    run_convergence_study,
)
from .macro_solver import (
    HomogenizedProblem,
    macro_stable_dt,
    solve_homogenized,
)
from .micro_solver import MicroProblem, energy_report, solve as micro_solve, stable_dt
from .snapshots import write_diagnostics_csv, write_snapshot

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PROPERTY = 2


def _load_config(path):
    with open(path) as fh:
        return json.load(fh)


def _coeffs_from_config(cfg):
    if "coefficients" in cfg:
        return CoefficientSet.from_dict(cfg["coefficients"])
    name = cfg.get("scenario", "laminate")
    return SCENARIOS[name](**cfg.get("scenario_params", {}))


def _micro_problem_from_config(cfg, coeffs):
    grid = MacGrid(int(cfg.get("nx", 32)), int(cfg.get("nx", 32)),
                   cfg.get("bc", "periodic"))
    eps = float(cfg.get("eps", 0.25))
    gmax = float(cfg.get("gmax", 2.0))
    cfl = float(cfg.get("cfl_safety", 0.4))
    T = float(cfg.get("T", 0.01))
    dt = cfg.get("dt")
    if dt is None:
        dt0 = stable_dt(coeffs, grid, gmax, cfl)
        dt = T / max(1, int(np.ceil(T / dt0)))
    u0cfg = cfg.get("u0", {"type": "taylor_green", "amplitude": 0.1})
    u0 = initial_state(grid, u0cfg.get("type", "taylor_green"),
                       float(u0cfg.get("amplitude", 0.1)))
    snaps = cfg.get("n_snapshots")
    times = None
    if snaps:
        n_seg = int(snaps) - 1
        dt = (T / n_seg) / max(1, int(np.ceil((T / n_seg) / dt)))
        times = np.linspace(0.0, T, int(snaps))
    return MicroProblem(coeffs=coeffs, eps=eps, grid=grid, T=T, dt=float(dt),
                        u0=u0, gmax=gmax, cfl_safety=cfl, snapshot_times=times)


def cmd_validate(cfg, out):
    coeffs = _coeffs_from_config(cfg)  # certification happens on construction
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "validated.json"), "w") as fh:
        json.dump({"ok": True, "bounds": coeffs.bounds.to_dict(), "p": coeffs.p},
                  fh, sort_keys=True)
        fh.write("\n")
    print("coefficients certified: A1-A4 bounds hold")
    return EXIT_OK


def cmd_micro(cfg, out):
    coeffs = _coeffs_from_config(cfg)
    prob = _micro_problem_from_config(cfg, coeffs)
    traj = micro_solve(prob)
    os.makedirs(out, exist_ok=True)
    write_diagnostics_csv(os.path.join(out, "diagnostics.csv"), traj.diagnostics)
    for t, snap in zip(traj.snapshot_times, traj.snapshots):
        write_snapshot(os.path.join(out, f"state_{t:.6f}.ladygrid"), snap,
                       prob.grid)
    rep = energy_report(traj)
    print(f"micro solve done: sup|u|^2 = {rep.sup_energy:.6g}, "
          f"int ||grad u||_2^2 dt = {rep.h1_dissipation:.6g}")
    return EXIT_OK


def cmd_cell(cfg, out):
    coeffs = _coeffs_from_config(cfg)
    xi = np.array(cfg.get("xi", [[0.0, 0.0], [1.0, 0.0]]), dtype=float)
    resolution = int(cfg.get("resolution", 64))
    Q = int(cfg.get("Q", 1))
    tm = cfg.get("time_mode", "steady")
    if isinstance(tm, dict):
        tm = TimePeriodic(period=float(tm["period"]), steps=int(tm["steps"]))
    spec = CellProblemSpec.from_coefficient_set(coeffs, xi, resolution, Q=Q,
                                                time_mode=tm)
    sol = solve_corrector(spec)
    os.makedirs(out, exist_ok=True)
    row = {
        "xi": [float(v) for v in xi.ravel()],
        "m": [float(v) for v in sol.m_xi.ravel()],
        "M": [float(v) for v in sol.M_xi.ravel()],
        "residual": sol.residual,
        "resolution": resolution,
        "Q": Q,
        "freq_perturbation": spec.freq_perturbation,
    }
    with open(os.path.join(out, "corrector.json"), "w") as fh:
        json.dump({"schema": "ladyfx/1", "rows": [row]}, fh, sort_keys=True)
        fh.write("\n")
    trials = int(cfg.get("uniqueness_trials", 0))
    if trials >= 2:
        rep = verify_uniqueness(spec, trials=trials, seed=int(cfg.get("seed", 0)))
        print(f"uniqueness: max pairwise gradient distance {rep.max_pairwise:.3e}")
        if not rep.passed:
            return EXIT_PROPERTY
    print(f"corrector solved: residual {sol.residual:.3e}")
    return EXIT_OK


def cmd_macro(cfg, out):
    coeffs = _coeffs_from_config(cfg)
    lawcfg = cfg.get("law", {"type": "cell"})
    if lawcfg.get("type") == "constant":
        law = EffectiveLaw.from_constant(np.array(lawcfg["a"]), lawcfg["b"],
                                         coeffs.p)
    elif lawcfg.get("type") == "file":
        with open(lawcfg["path"]) as fh:
            law = EffectiveLaw.import_json(fh.read())
    else:
        law = EffectiveLaw.from_coefficient_set(
            coeffs, resolution=int(lawcfg.get("resolution", 64)),
            Q=int(lawcfg.get("Q", 1)),
            quant_step=float(lawcfg.get("quant_step", 0.05)),
        )
    grid = MacGrid(int(cfg.get("nx", 64)), int(cfg.get("nx", 64)),
                   cfg.get("bc", "noslip"))
    T = float(cfg.get("T", 0.01))
    gmax = float(cfg.get("gmax", 2.0))
    cfl = float(cfg.get("cfl_safety", 0.4))
    dt0 = macro_stable_dt(law, grid, gmax, cfl)
    dt = T / max(1, int(np.ceil(T / dt0)))
    u0cfg = cfg.get("u0", {"type": "stream_bump", "amplitude": 0.05})
    u0 = initial_state(grid, u0cfg.get("type", "stream_bump"),
                       float(u0cfg.get("amplitude", 0.05)))
    snaps = cfg.get("n_snapshots")
    times = None
    if snaps:
        n_seg = int(snaps) - 1
        dt = (T / n_seg) / max(1, int(np.ceil((T / n_seg) / dt)))
        times = np.linspace(0.0, T, int(snaps))
    prob = HomogenizedProblem.from_coefficient_set(
        coeffs, law, grid, T=T, dt=dt, u0=u0, gmax=gmax, cfl_safety=cfl,
        snapshot_times=times)
    traj = solve_homogenized(prob)
    os.makedirs(out, exist_ok=True)
    write_diagnostics_csv(os.path.join(out, "diagnostics.csv"), traj.diagnostics)
    for t, snap in zip(traj.snapshot_times, traj.snapshots):
        write_snapshot(os.path.join(out, f"state_{t:.6f}.ladygrid"), snap, grid)
    if not law.is_constant:
        with open(os.path.join(out, "law.json"), "w") as fh:
            fh.write(law.export_json())
            fh.write("\n")
    print(f"macro solve done: {len(traj.diagnostics)} steps recorded")
    return EXIT_OK


def cmd_study(cfg, out):
    config = StudyConfig.from_dict(cfg)
    config.out_dir = out
    report = run_convergence_study(config)
    emit_report(report, formats=("csv", "json", "plotdata"), out_dir=out)
    ok = report.monotone and report.eps_uniform_factor < 2.0
    print(f"study done: monotone={report.monotone}, "
          f"final/initial={report.final_over_initial:.4g}, "
          f"energy band factor={report.eps_uniform_factor:.4g}")
    return EXIT_OK if ok else EXIT_PROPERTY


def cmd_sigma_test(cfg, out):
    config = StudyConfig.from_dict(cfg)
    if not config.sigma_tests:
        raise LadyError("sigma-test config needs a sigma_tests entry")
    config.out_dir = out
    report = run_convergence_study(config)
    emit_report(report, formats=("csv", "json"), out_dir=out)
    gaps = {}
    for row in report.sigma_rows:
        gaps.setdefault(row["name"], []).append((row["eps"], row["gap"]))
    ok = True
    for name, pairs in gaps.items():
        pairs.sort(reverse=True)
        decreasing = all(g2 < g1 for (_, g1), (_, g2) in zip(pairs, pairs[1:]))
        ok = ok and decreasing
        print(f"sigma test {name}: gaps "
              + ", ".join(f"eps={e:g}: {g:.4g}" for e, g in pairs))
    return EXIT_OK if ok else EXIT_PROPERTY


COMMANDS = {
    "validate": cmd_validate,
    "micro": cmd_micro,
    "cell": cmd_cell,
    "macro": cmd_macro,
    "study": cmd_study,
    "sigma-test": cmd_sigma_test,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="hom-lady",
        description="Numerical homogenization laboratory for a generalized "
                    "Ladyzhenskaya flow model",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in COMMANDS:
        sp = sub.add_parser(verb)
        sp.add_argument("--config", required=True, help="JSON configuration")
        sp.add_argument("--out", default="out", help="output directory")
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        code = COMMANDS[args.verb](cfg, args.out)
    except LadyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return code


if __name__ == "__main__":
    sys.exit(main())
