"""Command line: ``porovol run|mesh-check|verify|convergence [path] [--section.key=value ...]``.

Exit codes: 0 success, 2 bad input (config or mesh file), 3 solver failure,
4 failed assertion or violated assumption.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .config import AssumptionError, ConfigError, load_config
from .mesh import AdmissibilityError, MeshError, load_mesh, validate_admissibility
from .runner import SolverFailure, execute_convergence, execute_run, execute_verify

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4
DEFAULT_CONFIG = "fivespot_capillary"


def _split_overrides(extra: list[str]) -> dict:
    out = {}
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"unrecognized argument {item!r}; overrides look like --section.key=value")
        key, value = item[2:].split("=", 1)
        out[key] = value
    return out


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="porovol", description="Two-phase compressible flow finite volume simulator")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a transient simulation")
    r.add_argument("path", nargs="?", default=DEFAULT_CONFIG, help="config file or shipped config name")
    r.add_argument("--quiet", action="store_true")
    m = sub.add_parser("mesh-check", help="check admissibility of a mesh file")
    m.add_argument("path")
    m.add_argument("--angle-tol", type=float, default=1e-8)
    v = sub.add_parser("verify", help="run the property suite on a config")
    v.add_argument("path", nargs="?", default=DEFAULT_CONFIG)
    c = sub.add_parser("convergence", help="refinement study on nested structured meshes")
    c.add_argument("path", nargs="?", default=DEFAULT_CONFIG)
    c.add_argument("--levels", type=int, default=None)
    c.add_argument("--csv", default=None, help="write the distance table to this CSV file")
    return p


def _cmd_run(args, overrides) -> int:
    cfg = load_config(args.path, overrides)
    log = None if args.quiet else print
    report, _ = execute_run(cfg, log=log)
    print(f"steps: {report.steps}  t_final: {report.t_final:g} s  max Newton iterations: {report.max_newton_iters}"
          f"  dt retries: {report.dt_retries}")
    print(f"s_w range: [{report.sw_range[0]:.12g}, {report.sw_range[1]:.12g}]")
    print("energy: " + ", ".join(f"{k}={v:.6g}" for k, v in report.energy.items()))
    if report.lemmas:
        print(f"interface inequalities: {report.lemmas['faces_checked']} faces, "
              f"violations {report.lemmas['mobility_violations']}/{report.lemmas['global_pressure_violations']}, "
              f"C_obs(B) = {report.lemmas['C_B']:.6g}")
    print(f"outputs in {cfg.output.directory}")
    if not report.passed:
        print("FAILED: " + ", ".join(report.failures), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def _cmd_mesh_check(args, overrides) -> int:
    if overrides:
        raise ConfigError("mesh-check takes no overrides")
    if not Path(args.path).exists():
        raise ConfigError(f"mesh file not found: {args.path}")
    mesh = load_mesh(args.path, validate=False)
    rep = validate_admissibility(mesh, args.angle_tol)
    print(f"cells: {mesh.n_cells}  interior faces: {mesh.n_faces}  boundary faces: {mesh.n_boundary}")
    print(f"size h: {mesh.size:.6g}  diameter: {mesh.diameter:.6g}")
    print(rep.summary())
    return EXIT_OK if rep.passed else EXIT_CHECK


def _cmd_verify(args, overrides) -> int:
    cfg = load_config(args.path, overrides)
    results = execute_verify(cfg)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def _cmd_convergence(args, overrides) -> int:
    cfg = load_config(args.path, overrides)
    out = execute_convergence(cfg, args.levels)
    print(out.table.format())
    if out.oracle_errors is not None:
        for n, e in zip(out.levels, out.oracle_errors):
            print(f"level {n}: max relative deviation from linear two-point oracle {e:.3e}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["coarse", "fine", "l1_s", "l1_p"])
            for r in out.table.rows:
                w.writerow([r.coarse, r.fine, repr(r.dist_s), repr(r.dist_p)])
    print("monotone decrease: " + ("yes" if out.monotone else "no"))
    return EXIT_OK if out.passed else EXIT_CHECK


COMMANDS = {"run": _cmd_run, "mesh-check": _cmd_mesh_check, "verify": _cmd_verify, "convergence": _cmd_convergence}


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = _split_overrides(extra)
        return COMMANDS[args.command](args, overrides)
    except AdmissibilityError as err:
        print(f"mesh not admissible: {err}", file=sys.stderr)
        return EXIT_CHECK
    except (ConfigError, MeshError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except SolverFailure as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except AssumptionError as err:
        print(f"assumption violated: {err}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
