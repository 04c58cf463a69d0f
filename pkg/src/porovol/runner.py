"""Build problems from a RunConfig and drive runs, verification and refinement studies."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import AssumptionError, ConfigError, RunConfig
from .discrete import (check_integration_by_parts, check_poincare, discrete_gradient, gradient_l2_norm,
                       h_seminorm)
from .fluid import AssumptionReport, validate_assumptions
from .mesh import (Mesh, build_structured_rect, build_structured_triangular, load_mesh, tag_boundary_segment)
from .output import DiagnosticsWriter, snapshot_name, write_vtk
from .scheme import SourceSpec, StepProblem, project_initial
from .solver import TransientFailure, run_transient, step_count
from .verification import (ConvergenceTable, RunMonitor, check_flux_axioms, convergence_study, tpfa_oracle)


class SolverFailure(RuntimeError):
    pass


def build_mesh(cfg: RunConfig, level: int | None = None) -> Mesh:
    spec = cfg.mesh
    if spec.kind == "triangular":
        mesh = build_structured_triangular(level or spec.n, spec.lx, spec.ly, spec.porosity, spec.permeability)
    elif spec.kind == "rect":
        mesh = build_structured_rect(level or spec.nx, level or spec.ny, spec.lx, spec.ly, spec.porosity,
                                     spec.permeability)
    else:
        if level is not None:
            raise ConfigError("refinement levels need a structured mesh kind")
        mesh = load_mesh(spec.path, spec.porosity, spec.permeability)
    for b in cfg.boundaries:
        for p0, p1 in b.segments:
            mesh = tag_boundary_segment(mesh, p0, p1, b.tag)
    missing = [b.tag for b in cfg.boundaries if b.tag not in mesh.tags]
    if missing:
        raise ConfigError(f"boundary segments match no boundary face: {missing}")
    return mesh


def build_problem(cfg: RunConfig, level: int | None = None, dt: float | None = None) -> StepProblem:
    fluid = cfg.fluid()
    mesh = build_mesh(cfg, level)
    ini = cfg.initial
    p_w = ini.pressure if ini.phase == "w" else ini.pressure - float(fluid.pc(ini.s_w))
    state = project_initial(mesh, p_w, ini.s_w)
    n = mesh.n_cells
    src = cfg.sources
    sources = SourceSpec(np.full(n, src.f_p), np.full(n, src.f_i), np.full(n, src.s_i))
    sources.validate()
    return StepProblem(mesh, fluid, state, cfg.dt if dt is None else dt, cfg.gravity, sources,
                       {b.tag: b.condition for b in cfg.boundaries})


def check_assumptions(cfg: RunConfig, fluid=None) -> AssumptionReport:
    rep = validate_assumptions(fluid or cfg.fluid(), require_capillary=cfg.require_capillary)
    if not rep.passed:
        failed = [k for k, v in rep.checks.items() if not v]
        raise AssumptionError("structural hypotheses violated: " + "; ".join(failed))
    return rep


@dataclass
class RunReport:
    version: str
    config: str
    steps: int = 0
    t_final: float = 0.0
    max_newton_iters: int = 0
    total_linear_iters: int = 0
    dt_retries: int = 0
    direct_solves: int = 0
    max_principle_ok: bool = True
    sw_range: tuple = (np.inf, -np.inf)
    energy: dict = field(default_factory=dict)
    lemmas: dict = field(default_factory=dict)
    mass_imbalance: list = field(default_factory=list)
    mass_allowance: list = field(default_factory=list)
    mass_closes: bool = True
    snapshots: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    error: str | None = None

    @property
    def passed(self) -> bool:
        return not self.failures and self.error is None

    def to_json(self) -> str:
        d = asdict(self)
        d["passed"] = self.passed
        return json.dumps(d, indent=2, default=float)


def _summarize(report: RunReport, monitor: RunMonitor, check_lemmas: bool):
    recs = monitor.records
    report.steps = len(recs)
    if recs:
        report.t_final = recs[-1].t
        report.sw_range = (min(r.sw_min for r in recs), max(r.sw_max for r in recs))
    reps = monitor.reports
    report.max_newton_iters = max((r.newton_iters for r in reps), default=0)
    report.total_linear_iters = sum(r.linear_iters for r in reps)
    report.dt_retries = sum(r.dt_retries for r in reps)
    report.direct_solves = sum(r.direct_solves for r in reps)
    report.max_principle_ok = monitor.max_principle_ok
    led = monitor.ledger
    report.energy = {"E_w": led.E_w, "E_n": led.E_n, "E_global": led.E_global, "E_B": led.E_B}
    report.lemmas = asdict(monitor.lemma_report) if check_lemmas else {}
    if monitor.mass.imbalance:
        imb, allow = monitor.mass.cumulative()
        report.mass_imbalance, report.mass_allowance = imb.tolist(), allow.tolist()
        report.mass_closes = monitor.mass.closes()
    report.failures = []
    if not report.max_principle_ok:
        report.failures.append("maximum principle")
    if check_lemmas and not monitor.lemma_report.passed:
        report.failures.append("interface inequalities")
    if not report.mass_closes:
        report.failures.append("mass balance")


def execute_run(cfg: RunConfig, write_outputs: bool = True, t_final: float | None = None,
                log: Callable[[str], None] | None = None) -> tuple[RunReport, RunMonitor]:
    """One transient run with diagnostics; raises SolverFailure on a failed step."""
    fluid = cfg.fluid()
    assumptions = check_assumptions(cfg, fluid)
    problem = build_problem(cfg)
    T = cfg.t_final if t_final is None else t_final
    step_count(T, cfg.dt)
    report = RunReport(__version__, cfg.text)
    outdir = Path(cfg.output.directory)
    writer = None
    if write_outputs:
        outdir.mkdir(parents=True, exist_ok=True)
        writer = DiagnosticsWriter(outdir / cfg.output.diagnostics)
    check_lemmas = cfg.output.check_lemmas
    monitor = RunMonitor(assumptions.m0, lemmas=check_lemmas, sink=writer, tol=cfg.newton.tol)
    wanted = {step_count(t, cfg.dt) for t in cfg.output.snapshots if t <= T + 1e-12}

    def snapshot(step, state):
        if not (write_outputs and cfg.output.vtk and step in wanted):
            return
        sw = np.clip(state.s_w, 0.0, 1.0)
        fields = {"s_w": state.s_w, "p_w": state.p_w, "p_n": state.p_w + fluid.pc(state.s_w),
                  "p_global": fluid.global_pressure(state.p_w, sw)}
        path = write_vtk(outdir / snapshot_name(step), problem.mesh, fields, f"t = {state.t:.17g} s")
        report.snapshots.append(str(path))

    def callback(step, p, old, new, rep):
        monitor(step, p, old, new, rep)
        snapshot(step, new)
        if log and (step % 50 == 0 or step == n_steps):
            log(f"step {step}/{n_steps} t={new.t:.4g} s  newton={rep.newton_iters}  "
                f"s_w in [{new.s_w.min():.6f}, {new.s_w.max():.6f}]")

    n_steps = step_count(T, cfg.dt)
    snapshot(0, problem.previous)
    try:
        run_transient(problem, T, cfg.dt, callback=callback, newton=cfg.newton, linear=cfg.linear)
    except TransientFailure as err:
        report.error = str(err)
        _summarize(report, monitor, check_lemmas)
        if write_outputs:
            (outdir / "report.json").write_text(report.to_json())
        raise SolverFailure(str(err)) from err
    finally:
        if writer is not None:
            writer.close()
    _summarize(report, monitor, check_lemmas)
    if write_outputs:
        (outdir / "report.json").write_text(report.to_json())
    return report, monitor


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def execute_verify(cfg: RunConfig, rng_seed: int = 0) -> list[CheckResult]:
    """Property suite on the configured problem; assumption failures raise before solving."""
    fluid = cfg.fluid()
    check_assumptions(cfg, fluid)
    problem = build_problem(cfg)
    mesh = problem.mesh
    rng = np.random.default_rng(rng_seed)
    out = []
    for name, ph in (("wetting", fluid.wetting), ("nonwetting", fluid.nonwetting)):
        r = check_flux_axioms(ph, rng=rng)
        out.append(CheckResult(f"flux axioms ({name})", r.passed,
                               f"consistency {r.consistency_error:.2e}, antisymmetry {r.antisymmetry_error:.2e}, "
                               f"monotonicity violations {r.monotone_violations}"))
    tags = [t for t in mesh.tags if t in problem.boundary] or list(mesh.tags)
    pc = check_poincare(mesh, dirichlet_tags=tags, rng=rng)
    out.append(CheckResult("Poincare inequality", pc.passed, f"max ratio {pc.max_ratio:.4g} <= diam {pc.diameter:.4g}"))
    ibp = check_integration_by_parts(mesh, rng=rng)
    out.append(CheckResult("summation by parts", ibp.passed, f"max rel error {ibp.max_rel_error:.2e}"))
    worst = 0.0
    for _ in range(20):
        u = rng.standard_normal(mesh.n_cells)
        zero = {t: 0.0 for t in tags}
        a = gradient_l2_norm(mesh, discrete_gradient(mesh, u, zero))
        b = h_seminorm(mesh, u, zero)
        worst = max(worst, abs(a - b) / max(b, 1e-300))
    out.append(CheckResult("gradient norm identity", worst <= 1e-12, f"max rel error {worst:.2e}"))

    T = min(cfg.verify_t_final, cfg.t_final)
    T = cfg.dt * max(1, int(round(T / cfg.dt)))
    try:
        rep, mon = execute_run(cfg, write_outputs=False, t_final=T)
    except SolverFailure as err:
        out.append(CheckResult("short run", False, str(err)))
        return out
    out.append(CheckResult("maximum principle", rep.max_principle_ok,
                           f"s_w in [{rep.sw_range[0]:.12g}, {rep.sw_range[1]:.12g}]"))
    lem = mon.lemma_report
    out.append(CheckResult("interface inequalities", lem.passed,
                           f"{lem.faces_checked} faces, violations {lem.mobility_violations}/"
                           f"{lem.global_pressure_violations}, C_obs(B) {lem.C_B:.4g}"))
    out.append(CheckResult("mass balance", rep.mass_closes,
                           f"imbalance {rep.mass_imbalance}, allowance {rep.mass_allowance}"))
    return out


def is_single_phase(cfg: RunConfig) -> bool:
    return (cfg.initial.s_w == 1.0 and cfg.wetting.c_ref == 0.0 and cfg.nonwetting.c_ref == 0.0
            and cfg.capillary.degenerate and not any(cfg.gravity)
            and cfg.sources.f_p == 0.0 and cfg.sources.f_i == 0.0
            and all(b.condition.s_w in (None, 1.0) for b in cfg.boundaries))


@dataclass
class ConvergenceOutcome:
    table: ConvergenceTable
    levels: list
    oracle_errors: list | None = None
    oracle_tol: float = 1e-8

    @property
    def monotone(self) -> bool:
        # saturation is identically one in the single-phase case; judge pressure there
        return self.table.monotone_p if self.oracle_errors is not None else self.table.monotone

    @property
    def passed(self) -> bool:
        ok = self.monotone
        if self.oracle_errors is not None:
            ok = ok and all(e <= self.oracle_tol for e in self.oracle_errors)
        return ok


def execute_convergence(cfg: RunConfig, levels: int | None = None) -> ConvergenceOutcome:
    levels = cfg.conv_levels if levels is None else levels
    if levels < 2:
        raise ConfigError("a convergence study needs at least 2 levels")
    if cfg.mesh.kind == "file":
        raise ConfigError("a convergence study needs a structured mesh kind")
    check_assumptions(cfg)
    sizes = [cfg.conv_base * 2**i for i in range(levels)]
    T = cfg.conv_t_final
    try:
        table, runs = convergence_study(lambda n: build_problem(cfg, n), sizes, T, cfg.dt,
                                        refine_dt=cfg.conv_refine_dt, newton=cfg.newton, linear=cfg.linear)
    except TransientFailure as err:
        raise SolverFailure(str(err)) from err
    outcome = ConvergenceOutcome(table, sizes)
    if is_single_phase(cfg):
        errs = []
        for run in runs:
            ref = tpfa_oracle(run.mesh, float(cfg.wetting.mobility(1.0)) * cfg.wetting.rho_ref,
                              {b.tag: b.condition.pressure for b in cfg.boundaries})
            p = run.states[-1].p_w
            errs.append(float(np.max(np.abs(p - ref)) / np.max(np.abs(ref))))
        outcome.oracle_errors = errs
    return outcome
