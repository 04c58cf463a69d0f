"""Run-time checks of the discrete analysis: maximum principle, energy
functionals, interface inequalities, mass balance and refinement studies."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fluid import FluidModel, PhaseParams
from .mesh import Mesh, locate_cells, polygon_centroid
from .scheme import (State, StepProblem, cell_phases, face_fluxes, ghost_phases, phase_masses,
                     source_rates, upwind_flux)
from .solver import LinearConfig, NewtonConfig, StepReport, run_transient

MP_TOL = 1e-10


# -- maximum principle ----------------------------------------------------

@dataclass
class MaxPrincipleReport:
    passed: bool
    s_min: float
    s_max: float
    violating_cells: np.ndarray


def check_max_principle(state: State, tol: float = MP_TOL) -> MaxPrincipleReport:
    s = state.s_w
    bad = np.flatnonzero((s < -tol) | (s > 1 + tol))
    return MaxPrincipleReport(bad.size == 0, float(s.min()), float(s.max()), bad)


# -- per-face quantities --------------------------------------------------

@dataclass
class FaceData:
    """Interface quantities on interior faces followed by Dirichlet half-diamonds."""

    tau: np.ndarray
    mob_w: np.ndarray
    mob_n: np.ndarray
    dp_w: np.ndarray
    dp_n: np.ndarray
    dp: np.ndarray
    dB: np.ndarray
    dp_bar: np.ndarray
    dp_tilde: np.ndarray
    n_interior: int
    p_scale: np.ndarray  # largest pressure magnitude on either side


def face_data(problem: StepProblem, state: State) -> FaceData:
    """Phase mobilities upwinded exactly as in the flux evaluation, and jumps L - K."""
    mesh, fl = problem.mesh, problem.fluid
    k, l = mesh.face_cells[:, 0], mesh.face_cells[:, 1]
    w, n = cell_phases(fl, state)
    gw, gn = ghost_phases(problem, state)
    bd = problem._bnd
    up = face_fluxes(problem, state).upwind_l

    s = state.s_w
    sg = gw.s
    pt_c, pb_c, B_c = fl.p_tilde(s), fl.p_bar(s), fl.B(s)
    pt_g, pb_g, B_g = fl.p_tilde(sg), fl.p_bar(sg), fl.B(sg)

    dpw = np.concatenate([w.p[l] - w.p[k], gw.p - w.p[bd.cell]])
    dpn = np.concatenate([n.p[l] - n.p[k], gn.p - n.p[bd.cell]])
    up_w = np.concatenate([up[:, 0], dpw[mesh.n_faces:] >= 0])
    up_n = np.concatenate([up[:, 1], dpn[mesh.n_faces:] >= 0])
    sw_k = np.concatenate([s[k], s[bd.cell]])
    sw_l = np.concatenate([s[l], sg])
    mob_w = fl.wetting.mobility(np.where(up_w, sw_l, sw_k))
    mob_n = fl.nonwetting.mobility(1.0 - np.where(up_n, sw_l, sw_k))

    def jump(cell_vals, ghost_vals):
        return np.concatenate([cell_vals[l] - cell_vals[k], ghost_vals - cell_vals[bd.cell]])

    p_glob = w.p + pb_c
    p_glob_g = gw.p + pb_g
    tau = np.concatenate([mesh.face_trans, mesh.bnd_trans[bd.idx]])
    mag = np.maximum(np.maximum(np.abs(w.p), np.abs(n.p)), np.abs(p_glob))
    mag_g = np.maximum(np.maximum(np.abs(gw.p), np.abs(gn.p)), np.abs(p_glob_g))
    scale = np.concatenate([np.maximum(mag[k], mag[l]), np.maximum(mag[bd.cell], mag_g)])
    return FaceData(tau, mob_w, mob_n, dpw, dpn, jump(p_glob, p_glob_g), jump(B_c, B_g),
                    jump(pb_c, pb_g), jump(pt_c, pt_g), mesh.n_faces, scale)


# -- energy ledger --------------------------------------------------------

@dataclass
class EnergyLedger:
    """Cumulative sums over steps of dt * sum_faces tau * (...)^2, each face counted once."""

    E_w: float = 0.0
    E_n: float = 0.0
    E_global: float = 0.0
    E_B: float = 0.0
    history: list = field(default_factory=list)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.E_w, self.E_n, self.E_global, self.E_B


def energy_increments(problem: StepProblem, state: State) -> tuple[float, float, float, float]:
    fd = face_data(problem, state)
    dt = problem.dt
    return (dt * float(np.sum(fd.tau * fd.mob_w * fd.dp_w**2)),
            dt * float(np.sum(fd.tau * fd.mob_n * fd.dp_n**2)),
            dt * float(np.sum(fd.tau * fd.dp**2)),
            dt * float(np.sum(fd.tau * fd.dB**2)))


def accumulate_energy(ledger: EnergyLedger, problem: StepProblem, old: State, new: State) -> EnergyLedger:
    """Add the implicit-step energy terms evaluated at ``new``."""
    inc = energy_increments(problem, new)
    ledger.E_w += inc[0]
    ledger.E_n += inc[1]
    ledger.E_global += inc[2]
    ledger.E_B += inc[3]
    ledger.history.append((new.t,) + ledger.as_tuple())
    return ledger


# -- interface inequalities ------------------------------------------------

@dataclass
class LemmaReport:
    faces_checked: int
    mobility_violations: int
    global_pressure_violations: int
    min_mobility_margin: float  # min of (M_w + M_n) / m0
    max_global_ratio: float  # max of m0 dp^2 / RHS
    C_B: float
    C_pbar: float
    C_ptilde: float
    skipped: int

    @property
    def passed(self) -> bool:
        return self.mobility_violations == 0 and self.global_pressure_violations == 0

    def merge(self, other: "LemmaReport") -> "LemmaReport":
        return LemmaReport(
            self.faces_checked + other.faces_checked,
            self.mobility_violations + other.mobility_violations,
            self.global_pressure_violations + other.global_pressure_violations,
            min(self.min_mobility_margin, other.min_mobility_margin),
            max(self.max_global_ratio, other.max_global_ratio),
            max(self.C_B, other.C_B), max(self.C_pbar, other.C_pbar), max(self.C_ptilde, other.C_ptilde),
            self.skipped + other.skipped)

    @classmethod
    def empty(cls) -> "LemmaReport":
        return cls(0, 0, 0, np.inf, 0.0, 0.0, 0.0, 0.0, 0)


def check_interface_lemmas(problem: StepProblem, state: State, m0: float,
                           include_boundary: bool = True, ulps: float = 8.0) -> LemmaReport:
    """Check M_w + M_n >= m0 and m0 dp^2 <= M_w dp_w^2 + M_n dp_n^2 face by face,
    and measure the sup of the capillary ratios.

    Pressure jumps are differences of values near the ambient pressure, so
    they carry an absolute rounding error of a few ulps of |p|.  The margin
    ``u = ulps * eps * |p|`` per face absorbs that rounding; faces whose
    phase jumps are all below ``u`` are skipped for the ratios.
    """
    fd = face_data(problem, state)
    sel = slice(None) if include_boundary else slice(0, fd.n_interior)
    mw, mn = fd.mob_w[sel], fd.mob_n[sel]
    u = ulps * np.finfo(float).eps * fd.p_scale[sel]
    rhs = mw * fd.dp_w[sel] ** 2 + mn * fd.dp_n[sel] ** 2
    total = mw + mn
    lhs = m0 * fd.dp[sel] ** 2
    mob_bad = int(np.sum(total < m0 * (1 - 1e-12)))
    glob_bad = int(np.sum(lhs - rhs > 1e-12 * rhs + m0 * u**2))
    nz = rhs > total * u**2
    skipped = int(np.sum(~nz))

    def sup(num):
        num = num[sel]
        return float(np.max(num[nz] / rhs[nz])) if np.any(nz) else 0.0

    return LemmaReport(
        int(total.size), mob_bad, glob_bad,
        float(np.min(total) / m0) if total.size else np.inf,
        sup(m0 * fd.dp**2),
        sup(fd.dB**2), sup(fd.mob_w * fd.dp_bar**2), sup(fd.mob_n * fd.dp_tilde**2), skipped)


# -- flux axioms ----------------------------------------------------------

@dataclass
class FluxAxiomReport:
    consistency_error: float
    antisymmetry_error: float
    monotone_violations: int
    growth_violations: int
    passed: bool


def check_flux_axioms(phase: PhaseParams, n: int = 100_000, n_monotone: int = 10_000, rng=None,
                      tol: float = 1e-12, growth_constant: float | None = None) -> FluxAxiomReport:
    rng = np.random.default_rng(rng)
    a, b = rng.random(n), rng.random(n)
    c = rng.standard_normal(n) * 10.0 ** rng.uniform(-2, 6, n)
    g_aac = upwind_flux(phase, a, a, c)
    ref = -phase.mobility(a) * c
    cons = float(np.max(np.abs(g_aac - ref) / np.maximum(np.abs(ref), 1e-300)))
    g1, g2 = upwind_flux(phase, a, b, c), upwind_flux(phase, b, a, -c)
    anti = float(np.max(np.abs(g1 + g2) / np.maximum(np.abs(g1), 1e-300)))

    m = n_monotone
    lo, hi = np.sort(rng.random((2, m)), axis=0)
    other, cc = rng.random(m), rng.standard_normal(m) * 1e3
    mono = int(np.sum(upwind_flux(phase, lo, other, cc) > upwind_flux(phase, hi, other, cc)))
    mono += int(np.sum(upwind_flux(phase, other, lo, cc) < upwind_flux(phase, other, hi, cc)))

    C = growth_constant if growth_constant is not None else 1.0 / phase.viscosity
    growth = int(np.sum(np.abs(g1) > C * (np.abs(a) + np.abs(b)) * np.abs(c) * (1 + tol)))
    return FluxAxiomReport(cons, anti, mono, growth, cons <= tol and anti <= tol and mono == 0 and growth == 0)


# -- mass balance ----------------------------------------------------------

@dataclass
class MassBalance:
    """Per-step phase mass bookkeeping against boundary and source fluxes.

    Per step: imbalance = m_new - m_old + dt * (boundary outflow - net source),
    with all fluxes at the new time level.  The allowance per step is
    ``tol * sum_K |K| phi_K rho_ref`` (the Newton stopping rule bound summed
    over cells, times dt).
    """

    tol: float = NewtonConfig().tol
    initial: tuple | None = None
    masses: list = field(default_factory=list)
    imbalance: list = field(default_factory=list)
    allowance: list = field(default_factory=list)

    def start(self, mesh: Mesh, fluid: FluidModel, state: State):
        self.initial = phase_masses(mesh, fluid, state)
        self.masses = [self.initial]

    def record(self, problem: StepProblem, old: State, new: State):
        if self.initial is None:
            self.start(problem.mesh, problem.fluid, old)
        m_old = phase_masses(problem.mesh, problem.fluid, old)
        m_new = phase_masses(problem.mesh, problem.fluid, new)
        out = face_fluxes(problem, new).boundary.sum(axis=0) if len(problem._bnd.idx) else np.zeros(2)
        src = source_rates(problem, new)
        imb = tuple(m_new[a] - m_old[a] + problem.dt * (out[a] - src[a]) for a in range(2))
        pv = float(np.sum(problem.mesh.volumes * problem.mesh.porosity))
        allow = (self.tol * pv * problem.fluid.wetting.rho_ref, self.tol * pv * problem.fluid.nonwetting.rho_ref)
        self.masses.append(m_new)
        self.imbalance.append(imb)
        self.allowance.append(allow)

    @property
    def total_mass(self) -> np.ndarray:
        return np.asarray(self.initial, float)

    def relative_step_imbalance(self) -> np.ndarray:
        """Max over steps of |imbalance| / initial phase mass, per phase."""
        if not self.imbalance:
            return np.zeros(2)
        return np.max(np.abs(np.asarray(self.imbalance)), axis=0) / np.maximum(self.total_mass, 1e-300)

    def cumulative(self) -> tuple[np.ndarray, np.ndarray]:
        imb = np.abs(np.sum(np.asarray(self.imbalance).reshape(-1, 2), axis=0))
        allow = np.sum(np.asarray(self.allowance).reshape(-1, 2), axis=0)
        return imb, allow

    def closes(self, factor: float = 10.0) -> bool:
        imb, allow = self.cumulative()
        return bool(np.all(imb <= factor * allow))


def mass_balance(problem: StepProblem, states: Sequence[State]) -> MassBalance:
    """Mass bookkeeping over a sequence of consecutive states of a completed run."""
    mb = MassBalance()
    mb.start(problem.mesh, problem.fluid, states[0])
    for old, new in zip(states[:-1], states[1:]):
        mb.record(problem.advance(old, new.t - old.t), old, new)
    return mb


# -- run monitor -----------------------------------------------------------

@dataclass
class DiagnosticsRecord:
    step: int
    t: float
    sw_min: float
    sw_max: float
    mass_w: float
    mass_n: float
    E_w: float
    E_n: float
    E_global: float
    E_B: float
    C_obs: float
    newton_iters: int
    linear_iters: int

    FIELDS = ("step", "t", "sw_min", "sw_max", "mass_w", "mass_n", "E_w", "E_n", "E_global", "E_B",
              "C_obs", "newton_iters", "linear_iters")

    def row(self) -> tuple:
        return tuple(getattr(self, f) for f in self.FIELDS)


class RunMonitor:
    """Callback for ``run_transient`` collecting per-step diagnostics."""

    def __init__(self, m0: float | None = None, lemmas: bool = True, sink: Callable | None = None,
                 tol: float = NewtonConfig().tol):
        self.m0 = m0
        self.lemmas = lemmas and m0 is not None
        self.ledger = EnergyLedger()
        self.mass = MassBalance(tol=tol)
        self.lemma_report = LemmaReport.empty()
        self.max_principle_failures: list[tuple[int, MaxPrincipleReport]] = []
        self.records: list[DiagnosticsRecord] = []
        self.reports: list[StepReport] = []
        self.sink = sink

    def __call__(self, step: int, problem: StepProblem, old: State, new: State, report: StepReport):
        mp = check_max_principle(new)
        if not mp.passed:
            self.max_principle_failures.append((step, mp))
        accumulate_energy(self.ledger, problem, old, new)
        self.mass.record(problem, old, new)
        if self.lemmas:
            self.lemma_report = self.lemma_report.merge(check_interface_lemmas(problem, new, self.m0))
        m = self.mass.masses[-1]
        rec = DiagnosticsRecord(step, new.t, mp.s_min, mp.s_max, m[0], m[1], *self.ledger.as_tuple(),
                                self.lemma_report.C_B, report.newton_iters, report.linear_iters)
        self.records.append(rec)
        self.reports.append(report)
        if self.sink is not None:
            self.sink(rec)

    @property
    def max_principle_ok(self) -> bool:
        return not self.max_principle_failures


# -- refinement study ------------------------------------------------------

@dataclass
class LevelRun:
    level: int
    mesh: Mesh
    dt: float
    states: list  # states at t = 0, dt, 2 dt, ...
    monitor: RunMonitor | None = None

    @property
    def T(self) -> float:
        return self.dt * (len(self.states) - 1)


def run_level(problem: StepProblem, level: int, T_final: float, dt: float | None = None,
              monitor: RunMonitor | None = None, newton: NewtonConfig | None = None,
              linear: LinearConfig | None = None) -> LevelRun:
    states = [problem.previous.copy()]

    def cb(step, p, old, new, rep):
        states.append(new.copy())
        if monitor is not None:
            monitor(step, p, old, new, rep)

    dt = problem.dt if dt is None else dt
    run_transient(problem, T_final, dt, callback=cb, newton=newton, linear=linear)
    return LevelRun(level, problem.mesh, dt, states, monitor)


def _cell_centroids(mesh: Mesh) -> np.ndarray:
    return np.array([polygon_centroid(mesh.cell_polygon(k)) for k in range(mesh.n_cells)])


def l1_distance(coarse: LevelRun, fine: LevelRun, field_fn: Callable[[State], np.ndarray]) -> float:
    """L1(Q_T) distance between the coarse solution and the fine solution
    averaged (volume-weighted) onto the coarse cells, both piecewise constant
    in time."""
    if abs(coarse.T - fine.T) > 1e-9 * max(coarse.T, 1.0):
        raise ValueError("runs cover different time intervals")
    owner = locate_cells(coarse.mesh, _cell_centroids(fine.mesh))
    if np.any(owner < 0):
        raise ValueError("fine mesh is not nested in the coarse mesh")
    w = fine.mesh.volumes
    vol_c = np.bincount(owner, weights=w, minlength=coarse.mesh.n_cells)
    ratio = coarse.dt / fine.dt
    r = round(ratio)
    if abs(ratio - r) > 1e-9 or r < 1:
        raise ValueError("coarse step must be an integer multiple of the fine step")
    total = 0.0
    for m in range(1, len(fine.states)):
        n = (m + r - 1) // r
        avg = np.bincount(owner, weights=w * field_fn(fine.states[m]), minlength=coarse.mesh.n_cells) / vol_c
        total += fine.dt * float(np.sum(coarse.mesh.volumes * np.abs(field_fn(coarse.states[n]) - avg)))
    return total


@dataclass
class ConvergenceRow:
    coarse: int
    fine: int
    dist_s: float
    dist_p: float


@dataclass
class ConvergenceTable:
    rows: list

    @staticmethod
    def _decreasing(d) -> bool:
        return len(d) >= 1 and all(b < a for a, b in zip(d, d[1:]))

    @property
    def monotone(self) -> bool:
        """Strict decrease of the saturation distances."""
        return self._decreasing([r.dist_s for r in self.rows])

    @property
    def monotone_p(self) -> bool:
        return self._decreasing([r.dist_p for r in self.rows])

    def format(self) -> str:
        lines = [f"{'coarse':>7} {'fine':>7} {'L1(s_w)':>14} {'L1(p)':>14} {'ratio_s':>8}"]
        prev = None
        for r in self.rows:
            rat = f"{prev / r.dist_s:8.3f}" if prev and r.dist_s > 0 else " " * 8
            lines.append(f"{r.coarse:7d} {r.fine:7d} {r.dist_s:14.6e} {r.dist_p:14.6e} {rat}")
            prev = r.dist_s
        return "\n".join(lines)


def distance_table(runs: Sequence[LevelRun], fluid: FluidModel) -> ConvergenceTable:
    def sat(st):
        return st.s_w

    def glob(st):
        return fluid.global_pressure(st.p_w, np.clip(st.s_w, 0.0, 1.0))

    rows = [ConvergenceRow(c.level, f.level, l1_distance(c, f, sat), l1_distance(c, f, glob))
            for c, f in zip(runs[:-1], runs[1:])]
    return ConvergenceTable(rows)


def convergence_study(make_problem: Callable[[int], StepProblem], levels: Sequence[int], T_final: float,
                      dt: float, refine_dt: bool = False, newton: NewtonConfig | None = None,
                      linear: LinearConfig | None = None,
                      make_monitor: Callable[[int], RunMonitor] | None = None
                      ) -> tuple[ConvergenceTable, list[LevelRun]]:
    """Run ``make_problem(n)`` for each level and tabulate successive L1(Q_T) distances.

    Levels must be nested (each mesh refines the previous one).  ``make_monitor``
    optionally attaches a per-level diagnostics monitor.
    """
    levels = list(levels)
    if len(levels) < 2:
        raise ValueError("a convergence study needs at least two levels")
    runs = []
    for n in levels:
        step = dt * (levels[0] / n if refine_dt else 1.0)
        problem = make_problem(n)
        monitor = make_monitor(n) if make_monitor else None
        runs.append(run_level(problem.advance(problem.previous, step), n, T_final, step, monitor=monitor,
                              newton=newton, linear=linear))
    return distance_table(runs, make_problem(levels[0]).fluid), runs


# -- single-phase oracle ----------------------------------------------------

def tpfa_oracle(mesh: Mesh, coefficient: float, dirichlet: dict) -> np.ndarray:
    """Direct solve of the linear two-point flux problem
    sum_sigma coefficient * tau_sigma (u_K - u_sigma) = 0 with Dirichlet
    values per boundary tag (other boundary faces impervious)."""
    n = mesh.n_cells
    A = sp.lil_matrix((n, n))
    b = np.zeros(n)
    for f, (k, l) in enumerate(mesh.face_cells):
        t = coefficient * mesh.face_trans[f]
        A[k, k] += t
        A[l, l] += t
        A[k, l] -= t
        A[l, k] -= t
    for f in range(mesh.n_boundary):
        tag = mesh.bnd_tag[f]
        if tag in dirichlet:
            k = mesh.bnd_cell[f]
            t = coefficient * mesh.bnd_trans[f]
            A[k, k] += t
            b[k] += t * dirichlet[tag]
    return spla.spsolve(A.tocsr(), b)
