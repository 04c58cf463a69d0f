"""Newton iteration for one implicit step and transient time marching."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .scheme import State, StepProblem, assemble, assemble_residual


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-8
    max_iter: int = 20
    initial_step: float = 1.0
    backtrack: float = 0.5
    max_backtracks: int = 8
    dt_factor: float = 0.5
    max_retries: int = 4

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("Newton tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.backtrack < 1 or not 0 < self.dt_factor < 1:
            raise ValueError("backtracking and dt factors must lie in (0, 1)")


@dataclass(frozen=True)
class LinearConfig:
    rtol: float = 1e-10
    max_iter: int = 500
    preconditioner: str = "ilu"
    pressure_scale: float = 1e5
    ilu_drop_tol: float = 1e-4
    ilu_fill_factor: float = 10.0
    direct_fallback: bool = True

    def __post_init__(self):
        if not 0 < self.rtol < 1:
            raise ValueError("linear tolerance must lie in (0, 1)")
        if self.preconditioner not in ("none", "diagonal", "ilu"):
            raise ValueError("preconditioner must be none, diagonal or ilu")


@dataclass
class StepReport:
    newton_iters: int = 0
    residual_norm: float = 0.0
    linear_iters: int = 0
    dt_retries: int = 0
    wall_time: float = 0.0
    substeps: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)
    direct_solves: int = 0

    def merge(self, other: "StepReport"):
        self.newton_iters += other.newton_iters
        self.linear_iters += other.linear_iters
        self.dt_retries += other.dt_retries
        self.direct_solves += other.direct_solves
        self.substeps += other.substeps
        self.residual_history += other.residual_history
        self.residual_norm = other.residual_norm


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, best_residual: float, report: StepReport | None = None):
        super().__init__(message)
        self.best_residual = best_residual
        self.report = report


class TransientFailure(RuntimeError):
    """A step failed; the completed prefix is kept on the exception."""

    def __init__(self, message, step, state, reports, cause):
        super().__init__(message)
        self.step = step
        self.state = state
        self.reports = reports
        self.cause = cause


def scaled_norm(problem: StepProblem, residual: np.ndarray) -> float:
    r = np.asarray(residual).reshape(-1) / problem.row_scale
    if not np.all(np.isfinite(r)):
        return np.inf
    return float(np.max(np.abs(r))) if r.size else 0.0


def _linear_solve(J: sp.csr_matrix, rhs: np.ndarray, lin: LinearConfig, row_scale: np.ndarray):
    """Solve J dx = rhs on the row/column-scaled system. Returns (dx, iterations, used_direct)."""
    n = J.shape[0]
    col = np.ones(n)
    col[0::2] = lin.pressure_scale
    A = (sp.diags(1.0 / row_scale) @ J @ sp.diags(col)).tocsc()
    b = rhs / row_scale
    M = None
    try:
        if lin.preconditioner == "diagonal":
            d = A.diagonal()
            d = np.where(d == 0, 1.0, d)
            M = spla.LinearOperator(A.shape, matvec=lambda v: v / d)
        elif lin.preconditioner == "ilu":
            ilu = spla.spilu(A, drop_tol=lin.ilu_drop_tol, fill_factor=lin.ilu_fill_factor)
            M = spla.LinearOperator(A.shape, matvec=ilu.solve)
    except RuntimeError:
        M = None
    count = [0]

    def cb(_):
        count[0] += 1

    y, info = spla.bicgstab(A, b, rtol=lin.rtol, atol=0.0, maxiter=lin.max_iter, M=M, callback=cb)
    if info != 0 or not np.all(np.isfinite(y)):
        if not lin.direct_fallback:
            raise ConvergenceError("linear solver did not converge", np.inf)
        y = spla.spsolve(A, b)
        if not np.all(np.isfinite(y)):
            raise ConvergenceError("singular Jacobian", np.inf)
        return y * col, count[0], True
    return y * col, count[0], False


def _newton(problem: StepProblem, cfg: NewtonConfig, lin: LinearConfig, guess: State | None):
    rep = StepReport(substeps=[problem.dt])
    t_new = problem.previous.t + problem.dt
    x = (guess or problem.previous).to_vector()
    R, J, _ = assemble(problem, State.from_vector(x, t_new))
    norm = scaled_norm(problem, R)
    rep.residual_history.append(norm)
    best = norm
    for it in range(cfg.max_iter + 1):
        if norm <= cfg.tol:
            rep.newton_iters = it
            rep.residual_norm = norm
            return State.from_vector(x, t_new), rep
        if it == cfg.max_iter or not np.isfinite(norm):
            break
        dx, nlin, direct = _linear_solve(J, -R.reshape(-1), lin, problem.row_scale)
        rep.linear_iters += nlin
        rep.direct_solves += int(direct)
        lam = cfg.initial_step
        for k in range(cfg.max_backtracks + 1):
            xt = x + lam * dx
            Rt = assemble_residual(problem, State.from_vector(xt, t_new))
            nt = scaled_norm(problem, Rt)
            if nt < norm or k == cfg.max_backtracks:
                break
            lam *= cfg.backtrack
        x = xt
        R, J, _ = assemble(problem, State.from_vector(x, t_new))
        norm = scaled_norm(problem, R)
        rep.residual_history.append(norm)
        best = min(best, norm)
    rep.newton_iters = cfg.max_iter
    rep.residual_norm = norm
    raise ConvergenceError(f"Newton did not converge (best scaled residual {best:.3e})", best, rep)


def solve_step(problem: StepProblem, cfg: NewtonConfig | None = None, lin: LinearConfig | None = None,
               guess: State | None = None, _depth: int = 0) -> tuple[State, StepReport]:
    """Advance ``problem.previous`` by ``problem.dt``; halves the step on failure."""
    cfg = cfg or NewtonConfig()
    lin = lin or LinearConfig()
    prev = problem.previous
    if not (np.all(np.isfinite(prev.p_w)) and np.all(np.isfinite(prev.s_w))):
        raise ValueError("previous state is not finite")
    t0 = time.perf_counter()
    try:
        state, rep = _newton(problem, cfg, lin, guess)
    except ConvergenceError as err:
        if _depth >= cfg.max_retries:
            raise
        half = problem.dt * cfg.dt_factor
        rest = problem.dt - half
        rep = StepReport(dt_retries=1, substeps=[])
        mid, r1 = solve_step(problem.advance(prev, half), cfg, lin, None, _depth + 1)
        end, r2 = solve_step(problem.advance(mid, rest), cfg, lin, None, _depth + 1)
        rep.merge(r1)
        rep.merge(r2)
        state = State(end.p_w, end.s_w, prev.t + problem.dt)
        if err.report is not None:
            rep.residual_history = err.report.residual_history + rep.residual_history
    rep.wall_time = time.perf_counter() - t0
    return state, rep


@dataclass
class TransientReport:
    steps: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    dt: float = 0.0
    n_steps: int = 0

    @property
    def newton_iters(self) -> list[int]:
        return [r.newton_iters for r in self.steps]

    @property
    def total_retries(self) -> int:
        return sum(r.dt_retries for r in self.steps)


def step_count(T_final: float, dt: float) -> int:
    if dt <= 0:
        raise ValueError("time step must be positive")
    if T_final < 0:
        raise ValueError("final time must be nonnegative")
    n = round(T_final / dt)
    if abs(n * dt - T_final) > 1e-9 * max(T_final, dt):
        raise ValueError(f"final time {T_final} is not an integer multiple of dt={dt}")
    return int(n)


def run_transient(problem: StepProblem, T_final: float, dt: float | None = None,
                  outputs: Sequence[float] = (), callback: Callable | None = None,
                  newton: NewtonConfig | None = None, linear: LinearConfig | None = None
                  ) -> tuple[State, TransientReport]:
    """March ``T_final / dt`` uniform steps from ``problem.previous``.

    ``callback(step, problem, old, new, report)`` runs after every accepted
    step.  States at the times listed in ``outputs`` are kept in
    ``report.snapshots`` keyed by step index.
    """
    dt = problem.dt if dt is None else dt
    n = step_count(T_final, dt)
    wanted = {step_count(t, dt) for t in outputs}
    if any(k > n for k in wanted):
        raise ValueError("output time beyond final time")
    state = problem.previous
    t0 = state.t
    report = TransientReport(dt=dt, n_steps=n)
    if 0 in wanted:
        report.snapshots[0] = state.copy()
    for k in range(1, n + 1):
        step_problem = problem.advance(state, dt)
        try:
            new, rep = solve_step(step_problem, newton, linear)
        except ConvergenceError as err:
            raise TransientFailure(f"step {k} failed: {err}", k, state, report, err) from err
        new.t = t0 + k * dt
        report.steps.append(rep)
        if callback is not None:
            callback(k, step_problem, state, new, rep)
        if k in wanted:
            report.snapshots[k] = new.copy()
        state = new
    return state, report
