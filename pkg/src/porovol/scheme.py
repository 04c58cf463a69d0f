"""Fully implicit two-phase finite volume residual and Jacobian.

Primary unknowns per cell are the wetting pressure and wetting saturation,
interleaved as ``[p_w0, s_w0, p_w1, s_w1, ...]``.  The nonwetting pressure is
eliminated with ``p_n = p_w + p_c(s_w)``.  Residual rows are interleaved the
same way: wetting mass balance, then nonwetting mass balance (kg/s).

Each phase is upwinded on its own pressure jump.  Dirichlet boundary faces
act as ghost neighbours at distance d(x_K, sigma); their saturation is either
imposed by the boundary condition or taken from the interior cell.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp

from .fluid import FluidModel, PhaseParams
from .mesh import Mesh, polygon_centroid

PHASES = ("w", "n")


@dataclass
class State:
    p_w: np.ndarray
    s_w: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.p_w = np.asarray(self.p_w, dtype=float)
        self.s_w = np.asarray(self.s_w, dtype=float)

    def copy(self) -> "State":
        return State(self.p_w.copy(), self.s_w.copy(), self.t)

    def to_vector(self) -> np.ndarray:
        x = np.empty(2 * len(self.p_w))
        x[0::2] = self.p_w
        x[1::2] = self.s_w
        return x

    @classmethod
    def from_vector(cls, x, t=0.0) -> "State":
        return cls(x[0::2].copy(), x[1::2].copy(), t)


@dataclass(frozen=True)
class Dirichlet:
    """Imposed pressure of one phase on a tagged boundary portion.

    ``s_w`` fixes the ghost wetting saturation; ``None`` takes it from the
    interior cell.  The other phase pressure follows from the capillary
    closure evaluated at the ghost saturation.
    """

    pressure: float
    phase: str = "w"
    s_w: float | None = None

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        if self.s_w is not None and not 0.0 <= self.s_w <= 1.0:
            raise ValueError("boundary saturation must lie in [0, 1]")


@dataclass
class SourceSpec:
    """Cell-averaged production/injection rates (1/s) and injected wetting fraction."""

    f_p: np.ndarray
    f_i: np.ndarray
    s_i: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SourceSpec":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    def validate(self):
        if np.any(self.f_p < 0) or np.any(self.f_i < 0):
            raise ValueError("source rates must be nonnegative")
        if np.any((self.s_i < 0) | (self.s_i > 1)):
            raise ValueError("injected saturation must lie in [0, 1]")

    @property
    def active(self) -> bool:
        return bool(np.any(self.f_p) or np.any(self.f_i))


@dataclass
class StepProblem:
    mesh: Mesh
    fluid: FluidModel
    previous: State
    dt: float
    gravity: tuple = (0.0, 0.0)
    sources: SourceSpec | None = None
    boundary: Mapping[str, Dirichlet] = field(default_factory=dict)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("time step must be positive")
        if self.sources is None:
            self.sources = SourceSpec.zeros(self.mesh.n_cells)
        unknown = set(self.boundary) - set(self.mesh.tags)
        if unknown:
            raise ValueError(f"boundary tags not present in the mesh: {sorted(unknown)}")

    def advance(self, state: State, dt: float | None = None) -> "StepProblem":
        """Same problem posed from ``state`` (optionally with another step)."""
        return replace(self, previous=state, dt=self.dt if dt is None else dt)

    @cached_property
    def _bnd(self):
        return _BoundaryData.build(self.mesh, self.boundary)

    @property
    def row_scale(self) -> np.ndarray:
        """Accumulation scale |K| phi_K rho_ref / dt per residual row."""
        m = self.mesh
        base = m.volumes * m.porosity / self.dt
        out = np.empty(2 * m.n_cells)
        out[0::2] = base * self.fluid.wetting.rho_ref
        out[1::2] = base * self.fluid.nonwetting.rho_ref
        return out


@dataclass
class _BoundaryData:
    idx: np.ndarray
    cell: np.ndarray
    pressure: np.ndarray
    imposes_w: np.ndarray
    s_fixed: np.ndarray
    has_fixed_s: np.ndarray

    @classmethod
    def build(cls, mesh: Mesh, boundary: Mapping[str, Dirichlet]):
        idx, pr, iw, sf, hf = [], [], [], [], []
        for tag, bc in boundary.items():
            sel = np.flatnonzero(mesh.bnd_tag == tag)
            idx.append(sel)
            pr.append(np.full(len(sel), bc.pressure))
            iw.append(np.full(len(sel), bc.phase == "w"))
            sf.append(np.full(len(sel), 0.0 if bc.s_w is None else bc.s_w))
            hf.append(np.full(len(sel), bc.s_w is not None))
        if idx:
            order = np.argsort(np.concatenate(idx), kind="stable")
            cat = [np.concatenate(a)[order] for a in (idx, pr, iw, sf, hf)]
        else:
            cat = [np.zeros(0, int), np.zeros(0), np.zeros(0, bool), np.zeros(0), np.zeros(0, bool)]
        return cls(cat[0], mesh.bnd_cell[cat[0]], cat[1], cat[2], cat[3], cat[4])


# -- flux kernels ---------------------------------------------------------

def upwind_flux(phase: PhaseParams, a, b, c):
    """G(a, b, c) = -M(b) c+ + M(a) c-: flux kernel out of K for jump c = p_L - p_K."""
    c = np.asarray(c, float)
    return -phase.mobility(b) * np.maximum(c, 0.0) + phase.mobility(a) * np.maximum(-c, 0.0)


def gravity_flux(phase: PhaseParams, measure, normal, s_k, s_l, rho_kl, g, permeability=1.0):
    """Upwinded gravity mass flux out of K: |sigma| k rho^2 (M(s_K) g+ - M(s_L) g-)."""
    gdot = np.asarray(normal, float) @ np.asarray(g, float)
    gp, gm = np.maximum(gdot, 0.0), np.maximum(-gdot, 0.0)
    return measure * permeability * np.asarray(rho_kl) ** 2 * (phase.mobility(s_k) * gp - phase.mobility(s_l) * gm)


def _phase_flux(ph: PhaseParams, pk, pl, sk, sl, tau, gcoef, gdot):
    """Mass flux out of K through a face and its partial derivatives."""
    rho, drk, drl = ph.interface_density_with_derivs(pk, pl)
    dp = pl - pk
    up_l = dp >= 0.0  # tie takes the c+ branch
    mk, ml = ph.mobility(sk), ph.mobility(sl)
    dmk, dml = ph.dmobility(sk), ph.dmobility(sl)
    mup = np.where(up_l, ml, mk)
    G = -mup * dp
    F = tau * rho * G
    d_pk = tau * (drk * G + rho * mup)
    d_pl = tau * (drl * G - rho * mup)
    d_sk = tau * rho * np.where(up_l, 0.0, -dmk * dp)
    d_sl = tau * rho * np.where(up_l, -dml * dp, 0.0)
    if gdot is not None:
        gp, gm = np.maximum(gdot, 0.0), np.maximum(-gdot, 0.0)
        gg = mk * gp - ml * gm
        F = F + gcoef * rho**2 * gg
        d_pk = d_pk + gcoef * 2 * rho * drk * gg
        d_pl = d_pl + gcoef * 2 * rho * drl * gg
        d_sk = d_sk + gcoef * rho**2 * dmk * gp
        d_sl = d_sl - gcoef * rho**2 * dml * gm
    return F, d_pk, d_sk, d_pl, d_sl, up_l


@dataclass
class CellPhase:
    """Per-cell phase pressure/saturation and their derivatives w.r.t. (p_w, s_w)."""

    p: np.ndarray
    s: np.ndarray
    dp: np.ndarray  # (n, 2)
    ds: np.ndarray  # (n, 2)


def cell_phases(fluid: FluidModel, state: State) -> tuple[CellPhase, CellPhase]:
    n = len(state.p_w)
    pc, dpc = fluid.pc(state.s_w), fluid.dpc(state.s_w)
    one = np.ones(n)
    zero = np.zeros(n)
    w = CellPhase(state.p_w, state.s_w, np.column_stack([one, zero]), np.column_stack([zero, one]))
    nw = CellPhase(state.p_w + pc, 1.0 - state.s_w, np.column_stack([one, dpc]), np.column_stack([zero, -one]))
    return w, nw


def ghost_phases(problem: StepProblem, state: State) -> tuple[CellPhase, CellPhase]:
    """Ghost values on Dirichlet faces, with derivatives w.r.t. the interior cell's unknowns."""
    bd = problem._bnd
    fl = problem.fluid
    sk = state.s_w[bd.cell]
    s = np.where(bd.has_fixed_s, bd.s_fixed, sk)
    ds = np.column_stack([np.zeros(len(s)), np.where(bd.has_fixed_s, 0.0, 1.0)])
    pc, dpc = fl.pc(s), fl.dpc(s)
    pw = np.where(bd.imposes_w, bd.pressure, bd.pressure - pc)
    pn = np.where(bd.imposes_w, bd.pressure + pc, bd.pressure)
    dpw = np.where(bd.imposes_w[:, None], 0.0, -dpc[:, None] * ds)
    dpn = np.where(bd.imposes_w[:, None], dpc[:, None] * ds, 0.0)
    return CellPhase(pw, s, dpw, ds), CellPhase(pn, 1.0 - s, dpn, -ds)


@dataclass
class FaceFluxes:
    """Phase mass fluxes (kg/s) out of the first cell of each face."""

    interior: np.ndarray  # (n_faces, 2)
    boundary: np.ndarray  # (n_dirichlet, 2)
    boundary_index: np.ndarray
    upwind_l: np.ndarray  # (n_faces, 2) True where the L-side saturation is upwind
    dp: np.ndarray  # (n_faces, 2) phase pressure jumps p_L - p_K


def _evaluate(problem: StepProblem, state: State, jacobian: bool):
    mesh, fl = problem.mesh, problem.fluid
    nc = mesh.n_cells
    prev = problem.previous
    dt = problem.dt
    cur = cell_phases(fl, state)
    old = cell_phases(fl, prev)
    ghost = ghost_phases(problem, state)
    bd = problem._bnd
    src = problem.sources
    g = np.asarray(problem.gravity, float)
    has_g = bool(np.any(g != 0))

    vol = mesh.volumes
    acc_coef = vol * mesh.porosity / dt
    R = np.zeros((nc, 2))
    rows, cols, vals = [], [], []
    k, l = mesh.face_cells[:, 0], mesh.face_cells[:, 1]
    flux_int = np.zeros((mesh.n_faces, 2))
    flux_bnd = np.zeros((len(bd.idx), 2))
    upl = np.zeros((mesh.n_faces, 2), dtype=bool)
    dps = np.zeros((mesh.n_faces, 2))
    gdot_i = mesh.face_normal @ g if has_g else None
    gdot_b = mesh.bnd_normal[bd.idx] @ g if has_g else None
    gcoef_i = mesh.face_measure * mesh.face_perm
    gcoef_b = mesh.bnd_measure[bd.idx] * mesh.permeability[bd.cell]

    for a, (ph, c, o, gh) in enumerate(zip((fl.wetting, fl.nonwetting), cur, old, ghost)):
        rho = ph.density(c.p)
        drho = ph.ddensity(c.p)
        rho_old = ph.density(o.p)
        s_inj = src.s_i if a == 0 else 1.0 - src.s_i
        R[:, a] = acc_coef * (rho * c.s - rho_old * o.s) + vol * rho * (c.s * src.f_p - s_inj * src.f_i)

        F, d_pk, d_sk, d_pl, d_sl, up = _phase_flux(
            ph, c.p[k], c.p[l], c.s[k], c.s[l], mesh.face_trans, gcoef_i, gdot_i)
        np.add.at(R[:, a], k, F)
        np.add.at(R[:, a], l, -F)
        flux_int[:, a] = F
        upl[:, a] = up
        dps[:, a] = c.p[l] - c.p[k]

        bc = bd.cell
        Fb, b_pk, b_sk, b_pl, b_sl, _ = _phase_flux(
            ph, c.p[bc], gh.p, c.s[bc], gh.s, mesh.bnd_trans[bd.idx], gcoef_b, gdot_b)
        np.add.at(R[:, a], bc, Fb)
        flux_bnd[:, a] = Fb

        if not jacobian:
            continue
        # accumulation and sources: diagonal 2x2 blocks
        dacc = acc_coef[:, None] * (drho[:, None] * c.dp * c.s[:, None] + rho[:, None] * c.ds)
        dsrc = vol[:, None] * (
            (drho * (c.s * src.f_p - s_inj * src.f_i))[:, None] * c.dp + (rho * src.f_p)[:, None] * c.ds)
        diag = dacc + dsrc
        cells = np.arange(nc)
        for j in range(2):
            rows.append(2 * cells + a); cols.append(2 * cells + j); vals.append(diag[:, j])

        dK = d_pk[:, None] * c.dp[k] + d_sk[:, None] * c.ds[k]
        dL = d_pl[:, None] * c.dp[l] + d_sl[:, None] * c.ds[l]
        for j in range(2):
            rows += [2 * k + a, 2 * k + a, 2 * l + a, 2 * l + a]
            cols += [2 * k + j, 2 * l + j, 2 * k + j, 2 * l + j]
            vals += [dK[:, j], dL[:, j], -dK[:, j], -dL[:, j]]

        dB = b_pk[:, None] * c.dp[bc] + b_sk[:, None] * c.ds[bc] + b_pl[:, None] * gh.dp + b_sl[:, None] * gh.ds
        for j in range(2):
            rows.append(2 * bc + a); cols.append(2 * bc + j); vals.append(dB[:, j])

    fluxes = FaceFluxes(flux_int, flux_bnd, bd.idx, upl, dps)
    J = None
    if jacobian:
        J = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(2 * nc, 2 * nc))
        J.sum_duplicates()
    return R, J, fluxes


def assemble_residual(problem: StepProblem, candidate: State) -> np.ndarray:
    """Per-cell residuals, shape (n_cells, 2): wetting and nonwetting balance (kg/s)."""
    _check_finite(candidate)
    return _evaluate(problem, candidate, False)[0]


def assemble_jacobian(problem: StepProblem, candidate: State) -> sp.csr_matrix:
    """Analytic Jacobian d(residual)/d(p_w, s_w) with interleaved ordering."""
    _check_finite(candidate)
    return _evaluate(problem, candidate, True)[1]


def assemble(problem: StepProblem, candidate: State):
    """Residual, Jacobian and face fluxes in one pass."""
    _check_finite(candidate)
    return _evaluate(problem, candidate, True)


def face_fluxes(problem: StepProblem, state: State) -> FaceFluxes:
    return _evaluate(problem, state, False)[2]


def _check_finite(state: State):
    if not (np.all(np.isfinite(state.p_w)) and np.all(np.isfinite(state.s_w))):
        raise ValueError("non-finite entries in candidate state")


def phase_masses(mesh: Mesh, fluid: FluidModel, state: State) -> tuple[float, float]:
    """Total discrete mass of each phase: sum |K| phi_K rho s."""
    w, n = cell_phases(fluid, state)
    pv = mesh.volumes * mesh.porosity
    return (float(np.sum(pv * fluid.wetting.density(w.p) * w.s)),
            float(np.sum(pv * fluid.nonwetting.density(n.p) * n.s)))


def source_rates(problem: StepProblem, state: State) -> tuple[float, float]:
    """Net source mass rate (injection minus production) per phase, kg/s."""
    mesh, fl, src = problem.mesh, problem.fluid, problem.sources
    out = []
    for a, (ph, c) in enumerate(zip((fl.wetting, fl.nonwetting), cell_phases(fl, state))):
        rho = ph.density(c.p)
        s_inj = src.s_i if a == 0 else 1.0 - src.s_i
        out.append(float(np.sum(mesh.volumes * rho * (s_inj * src.f_i - c.s * src.f_p))))
    return out[0], out[1]


def project_initial(mesh: Mesh, p_w0, s_w0, t: float = 0.0) -> State:
    """Cell averages of initial data by the one-point (centroid) rule.

    ``p_w0`` and ``s_w0`` are constants, per-cell arrays, or callables of an
    ``(n, 2)`` coordinate array.
    """
    cen = np.array([polygon_centroid(mesh.cell_polygon(k)) for k in range(mesh.n_cells)])

    def evaluate(f):
        if callable(f):
            return np.asarray(f(cen), float).reshape(mesh.n_cells)
        return np.broadcast_to(np.asarray(f, float), (mesh.n_cells,)).copy()

    p, s = evaluate(p_w0), evaluate(s_w0)
    if np.any((s < 0) | (s > 1)):
        raise ValueError("initial saturation outside [0, 1]")
    return State(p, s, t)


InitialField = float | np.ndarray | Callable[[np.ndarray], np.ndarray]
