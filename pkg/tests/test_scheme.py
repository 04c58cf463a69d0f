import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from porovol.fluid import CapillaryModel, FluidModel, PhaseParams
from porovol.mesh import build_structured_rect, tag_boundary_segment
from porovol.scheme import (Dirichlet, SourceSpec, State, StepProblem, assemble, assemble_jacobian,
                            assemble_residual, face_fluxes, ghost_phases, gravity_flux, phase_masses,
                            project_initial, upwind_flux)
from porovol.verification import check_flux_axioms

from conftest import P_ATM, P_INJ, fivespot_problem, make_fluid, make_phase


def _problem(mesh, fluid, state, dt=0.1, **kw):
    return StepProblem(mesh, fluid, state, dt, **kw)


# -- flux kernels ----------------------------------------------------------

def test_upwind_hand_value():
    w = make_phase(1e-3)
    assert upwind_flux(w, 0.2, 0.8, 5.0) == pytest.approx(-3200.0)
    assert upwind_flux(w, 0.2, 0.8, -5.0) == pytest.approx(0.04 / 1e-3 * 5.0)
    assert upwind_flux(w, 0.2, 0.8, 0.0) == 0.0


def test_flux_axioms():
    for visc in (1e-3, 9e-5):
        rep = check_flux_axioms(make_phase(visc), rng=0)
        assert rep.passed, rep


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(-1e6, 1e6))
def test_upwind_antisymmetry(a, b, c):
    w = make_phase(1e-3)
    assert upwind_flux(w, a, b, c) == -upwind_flux(w, b, a, -c)


def test_gravity_flux_cases():
    w = make_phase(1e-3)
    down = np.array([0.0, -9.81])
    # normal along gravity: the K side is upwind
    assert gravity_flux(w, 2.0, [0, -1], 0.5, 1.0, 400.0, down, 1e-11) == pytest.approx(
        2.0 * 1e-11 * 400.0**2 * 250.0 * 9.81)
    # normal against gravity: the L side is upwind, flux enters K
    assert gravity_flux(w, 2.0, [0, 1], 0.5, 1.0, 400.0, down, 1e-11) == pytest.approx(
        -2.0 * 1e-11 * 400.0**2 * 1000.0 * 9.81)
    assert gravity_flux(w, 2.0, [1, 0], 0.5, 1.0, 400.0, down) == 0.0


# -- residual ---------------------------------------------------------------

def test_uniform_state_is_equilibrium(fluid):
    m = build_structured_rect(4, 4, 1.0, 1.0, porosity=0.206, permeability=1.5e-11)
    st0 = State(np.full(16, 2e5), np.full(16, 0.4))
    R = assemble_residual(_problem(m, fluid, st0), st0)
    assert np.all(R == 0.0)
    assert np.all(face_fluxes(_problem(m, fluid, st0), st0).upwind_l)  # ties take the L branch


def test_two_cell_single_phase_hand_oracle(two_cell_mesh):
    water = PhaseParams(viscosity=1e-3, rho_ref=1000.0, c_ref=0.0)
    fl = FluidModel(water, PhaseParams(viscosity=9e-5), CapillaryModel("none"))
    m = build_structured_rect(2, 1, 1.0, 1.0, porosity=0.206, permeability=1e-12)
    st0 = State([3e5, 1e5], [1.0, 1.0])
    R = assemble_residual(_problem(m, fl, st0), st0)
    # tau = k |sigma| / d = 1e-12 * 1 / 0.5; flux out of cell 0 = tau rho M (p0 - p1)
    q = 2e-12 * 1000.0 * (1.0 / 1e-3) * 2e5
    np.testing.assert_allclose(R[:, 0], [q, -q], rtol=1e-14)
    np.testing.assert_allclose(R[:, 1], 0.0, atol=1e-20)


def test_hydrostatic_column_is_equilibrium():
    fl = make_fluid()
    m = build_structured_rect(1, 6, 1.0, 3.0, porosity=0.206, permeability=1.5e-11)
    w = fl.wetting
    g = (0.0, -9.81)
    # hydrostatic profile from the Kirchhoff potential: g_w(p_below) - g_w(p_above) = dz * 9.81
    order = np.argsort(-m.centers[:, 1])
    p = np.empty(m.n_cells)
    p[order[0]] = P_ATM
    dz = 3.0 / 6
    for a, b in zip(order[:-1], order[1:]):
        target = w.kirchhoff(p[a]) + dz * 9.81
        p[b] = brentq(lambda x: w.kirchhoff(x) - target, p[a], p[a] + 1e5, xtol=1e-12, rtol=1e-15)
    st0 = State(p, np.ones(m.n_cells))
    prob = _problem(m, fl, st0, gravity=g)
    R = assemble_residual(prob, st0)
    scale = m.face_trans[0] * 400 * w.mobility(1.0) * dz * 400 * 9.81
    assert np.max(np.abs(R)) <= 1e-8 * scale
    # the same column with gravity switched off is not at rest
    assert np.max(np.abs(assemble_residual(_problem(m, fl, st0), st0))) > 1e-3 * scale


def test_interior_fluxes_are_conservative(fluid, rng):
    m = build_structured_rect(4, 4, 1.0, 1.0, porosity=0.206, permeability=1.5e-11)
    old = State(rng.uniform(1e5, 3e5, 16), rng.uniform(0.1, 0.9, 16))
    new = State(rng.uniform(1e5, 3e5, 16), rng.uniform(0.1, 0.9, 16))
    prob = _problem(m, fluid, old)
    R = assemble_residual(prob, new)
    mw1, mn1 = phase_masses(m, fluid, new)
    mw0, mn0 = phase_masses(m, fluid, old)
    np.testing.assert_allclose(R.sum(axis=0), [(mw1 - mw0) / 0.1, (mn1 - mn0) / 0.1], rtol=1e-9)


def test_sources_enter_residual(fluid):
    m = build_structured_rect(1, 1, 1.0, 1.0, porosity=0.2)
    st0 = State([P_ATM], [0.5])
    src = SourceSpec(np.array([0.0]), np.array([0.01]), np.array([1.0]))
    R = assemble_residual(_problem(m, fluid, st0, sources=src), st0)
    np.testing.assert_allclose(R[0], [-400.0 * 0.01, 0.0], rtol=1e-12)


def test_ghost_values(fluid):
    prob = fivespot_problem()
    st0 = prob.previous
    gw, gn = ghost_phases(prob, st0)
    inj = prob.mesh.bnd_tag[prob._bnd.idx] == "injection"
    np.testing.assert_allclose(gw.p[inj], P_INJ)
    np.testing.assert_allclose(gw.s[inj], 1.0)
    np.testing.assert_allclose(gn.p[inj], P_INJ)  # p_c(1) = 0
    out = ~inj
    np.testing.assert_allclose(gn.p[out], P_ATM)
    np.testing.assert_allclose(gw.s[out], 0.1)
    np.testing.assert_allclose(gw.p[out], P_ATM - fluid.pc(0.1))
    np.testing.assert_allclose(gw.ds[out], [[0.0, 1.0]] * int(out.sum()))
    np.testing.assert_allclose(gw.dp[out, 1], -fluid.dpc(0.1))


def test_boundary_drives_injection():
    prob = fivespot_problem()
    R = assemble_residual(prob, prob.previous)
    inj_cells = np.unique(prob.mesh.bnd_cell[prob.mesh.bnd_tag == "injection"])
    assert np.all(R[inj_cells, 0] < 0)  # wetting mass enters
    assert np.sum(np.abs(np.delete(R, inj_cells, axis=0)[:, 0])) < 1e-12 * np.sum(np.abs(R[inj_cells, 0])) + 1e-30


def test_unknown_tag_rejected(fluid):
    m = build_structured_rect(2, 2, 1.0, 1.0)
    with pytest.raises(ValueError):
        StepProblem(m, fluid, State(np.ones(4), np.ones(4)), 0.1, boundary={"nope": Dirichlet(1e5)})
    with pytest.raises(ValueError):
        StepProblem(m, fluid, State(np.ones(4), np.ones(4)), 0.0)
    with pytest.raises(ValueError):
        Dirichlet(1e5, "x")


def test_non_finite_candidate_rejected(fluid):
    m = build_structured_rect(1, 1, 1.0, 1.0)
    st0 = State([P_ATM], [0.5])
    with pytest.raises(ValueError):
        assemble_residual(_problem(m, fluid, st0), State([np.nan], [0.5]))


# -- Jacobian -----------------------------------------------------------------

def _jvp_fd(prob, state, v, h):
    x = state.to_vector()
    rp = assemble_residual(prob, State.from_vector(x + h * v)).ravel()
    rm = assemble_residual(prob, State.from_vector(x - h * v)).ravel()
    return (rp - rm) / (2 * h)


def test_jacobian_matches_central_differences(rng):
    prob = fivespot_problem(dt=0.1)
    nc = prob.mesh.n_cells
    # smooth state well away from upwind switches: monotone pressure, interior saturations
    x, y = prob.mesh.centers.T
    state = State(3e5 - 1.5e5 * (x + y) / 2 + rng.uniform(-50, 50, nc), 0.2 + 0.6 * (1 - (x + y) / 2))
    prob = prob.advance(State(state.p_w - 100.0, state.s_w * 0.99))
    J = assemble_jacobian(prob, state)
    scale = np.empty(2 * nc)
    scale[0::2], scale[1::2] = 1e3, 1e-3
    for _ in range(5):
        v = rng.standard_normal(2 * nc) * scale
        fd = _jvp_fd(prob, state, v, 1e-3)
        an = J @ v
        assert np.linalg.norm(an - fd) <= 1e-6 * np.linalg.norm(fd)


def test_single_cell_jacobian_is_accumulation(fluid):
    m = build_structured_rect(1, 1, 2.0, 1.0, porosity=0.206)
    st0 = State([2e5], [0.3])
    prob = _problem(m, fluid, State([1.5e5], [0.4]), dt=0.5)
    J = assemble_jacobian(prob, st0).toarray()
    a = 2.0 * 0.206 / 0.5
    w, n = fluid.wetting, fluid.nonwetting
    pn = 2e5 + fluid.pc(0.3)
    drn = n.rho_ref * n.c_ref
    expect = np.array([
        [a * w.rho_ref * w.c_ref * 0.3, a * w.density(2e5)],
        [a * drn * 0.7, a * (drn * fluid.dpc(0.3) * 0.7 - n.density(pn))],
    ])
    np.testing.assert_allclose(J, expect, rtol=1e-12)


def test_assemble_consistent(fluid, rng):
    prob = fivespot_problem()
    st0 = State(prob.previous.p_w + rng.uniform(0, 1e4, prob.mesh.n_cells), prob.previous.s_w)
    R, J, fx = assemble(prob, st0)
    np.testing.assert_array_equal(R, assemble_residual(prob, st0))
    assert (J != assemble_jacobian(prob, st0)).nnz == 0
    assert fx.interior.shape == (prob.mesh.n_faces, 2)


def test_row_scale(fluid):
    m = build_structured_rect(2, 1, 1.0, 1.0, porosity=0.2)
    prob = _problem(m, fluid, State([1e5, 1e5], [1, 1]), dt=0.5)
    np.testing.assert_allclose(prob.row_scale, [80.0, 80.0, 80.0, 80.0])


# -- initial projection ----------------------------------------------------------

def test_project_initial():
    m = build_structured_rect(4, 2, 2.0, 1.0)
    st0 = project_initial(m, 1e5, 0.3)
    assert np.all(st0.p_w == 1e5) and np.all(st0.s_w == 0.3)
    st1 = project_initial(m, lambda xy: 1e5 + xy[:, 0], 0.5)
    np.testing.assert_allclose(st1.p_w, 1e5 + m.centers[:, 0])
    with pytest.raises(ValueError):
        project_initial(m, 1e5, 1.5)


def test_state_vector_roundtrip(rng):
    st0 = State(rng.random(5), rng.random(5), 2.0)
    back = State.from_vector(st0.to_vector(), 2.0)
    np.testing.assert_array_equal(back.p_w, st0.p_w)
    np.testing.assert_array_equal(back.s_w, st0.s_w)


def test_tagged_boundary_split_keeps_residual_conservative(fluid):
    m = tag_boundary_segment(build_structured_rect(3, 3, 1.0, 1.0, porosity=0.2, permeability=1e-11),
                             (0, 0), (0.5, 0), "in")
    st0 = State(np.full(9, P_ATM), np.full(9, 0.5))
    prob = _problem(m, fluid, st0, boundary={"in": Dirichlet(2 * P_ATM, "w", 1.0)})
    fx = face_fluxes(prob, st0)
    R = assemble_residual(prob, st0)
    np.testing.assert_allclose(R.sum(axis=0), fx.boundary.sum(axis=0), rtol=1e-12)
