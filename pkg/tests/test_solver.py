import numpy as np
import pytest
from scipy.optimize import brentq

from porovol.mesh import build_structured_rect
from porovol.scheme import SourceSpec, State, StepProblem, assemble_residual
from porovol.solver import (ConvergenceError, LinearConfig, NewtonConfig, TransientFailure, run_transient,
                            scaled_norm, solve_step, step_count)

from conftest import P_ATM, fivespot_problem, make_fluid


def test_equilibrium_needs_no_iteration(fluid):
    m = build_structured_rect(3, 3, 1.0, 1.0, porosity=0.206, permeability=1.5e-11)
    st0 = State(np.full(9, 2e5), np.full(9, 0.5))
    new, rep = solve_step(StepProblem(m, fluid, st0, 0.1))
    assert rep.newton_iters == 0
    np.testing.assert_array_equal(new.p_w, st0.p_w)
    assert new.t == pytest.approx(0.1)


def test_single_cell_drawdown_matches_scalar_root(fluid):
    # impervious cell with production: per phase rho(p) s (phi/dt + f_p) = phi rho(p0) s0 / dt
    phi, dt, fp = 0.206, 0.1, 0.5
    m = build_structured_rect(1, 1, 1.0, 1.0, porosity=phi, permeability=1.5e-11)
    p0, s0 = 5e5, 0.6
    src = SourceSpec(np.array([fp]), np.array([0.0]), np.array([0.0]))
    new, rep = solve_step(StepProblem(m, fluid, State([p0], [s0]), dt, sources=src), NewtonConfig(tol=1e-13))

    rho = lambda p: 400.0 * (1 + 1e-6 * (p - P_ATM))
    rho_inv = lambda r: P_ATM + (r / 400.0 - 1) / 1e-6
    pc = lambda s: 1e5 * (1 - s)
    shrink = (phi / dt) / (phi / dt + fp)
    a_w = rho(p0) * s0 * shrink
    a_n = rho(p0 + pc(s0)) * (1 - s0) * shrink

    def mismatch(s):
        pw = rho_inv(a_w / s)
        return rho(pw + pc(s)) * (1 - s) - a_n

    s_ref = brentq(mismatch, 0.05, 0.95, xtol=1e-15)
    p_ref = rho_inv(a_w / s_ref)
    assert new.s_w[0] == pytest.approx(s_ref, rel=1e-11)
    assert new.p_w[0] == pytest.approx(p_ref, rel=1e-11)
    assert rep.residual_norm <= 1e-13


def test_newton_converges_quadratically():
    new, rep = solve_step(fivespot_problem(dt=0.1))
    h = rep.residual_history
    assert h[-1] <= 1e-8
    assert 3 <= rep.newton_iters <= 8
    # asymptotic regime: r_{k+1} <= C r_k^2 with C of order one
    assert h[-1] <= h[-2] ** 2 and h[-2] <= h[-3] ** 2


def test_reported_norm_matches_reevaluation():
    prob = fivespot_problem(dt=0.1)
    new, rep = solve_step(prob)
    again = scaled_norm(prob, assemble_residual(prob, new))
    assert again == pytest.approx(rep.residual_norm, rel=1e-12)
    assert again <= 1e-8


def test_dt_halving_keeps_time_and_matches_substeps():
    prob = fivespot_problem(dt=0.2)
    new, rep = solve_step(prob, NewtonConfig(max_iter=5))
    assert rep.dt_retries == 1 and rep.substeps == [0.1, 0.1]
    assert new.t == pytest.approx(0.2)
    mid, _ = solve_step(prob.advance(prob.previous, 0.1))
    end, _ = solve_step(prob.advance(mid, 0.1))
    np.testing.assert_allclose(new.p_w, end.p_w, rtol=1e-10)
    np.testing.assert_allclose(new.s_w, end.s_w, rtol=1e-10, atol=1e-12)


def test_exhausted_retries_raise():
    prob = fivespot_problem(dt=1.0)
    with pytest.raises(ConvergenceError):
        solve_step(prob, NewtonConfig(max_iter=3, max_retries=1))
    with pytest.raises(TransientFailure) as err:
        run_transient(prob, 2.0, newton=NewtonConfig(max_iter=3, max_retries=1))
    assert err.value.step == 1 and err.value.state.t == 0.0


def test_direct_fallback_is_counted():
    prob = fivespot_problem(dt=0.1)
    new, rep = solve_step(prob, lin=LinearConfig(preconditioner="none", max_iter=1))
    ref, _ = solve_step(prob)
    assert rep.direct_solves == rep.newton_iters > 0
    np.testing.assert_allclose(new.s_w, ref.s_w, atol=1e-9)
    with pytest.raises(ConvergenceError):
        solve_step(prob, NewtonConfig(max_retries=0),
                   LinearConfig(preconditioner="none", max_iter=1, direct_fallback=False))


def test_zero_final_time_returns_initial_state():
    prob = fivespot_problem()
    final, rep = run_transient(prob, 0.0, outputs=[0.0])
    assert rep.n_steps == 0 and rep.steps == []
    np.testing.assert_array_equal(final.s_w, prob.previous.s_w)
    assert 0 in rep.snapshots


def test_final_time_must_be_multiple_of_dt():
    with pytest.raises(ValueError):
        step_count(1.05, 0.1)
    assert step_count(60.0, 0.1) == 600
    with pytest.raises(ValueError):
        run_transient(fivespot_problem(), 0.3, outputs=[0.5])


def test_composition_and_determinism():
    prob = fivespot_problem(dt=0.1)
    a, rep = run_transient(prob, 0.3, outputs=[0.1, 0.3])
    b, _ = run_transient(prob, 0.3)
    np.testing.assert_array_equal(a.p_w, b.p_w)
    np.testing.assert_array_equal(a.s_w, b.s_w)
    first, _ = run_transient(prob, 0.1)
    rest, _ = run_transient(prob.advance(first), 0.2)
    np.testing.assert_array_equal(rest.s_w, a.s_w)
    assert rest.t == pytest.approx(0.3) and a.t == pytest.approx(0.3)
    assert sorted(rep.snapshots) == [1, 3]


def test_callback_sees_every_step():
    seen = []
    run_transient(fivespot_problem(), 0.3, callback=lambda k, p, old, new, r: seen.append((k, old.t, new.t)))
    assert [s[0] for s in seen] == [1, 2, 3]
    assert seen[-1][2] == pytest.approx(0.3)


def test_rect16_fivespot_step_converges():
    m = build_structured_rect(16, 16, 1.0, 1.0, porosity=0.206, permeability=1.5e-11)
    prob = fivespot_problem(mesh=m, dt=0.1)
    new, rep = solve_step(prob)
    assert rep.residual_norm <= 1e-8 and rep.dt_retries == 0
    assert new.s_w.min() >= -1e-10 and new.s_w.max() <= 1 + 1e-10


def test_config_validation():
    with pytest.raises(ValueError):
        NewtonConfig(tol=0.0)
    with pytest.raises(ValueError):
        NewtonConfig(backtrack=1.0)
    with pytest.raises(ValueError):
        LinearConfig(preconditioner="amg")


def test_nonfinite_previous_state_rejected():
    fl = make_fluid()
    m = build_structured_rect(1, 1, 1.0, 1.0)
    with pytest.raises(ValueError):
        solve_step(StepProblem(m, fl, State([np.inf], [0.5]), 0.1))
