import sys

import numpy as np
import pytest

from porovol.fluid import CapillaryModel, FluidModel, PhaseParams
from porovol.mesh import build_structured_rect, build_structured_triangular, tag_boundary_segment
from porovol.scheme import Dirichlet, State, StepProblem

P_ATM = 1.013e5
P_INJ = 4.026e5
INJECTION = [((0.0, 0.0), (0.1, 0.0)), ((0.0, 0.0), (0.0, 0.1))]
OUTFLOW = [((0.9, 1.0), (1.0, 1.0)), ((1.0, 0.9), (1.0, 1.0))]


def make_phase(viscosity, **kw):
    base = dict(rho_ref=400.0, c_ref=1e-6, p_ref=P_ATM)
    base.update(kw)
    return PhaseParams(viscosity=viscosity, **base)


def make_fluid(p_max=1e5, **kw):
    cap = CapillaryModel("linear", p_max=p_max) if p_max > 0 else CapillaryModel("none")
    return FluidModel(make_phase(1e-3, **kw), make_phase(9e-5, **kw), cap)


def tag_fivespot(mesh):
    for a, b in INJECTION:
        mesh = tag_boundary_segment(mesh, a, b, "injection")
    for a, b in OUTFLOW:
        mesh = tag_boundary_segment(mesh, a, b, "outflow")
    return mesh


def fivespot_problem(mesh=None, fluid=None, dt=0.1):
    fluid = fluid or make_fluid()
    if mesh is None:
        mesh = build_structured_triangular(6, 1.0, 1.0, porosity=0.206, permeability=1.5e-11)
    mesh = tag_fivespot(mesh)
    s0 = 0.1
    state = State(np.full(mesh.n_cells, P_ATM - float(fluid.pc(s0))), np.full(mesh.n_cells, s0))
    bc = {"injection": Dirichlet(P_INJ, "w", 1.0), "outflow": Dirichlet(P_ATM, "n", None)}
    return StepProblem(mesh, fluid, state, dt, boundary=bc)


@pytest.fixture(scope="session")
def fluid():
    return make_fluid()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def two_cell_mesh():
    return build_structured_rect(2, 1, 1.0, 1.0, porosity=0.206)


def pytest_terminal_summary(terminalreporter):
    for name, mod in list(sys.modules.items()):
        if name.split(".")[-1] == "test_acceptance" and getattr(mod, "RESULTS", None):
            terminalreporter.section("acceptance criteria")
            for key in sorted(mod.RESULTS):
                terminalreporter.write_line(mod.RESULTS[key])
