import json

import numpy as np
import pytest

from porovol.cli import main
from porovol.config import AssumptionError, ConfigError, load_config, parse_config, shipped_configs
from porovol.mesh import build_structured_rect, write_mesh
from porovol.output import DIAGNOSTICS_HEADER, read_diagnostics, read_vtk_cell_data, snapshot_name, write_vtk
from porovol.runner import build_problem, execute_convergence, is_single_phase

from conftest import P_ATM

SMALL = ["--mesh.n=4"]


def test_shipped_configs_load():
    assert {"fivespot_capillary.cfg", "fivespot_nopc.cfg", "singlephase.cfg"} <= set(shipped_configs())
    cfg = load_config("fivespot_capillary")
    assert cfg.mesh.kind == "triangular" and cfg.mesh.n == 15
    assert cfg.dt == 0.1 and cfg.t_final == 60
    assert cfg.capillary.p_max == 1e5
    assert cfg.wetting.viscosity == 1e-3 and cfg.nonwetting.viscosity == 9e-5
    assert cfg.wetting.rho_ref == cfg.nonwetting.rho_ref == 400
    assert sorted(b.tag for b in cfg.boundaries) == ["injection", "outflow"]
    assert not load_config("fivespot_nopc").require_capillary


def test_overrides_apply():
    cfg = load_config("fivespot_capillary", {"mesh.n": "4", "time.dt": "0.05", "fluid.wetting.viscosity": "2e-3"})
    assert cfg.mesh.n == 4 and cfg.dt == 0.05 and cfg.wetting.viscosity == 2e-3


def test_initial_nonwetting_pressure_converted():
    cfg = load_config("fivespot_capillary", {"mesh.n": "2"})
    prob = build_problem(cfg)
    pn = prob.previous.p_w + prob.fluid.pc(prob.previous.s_w)
    np.testing.assert_allclose(pn, P_ATM)


def test_bad_configs():
    with pytest.raises(ConfigError):
        load_config("does_not_exist.cfg")
    with pytest.raises(ConfigError):
        parse_config("[mesh]\nkind = hex\n[fluid.wetting]\nviscosity=1\n[fluid.nonwetting]\nviscosity=1\n[time]\ndt=1\n")
    with pytest.raises(ConfigError):
        load_config("fivespot_capillary", {"time.dt": "abc"})
    with pytest.raises(ConfigError):
        load_config("fivespot_capillary", {"solver.max_iter": "2"})
    with pytest.raises(ConfigError):
        load_config("fivespot_capillary", {"wells.rate": "2"})
    with pytest.raises(AssumptionError):
        load_config("fivespot_capillary", {"sources.f_p": "-1"})


def test_single_phase_detection():
    assert is_single_phase(load_config("singlephase"))
    assert not is_single_phase(load_config("fivespot_nopc"))


def test_vtk_roundtrip(tmp_path):
    m = build_structured_rect(3, 2, 1.0, 1.0)
    s = np.linspace(0, 1, 6)
    path = write_vtk(tmp_path / snapshot_name(12), m, {"s_w": s, "p_w": 1e5 + s})
    assert path.name == "fields_000012.vtk"
    text = path.read_text()
    assert text.startswith("# vtk DataFile Version 3.0")
    assert "CELL_TYPES 6" in text
    back = read_vtk_cell_data(path)
    np.testing.assert_array_equal(back["s_w"], s)
    with pytest.raises(ValueError):
        write_vtk(tmp_path / "bad.vtk", m, {"s_w": s[:3]})


def test_cli_missing_config_exit_2(capsys):
    assert main(["run", "nope.cfg"]) == 2
    assert main(["verify", "fivespot_capillary", "--time.dt=abc"]) == 2
    assert main(["run", "fivespot_capillary", "stray"]) == 2


def test_cli_mesh_check(tmp_path, capsys):
    good = tmp_path / "good.fvm"
    write_mesh(build_structured_rect(4, 4, 1.0, 1.0), good)
    assert main(["mesh-check", str(good)]) == 0
    assert "cells: 16" in capsys.readouterr().out
    skew = tmp_path / "skew.fvm"
    skew.write_text("fvmesh 1\nvertices 6\n0 0\n1 0\n2 0\n2 1\n1 1\n0 1\n"
                    "cells 2\n0 1 4 5 center 0.5 0.6\n1 2 3 4 center 1.5 0.5\n")
    assert main(["mesh-check", str(skew)]) == 4
    assert main(["mesh-check", str(tmp_path / "missing.fvm")]) == 2
    broken = tmp_path / "broken.fvm"
    broken.write_text("fvmesh 1\nvertices two\n")
    assert main(["mesh-check", str(broken)]) == 2


def test_cli_verify_small(capsys):
    assert main(["verify", "fivespot_capillary", *SMALL, "--verify.t_final=0.2"]) == 0
    out = capsys.readouterr().out
    assert "[FAIL]" not in out and "maximum principle" in out


def test_cli_verify_rejects_hypotheses(capsys):
    code = main(["verify", "fivespot_capillary", *SMALL, "--capillary.p_max=0",
                 "--fluid.wetting.kr_exponent=1", "--fluid.nonwetting.kr_exponent=1"])
    assert code == 4
    assert "assumption violated" in capsys.readouterr().err
    assert main(["verify", "fivespot_capillary", *SMALL, "--sources.f_i=-1"]) == 4


def test_cli_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", "fivespot_capillary", "--quiet", *SMALL, "--time.t_final=0.3",
                 "--output.snapshots=0,0.1,0.3", f"--output.directory={out}"])
    assert code == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["diagnostics.csv", "fields_000000.vtk", "fields_000001.vtk", "fields_000003.vtk",
                     "report.json"]
    rows = read_diagnostics(out / "diagnostics.csv")
    assert tuple(rows[0]) == DIAGNOSTICS_HEADER
    assert [r["step"] for r in rows] == [1, 2, 3]
    assert rows[-1]["t"] == pytest.approx(0.3)
    fields = read_vtk_cell_data(out / "fields_000003.vtk")
    assert set(fields) == {"s_w", "p_w", "p_n", "p_global"}
    assert fields["s_w"].shape == (64,)
    report = json.loads((out / "report.json").read_text())
    assert report["passed"] and report["steps"] == 3


def test_cli_run_solver_failure_exit_3(tmp_path, capsys):
    code = main(["run", "fivespot_capillary", "--quiet", *SMALL, "--time.dt=1", "--time.t_final=1",
                 "--solver.newton_max_iter=2", "--solver.dt_retries=0", f"--output.directory={tmp_path}"])
    assert code == 3
    assert not json.loads((tmp_path / "report.json").read_text())["passed"]


def test_cli_convergence_levels(tmp_path, capsys):
    assert main(["convergence", "singlephase", "--levels=1"]) == 2
    csv_path = tmp_path / "table.csv"
    code = main(["convergence", "singlephase", "--mesh.n=4", "--convergence.base=4", "--convergence.levels=2",
                 "--convergence.t_final=0.2", f"--csv={csv_path}"])
    assert code == 0
    assert csv_path.read_text().splitlines()[0] == "coarse,fine,l1_s,l1_p"


def test_single_phase_oracle_agreement():
    cfg = load_config("singlephase", {"convergence.base": "4", "convergence.t_final": "0.2"})
    out = execute_convergence(cfg, 2)
    assert out.levels == [4, 8]
    assert all(e <= 1e-8 for e in out.oracle_errors)
    assert out.passed
