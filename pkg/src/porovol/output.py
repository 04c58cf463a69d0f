"""Field snapshots (legacy ASCII VTK) and the diagnostics CSV."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping

import numpy as np

from .mesh import Mesh

VTK_POLYGON = 7
DIAGNOSTICS_HEADER = ("step", "t", "sw_min", "sw_max", "mass_w", "mass_n", "E_w", "E_n", "E_global", "E_B",
                      "C_obs", "newton_iters", "linear_iters")


def snapshot_name(step: int, prefix: str = "fields", width: int = 6) -> str:
    return f"{prefix}_{step:0{width}d}.vtk"


def write_vtk(path, mesh: Mesh, cell_data: Mapping[str, np.ndarray], title: str = "porovol fields") -> Path:
    path = Path(path)
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(mesh.vertices)} double"]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.vertices]
    size = sum(len(c) + 1 for c in mesh.cells)
    lines.append(f"CELLS {mesh.n_cells} {size}")
    lines += [" ".join(map(str, (len(c),) + tuple(c))) for c in mesh.cells]
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines += [str(VTK_POLYGON)] * mesh.n_cells
    lines.append(f"CELL_DATA {mesh.n_cells}")
    for name, values in cell_data.items():
        values = np.asarray(values, float)
        if values.shape != (mesh.n_cells,):
            raise ValueError(f"field {name!r} has shape {values.shape}, expected ({mesh.n_cells},)")
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [f"{v:.17g}" for v in values]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_vtk_cell_data(path) -> dict[str, np.ndarray]:
    """Cell scalars of a file written by :func:`write_vtk`."""
    tokens = Path(path).read_text().split("\n")
    out, i = {}, 0
    while i < len(tokens) and not tokens[i].startswith("CELL_DATA"):
        i += 1
    if i == len(tokens):
        return out
    n = int(tokens[i].split()[1])
    i += 1
    while i < len(tokens):
        if tokens[i].startswith("SCALARS"):
            name = tokens[i].split()[1]
            out[name] = np.array([float(v) for v in tokens[i + 2:i + 2 + n]])
            i += 2 + n
        else:
            i += 1
    return out


class DiagnosticsWriter:
    """Appends one CSV row per accepted step; flushes every row."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = self.path.open("w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(DIAGNOSTICS_HEADER)
        self._fh.flush()

    def __call__(self, record):
        self._w.writerow([_fmt(v) for v in record.row()])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_diagnostics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
