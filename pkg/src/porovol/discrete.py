"""Discrete gradient, divergence and norms on admissible meshes.

A ``DiamondField`` is an array of shape ``(n_faces + n_boundary, 2)``: one
vector per interior diamond followed by one per boundary half-diamond.
Half-diamonds of impervious faces carry zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .mesh import Mesh


def _dirichlet_values(mesh: Mesh, dirichlet, dirichlet_tags=None):
    """Per-boundary-face (mask, values) for Dirichlet faces."""
    mask = np.zeros(mesh.n_boundary, dtype=bool)
    vals = np.zeros(mesh.n_boundary)
    if dirichlet is None and not dirichlet_tags:
        return mask, vals
    dirichlet = dict(dirichlet or {})
    tags = set(dirichlet_tags) if dirichlet_tags is not None else set(dirichlet)
    for tag in tags:
        sel = mesh.bnd_tag == tag
        v = dirichlet.get(tag)
        if v is None:
            raise ValueError(f"missing Dirichlet value for boundary tag {tag!r}")
        v = np.broadcast_to(np.asarray(v, float), (mesh.n_boundary,))[sel] if np.ndim(v) else v
        if np.any(~np.isfinite(v)):
            raise ValueError(f"missing Dirichlet value for boundary tag {tag!r}")
        mask |= sel
        vals[sel] = v
    return mask, vals


def diamond_measures(mesh: Mesh) -> np.ndarray:
    """|T| = |sigma| d / l for interior and boundary half-diamonds."""
    l = mesh.dim
    return np.concatenate([mesh.face_measure * mesh.face_dist, mesh.bnd_measure * mesh.bnd_dist]) / l


def discrete_gradient(mesh: Mesh, u, dirichlet: Mapping | None = None, dirichlet_tags=None) -> np.ndarray:
    u = np.asarray(u, float)
    l = mesh.dim
    k, lc = mesh.face_cells[:, 0], mesh.face_cells[:, 1]
    g_int = (l * (u[lc] - u[k]) / mesh.face_dist)[:, None] * mesh.face_normal
    mask, vals = _dirichlet_values(mesh, dirichlet, dirichlet_tags)
    jump = np.where(mask, vals - u[mesh.bnd_cell], 0.0)
    g_bnd = (l * jump / mesh.bnd_dist)[:, None] * mesh.bnd_normal
    return np.vstack([g_int, g_bnd])


def discrete_divergence(mesh: Mesh, F, dirichlet_tags=()) -> np.ndarray:
    """div_K F = (1/|K|) sum |sigma| F . eta_K over the faces of K.

    Boundary half-diamonds contribute only on faces whose tag is listed in
    ``dirichlet_tags``.
    """
    F = np.asarray(F, float)
    nf = mesh.n_faces
    flux = mesh.face_measure * np.einsum("ij,ij->i", F[:nf], mesh.face_normal)
    acc = np.zeros(mesh.n_cells)
    np.add.at(acc, mesh.face_cells[:, 0], flux)
    np.add.at(acc, mesh.face_cells[:, 1], -flux)
    mask = np.isin(mesh.bnd_tag, list(dirichlet_tags))
    bflux = mesh.bnd_measure * np.einsum("ij,ij->i", F[nf:], mesh.bnd_normal)
    np.add.at(acc, mesh.bnd_cell[mask], bflux[mask])
    return acc / mesh.volumes


def h_seminorm(mesh: Mesh, u, dirichlet: Mapping | None = None, dirichlet_tags=None) -> float:
    u = np.asarray(u, float)
    k, lc = mesh.face_cells[:, 0], mesh.face_cells[:, 1]
    s = np.sum(mesh.face_trans_geom * (u[lc] - u[k]) ** 2)
    mask, vals = _dirichlet_values(mesh, dirichlet, dirichlet_tags)
    s += np.sum(np.where(mask, mesh.bnd_trans_geom * (vals - u[mesh.bnd_cell]) ** 2, 0.0))
    return float(np.sqrt(mesh.dim * s))


def l2_norm(mesh: Mesh, u) -> float:
    u = np.asarray(u, float)
    return float(np.sqrt(np.sum(mesh.volumes * u * u)))


def gradient_l2_norm(mesh: Mesh, grad) -> float:
    grad = np.asarray(grad, float)
    return float(np.sqrt(np.sum(diamond_measures(mesh) * np.einsum("ij,ij->i", grad, grad))))


@dataclass
class PoincareReport:
    passed: bool
    max_ratio: float
    diameter: float
    trials: int
    skipped: int


def check_poincare(mesh: Mesh, trials: int = 100, dirichlet_tags=None, rng=None, fields=None) -> PoincareReport:
    """||u||_L2 <= diam(Omega) ||u||_H on random fields with zero Dirichlet data.

    ``dirichlet_tags`` defaults to every boundary tag.
    """
    rng = np.random.default_rng(rng)
    tags = list(mesh.tags) if dirichlet_tags is None else list(dirichlet_tags)
    if not np.isin(mesh.bnd_tag, tags).any():
        raise ValueError("Poincare check needs a nonempty Dirichlet boundary portion")
    zero = {t: 0.0 for t in tags}
    fields = [rng.standard_normal(mesh.n_cells) for _ in range(trials)] if fields is None else list(fields)
    worst, skipped = 0.0, 0
    for u in fields:
        hn = h_seminorm(mesh, u, zero)
        ln = l2_norm(mesh, u)
        if hn == 0.0:
            skipped += 1
            continue
        worst = max(worst, ln / hn)
    diam = mesh.diameter
    return PoincareReport(worst <= diam, worst, diam, len(fields), skipped)


@dataclass
class IntegrationByPartsReport:
    passed: bool
    max_rel_error: float
    trials: int


def _ibp_sides(mesh: Mesh, f_face, phi):
    """Both sides of sum_K sum_L F_KL phi_K = -1/2 sum_K sum_L F_KL (phi_L - phi_K).

    ``f_face`` holds F_{K/L} for each stored face orientation; F_{L/K} is its
    negation.
    """
    k, lc = mesh.face_cells[:, 0], mesh.face_cells[:, 1]
    per_cell = np.zeros(mesh.n_cells)
    np.add.at(per_cell, k, f_face)
    np.add.at(per_cell, lc, -f_face)
    lhs = float(np.dot(per_cell, phi))
    # each face appears twice in the double sum with identical contributions
    rhs = -0.5 * float(np.sum(f_face * (phi[lc] - phi[k]) + (-f_face) * (phi[k] - phi[lc])))
    return lhs, rhs


def check_integration_by_parts(mesh: Mesh, trials: int = 20, rng=None, tol: float = 1e-12) -> IntegrationByPartsReport:
    rng = np.random.default_rng(rng)
    worst = 0.0
    k, lc = mesh.face_cells[:, 0], mesh.face_cells[:, 1]
    for i in range(trials):
        phi = rng.standard_normal(mesh.n_cells)
        if i % 2:
            a = rng.random(mesh.n_faces)
            b = rng.standard_normal(mesh.n_cells)
            f = a * (b[lc] - b[k])
        else:
            f = rng.standard_normal(mesh.n_faces)
        lhs, rhs = _ibp_sides(mesh, f, phi)
        scale = max(np.sum(np.abs(f) * (np.abs(phi[k]) + np.abs(phi[lc]))), 1e-300)
        worst = max(worst, abs(lhs - rhs) / scale)
    return IntegrationByPartsReport(worst <= tol, worst, trials)
