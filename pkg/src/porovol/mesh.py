"""Admissible orthogonal polygonal meshes for two-point flux finite volumes.

A mesh stores, besides the cell polygons, every geometric quantity the
scheme consumes: cell centers and measures, interior faces with their
center-to-center distance and transmissivity, and boundary faces with the
distance from the cell center to the face's supporting line.  Boundary
faces carry a tag; the physical condition attached to a tag lives with the
problem definition, not with the mesh.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

IMPERVIOUS = "impervious"


class MeshError(ValueError):
    """Raised for malformed mesh input or geometry that cannot be admissible."""


class MeshParseError(MeshError):
    pass


class AdmissibilityError(MeshError):
    def __init__(self, message: str, report: "AdmissibilityReport"):
        super().__init__(message)
        self.report = report


def polygon_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_centroid(pts: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * cross.sum()
    cx = ((x + xn) * cross).sum() / (6 * a)
    cy = ((y + yn) * cross).sum() / (6 * a)
    return np.array([cx, cy])


def circumcenter(a, b, c) -> np.ndarray | None:
    ax, ay = a
    bx, by = b
    cx, cy = c
    dd = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(dd) < 1e-300:
        return None
    a2, b2, c2 = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / dd
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / dd
    return np.array([ux, uy])


def _strictly_inside(pts: np.ndarray, x: np.ndarray, rel_tol: float = 1e-12) -> bool:
    """Point strictly inside a counterclockwise convex polygon."""
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]))
    for i in range(len(pts)):
        a, b = pts[i], pts[(i + 1) % len(pts)]
        e = b - a
        # left-of-edge test for ccw orientation
        if e[0] * (x[1] - a[1]) - e[1] * (x[0] - a[0]) <= rel_tol * scale * np.hypot(*e):
            return False
    return True


def _is_convex(pts: np.ndarray) -> bool:
    n = len(pts)
    for i in range(n):
        a, b, c = pts[i], pts[(i + 1) % n], pts[(i + 2) % n]
        cr = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cr < -1e-14 * np.hypot(*(b - a)) * np.hypot(*(c - b)):
            return False
    return True


def default_center(pts: np.ndarray) -> np.ndarray:
    """Center rule for cells given without an explicit center.

    The circumcenter is used when the polygon is cyclic and the circumcenter
    lies strictly inside it (this makes center lines orthogonal to shared
    edges on Delaunay-type meshes); otherwise the centroid.
    """
    cc = circumcenter(pts[0], pts[1], pts[2])
    if cc is not None:
        r = np.hypot(*(pts - cc).T)
        if np.ptp(r) <= 1e-10 * r.max() and _strictly_inside(pts, cc):
            return cc
    return polygon_centroid(pts)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable admissible mesh.

    Interior faces are stored once, oriented from ``face_cells[:, 0]`` (K) to
    ``face_cells[:, 1]`` (L); ``face_normal`` is the unit normal outward from K.
    Boundary faces are stored separately with the outward unit normal.
    """

    vertices: np.ndarray
    cells: tuple[tuple[int, ...], ...]
    centers: np.ndarray
    volumes: np.ndarray
    porosity: np.ndarray
    permeability: np.ndarray
    face_cells: np.ndarray
    face_points: np.ndarray
    face_measure: np.ndarray
    face_dist: np.ndarray
    face_normal: np.ndarray
    bnd_cell: np.ndarray
    bnd_points: np.ndarray
    bnd_measure: np.ndarray
    bnd_dist: np.ndarray
    bnd_normal: np.ndarray
    bnd_tag: np.ndarray
    dim: int = 2
    notes: tuple[str, ...] = field(default=())

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_faces(self) -> int:
        return len(self.face_cells)

    @property
    def n_boundary(self) -> int:
        return len(self.bnd_cell)

    @cached_property
    def face_trans_geom(self) -> np.ndarray:
        """Geometric transmissivity |sigma|/d of interior faces."""
        return self.face_measure / self.face_dist

    @cached_property
    def bnd_trans_geom(self) -> np.ndarray:
        return self.bnd_measure / self.bnd_dist

    @cached_property
    def face_perm(self) -> np.ndarray:
        """Harmonic face permeability of the two adjacent cells."""
        k = self.permeability
        kk, kl = k[self.face_cells[:, 0]], k[self.face_cells[:, 1]]
        return 2.0 * kk * kl / (kk + kl)

    @cached_property
    def face_trans(self) -> np.ndarray:
        return self.face_perm * self.face_trans_geom

    @cached_property
    def bnd_trans(self) -> np.ndarray:
        return self.permeability[self.bnd_cell] * self.bnd_trans_geom

    @cached_property
    def face_midpoints(self) -> np.ndarray:
        return self.face_points.mean(axis=1)

    @cached_property
    def bnd_midpoints(self) -> np.ndarray:
        return self.bnd_points.mean(axis=1)

    @cached_property
    def domain_measure(self) -> float:
        return float(self.volumes.sum())

    @cached_property
    def diameter(self) -> float:
        pts = self.bnd_points.reshape(-1, 2)
        if len(pts) == 0:
            pts = self.vertices
        from scipy.spatial import ConvexHull
        from scipy.spatial.distance import pdist

        try:
            hull = pts[ConvexHull(pts).vertices]
        except Exception:
            hull = pts
        return float(pdist(hull).max())

    @cached_property
    def size(self) -> float:
        """Maximum cell diameter."""
        from scipy.spatial.distance import pdist

        return float(max(pdist(self.vertices[list(c)]).max() for c in self.cells))

    @cached_property
    def regularity(self) -> np.ndarray:
        """Per-cell ratio sum_{L in N(K)} |sigma| d / |K|."""
        acc = np.zeros(self.n_cells)
        w = self.face_measure * self.face_dist
        np.add.at(acc, self.face_cells[:, 0], w)
        np.add.at(acc, self.face_cells[:, 1], w)
        return acc / self.volumes

    @property
    def xi(self) -> float:
        return float(self.regularity.max()) if self.n_cells else 0.0

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        nb: list[list[int]] = [[] for _ in range(self.n_cells)]
        for k, l in self.face_cells:
            nb[k].append(int(l))
            nb[l].append(int(k))
        return tuple(tuple(x) for x in nb)

    @cached_property
    def tags(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.bnd_tag.tolist())))

    def boundary_mask(self, tag: str) -> np.ndarray:
        return self.bnd_tag == tag

    def cell_polygon(self, k: int) -> np.ndarray:
        return self.vertices[list(self.cells[k])]

    def with_properties(self, porosity=None, permeability=None) -> "Mesh":
        kw = {}
        if porosity is not None:
            kw["porosity"] = np.broadcast_to(np.asarray(porosity, float), (self.n_cells,)).copy()
        if permeability is not None:
            kw["permeability"] = np.broadcast_to(np.asarray(permeability, float), (self.n_cells,)).copy()
        return replace(self, **kw)


def from_polygons(
    vertices,
    cells,
    centers=None,
    porosity=1.0,
    permeability=1.0,
    tagged_segments=(),
    notes=(),
) -> Mesh:
    """Build a mesh from polygon cells (vertex index lists).

    Cells may be given in either orientation; they are stored
    counterclockwise.  ``centers`` entries may be ``None`` to use the
    default center rule.  ``tagged_segments`` is a sequence of
    ``(p0, p1, tag)`` boundary segments; untagged boundary is impervious.
    """
    verts = np.asarray(vertices, dtype=float)
    if verts.ndim != 2 or verts.shape[1] != 2:
        raise MeshError("vertices must be an (N, 2) array")
    if not np.all(np.isfinite(verts)):
        raise MeshError("non-finite vertex coordinates")
    if len(cells) == 0:
        raise MeshError("mesh has no cells")
    nc = len(cells)
    cells_ccw = []
    vols = np.empty(nc)
    ctr = np.empty((nc, 2))
    for k, c in enumerate(cells):
        c = [int(v) for v in c]
        if len(c) < 3 or min(c) < 0 or max(c) >= len(verts):
            raise MeshError(f"cell {k} has invalid vertex list {c}")
        pts = verts[c]
        a = polygon_area(pts)
        if a < 0:
            c = c[::-1]
            pts = pts[::-1]
            a = -a
        if a <= 0:
            raise MeshError(f"cell {k} has zero measure")
        cells_ccw.append(tuple(c))
        vols[k] = a
        given = None if centers is None else centers[k]
        ctr[k] = default_center(pts) if given is None else np.asarray(given, float)

    edge_owner: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
    for k, c in enumerate(cells_ccw):
        for i in range(len(c)):
            a, b = c[i], c[(i + 1) % len(c)]
            edge_owner.setdefault((min(a, b), max(a, b)), []).append((k, a, b))

    f_cells, f_pts, b_cell, b_pts = [], [], [], []
    for key, owners in edge_owner.items():
        if len(owners) == 2:
            (k, a, b), (l, _, _) = owners
            f_cells.append((k, l))
            f_pts.append((verts[a], verts[b]))
        elif len(owners) == 1:
            k, a, b = owners[0]
            b_cell.append(k)
            b_pts.append((verts[a], verts[b]))
        else:
            raise MeshError(f"edge {key} shared by {len(owners)} cells (non-manifold)")

    f_cells = np.array(f_cells, dtype=np.int64).reshape(-1, 2)
    f_pts = np.array(f_pts, dtype=float).reshape(-1, 2, 2)
    b_cell = np.array(b_cell, dtype=np.int64)
    b_pts = np.array(b_pts, dtype=float).reshape(-1, 2, 2)

    mesh = _assemble(
        verts, tuple(cells_ccw), ctr, vols, f_cells, f_pts, b_cell, b_pts,
        np.array([IMPERVIOUS] * len(b_cell), dtype=object), porosity, permeability, tuple(notes),
    )
    for p0, p1, tag in tagged_segments:
        mesh = tag_boundary_segment(mesh, p0, p1, tag)
    return mesh


def _assemble(verts, cells, ctr, vols, f_cells, f_pts, b_cell, b_pts, b_tag, porosity, permeability, notes):
    nc = len(cells)
    # interior faces: ccw edge a->b of K gives outward normal (dy, -dx)
    e = f_pts[:, 1] - f_pts[:, 0]
    meas = np.hypot(e[:, 0], e[:, 1])
    normal = np.column_stack([e[:, 1], -e[:, 0]]) / meas[:, None]
    dist = np.hypot(*(ctr[f_cells[:, 1]] - ctr[f_cells[:, 0]]).T)
    if np.any(dist <= 0):
        raise MeshError("coincident centers across an interior face")

    eb = b_pts[:, 1] - b_pts[:, 0]
    bmeas = np.hypot(eb[:, 0], eb[:, 1])
    bnormal = np.column_stack([eb[:, 1], -eb[:, 0]]) / bmeas[:, None]
    bdist = np.abs(np.einsum("ij,ij->i", b_pts[:, 0] - ctr[b_cell], bnormal))
    if np.any(bdist <= 0):
        raise MeshError("cell center lies on a boundary face")

    phi = np.broadcast_to(np.asarray(porosity, float), (nc,)).copy()
    perm = np.broadcast_to(np.asarray(permeability, float), (nc,)).copy()
    if np.any(phi <= 0) or np.any(phi > 1):
        raise MeshError("porosity must lie in (0, 1]")
    if np.any(perm <= 0):
        raise MeshError("permeability must be positive")
    return Mesh(
        vertices=verts, cells=cells, centers=ctr, volumes=vols, porosity=phi,
        permeability=perm, face_cells=f_cells, face_points=f_pts, face_measure=meas,
        face_dist=dist, face_normal=normal, bnd_cell=b_cell, bnd_points=b_pts,
        bnd_measure=bmeas, bnd_dist=bdist, bnd_normal=bnormal, bnd_tag=b_tag, notes=notes,
    )


def tag_boundary_segment(mesh: Mesh, p0, p1, tag: str, tol: float = 1e-10) -> Mesh:
    """Tag the part of the boundary lying on segment [p0, p1].

    Boundary faces that only partially overlap the segment are split at the
    segment endpoints; both pieces keep the owning cell, normal and center
    distance, so the split does not change the geometry seen by the scheme.
    """
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    seg = p1 - p0
    L = float(np.hypot(*seg))
    if L <= 0:
        raise MeshError("degenerate boundary segment")
    u = seg / L
    scale = max(mesh.diameter, L)

    cells, pts, tags = [], [], []
    for i in range(mesh.n_boundary):
        a, b = mesh.bnd_points[i]
        # distance of the face endpoints to the segment's supporting line
        da = abs(u[0] * (a[1] - p0[1]) - u[1] * (a[0] - p0[0]))
        db = abs(u[0] * (b[1] - p0[1]) - u[1] * (b[0] - p0[0]))
        if da > tol * scale or db > tol * scale:
            cells.append(mesh.bnd_cell[i]); pts.append((a, b)); tags.append(mesh.bnd_tag[i])
            continue
        ta, tb = float(np.dot(a - p0, u)), float(np.dot(b - p0, u))
        lo, hi = max(min(ta, tb), 0.0), min(max(ta, tb), L)
        if hi - lo <= tol * scale:
            cells.append(mesh.bnd_cell[i]); pts.append((a, b)); tags.append(mesh.bnd_tag[i])
            continue
        # split the face [ta, tb] at the overlap bounds, keeping its a->b orientation
        cuts = sorted({ta, tb, lo, hi})
        cuts = [c for c in cuts if min(ta, tb) - 1e-15 <= c <= max(ta, tb) + 1e-15]
        if ta > tb:
            cuts = cuts[::-1]
        for c0, c1 in zip(cuts[:-1], cuts[1:]):
            if abs(c1 - c0) <= tol * scale:
                continue
            q0 = a + (b - a) * ((c0 - ta) / (tb - ta))
            q1 = a + (b - a) * ((c1 - ta) / (tb - ta))
            mid = 0.5 * (c0 + c1)
            inside = lo - 1e-15 <= mid <= hi + 1e-15
            cells.append(mesh.bnd_cell[i]); pts.append((q0, q1))
            tags.append(tag if inside else mesh.bnd_tag[i])

    b_cell = np.array(cells, dtype=np.int64)
    b_pts = np.array(pts, dtype=float).reshape(-1, 2, 2)
    eb = b_pts[:, 1] - b_pts[:, 0]
    bmeas = np.hypot(eb[:, 0], eb[:, 1])
    bnormal = np.column_stack([eb[:, 1], -eb[:, 0]]) / bmeas[:, None]
    bdist = np.abs(np.einsum("ij,ij->i", b_pts[:, 0] - mesh.centers[b_cell], bnormal))
    return replace(
        mesh, bnd_cell=b_cell, bnd_points=b_pts, bnd_measure=bmeas, bnd_normal=bnormal,
        bnd_dist=bdist, bnd_tag=np.array(tags, dtype=object),
    )


def build_structured_rect(nx: int, ny: int, lx: float, ly: float, porosity=1.0, permeability=1.0) -> Mesh:
    """Uniform nx-by-ny rectangle grid with centers at the centroids."""
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be >= 1")
    if lx <= 0 or ly <= 0:
        raise MeshError("domain lengths must be positive")
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    cells = [(vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)) for j in range(ny) for i in range(nx)]
    centers = [((xs[i] + xs[i + 1]) / 2, (ys[j] + ys[j + 1]) / 2) for j in range(ny) for i in range(nx)]
    return from_polygons(verts, cells, centers, porosity, permeability)


def build_structured_triangular(n: int, lx: float, ly: float, porosity=1.0, permeability=1.0) -> Mesh:
    """Each of n-by-n grid rectangles split into four triangles by its diagonals.

    Circumcenters of these right triangles sit on the rectangle edges and
    coincide across neighbouring rectangles, so they cannot serve as
    centers.  Instead each triangle's center is placed on its symmetry axis
    at the offset that makes every center line orthogonal to the shared
    edge; for square rectangles this is exactly the centroid.
    """
    if n < 1:
        raise MeshError("n must be >= 1")
    if lx <= 0 or ly <= 0:
        raise MeshError("domain lengths must be positive")
    w, h = lx / n, ly / n
    t = min(w / h, h / w) / 3.0
    r = w / 2 - t * h  # offset of left/right triangle centers from their base
    b = h / 2 - t * w  # offset of bottom/top triangle centers from their base
    if r <= 0 or b <= 0:
        raise MeshError("degenerate triangle center placement")

    xs = np.linspace(0.0, lx, n + 1)
    ys = np.linspace(0.0, ly, n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    corner = np.column_stack([X.ravel(), Y.ravel()])
    cx, cy = np.meshgrid((xs[:-1] + xs[1:]) / 2, (ys[:-1] + ys[1:]) / 2, indexing="xy")
    mids = np.column_stack([cx.ravel(), cy.ravel()])
    verts = np.vstack([corner, mids])
    off = len(corner)

    def vid(i, j):
        return j * (n + 1) + i

    cells, centers = [], []
    for j in range(n):
        for i in range(n):
            c = off + j * n + i
            x0, x1, y0, y1 = xs[i], xs[i + 1], ys[j], ys[j + 1]
            xm, ym = (x0 + x1) / 2, (y0 + y1) / 2
            cells += [
                (vid(i, j), vid(i + 1, j), c),
                (vid(i + 1, j), vid(i + 1, j + 1), c),
                (vid(i + 1, j + 1), vid(i, j + 1), c),
                (vid(i, j + 1), vid(i, j), c),
            ]
            centers += [(xm, y0 + b), (x1 - r, ym), (xm, y1 - b), (x0 + r, ym)]
    return from_polygons(verts, cells, centers, porosity, permeability)


@dataclass
class AdmissibilityReport:
    passed: bool
    max_deviation: float
    worst_face: int
    deviations: np.ndarray
    centers_inside: np.ndarray
    convex: np.ndarray
    xi: float
    angle_tol: float

    def summary(self) -> str:
        lines = [
            f"cells: {len(self.centers_inside)}  interior faces: {len(self.deviations)}",
            f"max orthogonality deviation: {self.max_deviation:.3e} rad (tol {self.angle_tol:.1e})",
            f"centers strictly inside: {int(self.centers_inside.sum())}/{len(self.centers_inside)}",
            f"convex cells: {int(self.convex.sum())}/{len(self.convex)}",
            f"regularity xi: {self.xi:.6g}",
        ]
        if self.worst_face >= 0 and self.max_deviation > self.angle_tol:
            lines.append(f"worst face: {self.worst_face}")
        bad = np.flatnonzero(~self.centers_inside)
        if len(bad):
            lines.append(f"cells with center outside: {bad[:10].tolist()}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def validate_admissibility(mesh: Mesh, angle_tol: float = 1e-8) -> AdmissibilityReport:
    """Orthogonality of center lines, strict center inclusion and convexity."""
    if mesh.n_faces:
        dx = mesh.centers[mesh.face_cells[:, 1]] - mesh.centers[mesh.face_cells[:, 0]]
        n = mesh.face_normal
        cross = np.abs(dx[:, 0] * n[:, 1] - dx[:, 1] * n[:, 0])
        dot = np.einsum("ij,ij->i", dx, n)
        dev = np.arctan2(cross, dot)
        worst = int(np.argmax(dev))
        maxdev = float(dev[worst])
    else:
        dev = np.zeros(0)
        worst, maxdev = -1, 0.0
    inside = np.array([_strictly_inside(mesh.cell_polygon(k), mesh.centers[k]) for k in range(mesh.n_cells)])
    convex = np.array([_is_convex(mesh.cell_polygon(k)) for k in range(mesh.n_cells)])
    ok = maxdev <= angle_tol and bool(inside.all()) and bool(convex.all())
    return AdmissibilityReport(ok, maxdev, worst, dev, inside, convex, mesh.xi, angle_tol)


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def load_mesh(path, porosity=1.0, permeability=1.0, angle_tol: float = 1e-8, validate: bool = True) -> Mesh:
    """Read a ``fvmesh 1`` text file; raises MeshParseError / AdmissibilityError."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise MeshParseError(f"cannot read mesh file {path}: {exc}") from exc
    lines = [ln for ln in (_strip(x) for x in text.splitlines()) if ln]
    if not lines or lines[0].split() != ["fvmesh", "1"]:
        raise MeshParseError("missing 'fvmesh 1' header")
    pos = 1

    def section(name):
        nonlocal pos
        if pos >= len(lines):
            raise MeshParseError(f"missing section '{name}'")
        head = lines[pos].split()
        if len(head) != 2 or head[0] != name:
            raise MeshParseError(f"expected section '{name} <count>', got {lines[pos]!r}")
        try:
            count = int(head[1])
        except ValueError as exc:
            raise MeshParseError(f"bad count in {lines[pos]!r}") from exc
        body = lines[pos + 1: pos + 1 + count]
        if len(body) != count or count < 0:
            raise MeshParseError(f"section '{name}' truncated")
        pos += 1 + count
        return body

    try:
        verts = np.array([[float(t) for t in ln.split()] for ln in section("vertices")], dtype=float)
        cells, centers = [], []
        for ln in section("cells"):
            toks = ln.split()
            if "center" in toks:
                i = toks.index("center")
                if len(toks) != i + 3:
                    raise MeshParseError(f"bad center spec in {ln!r}")
                cells.append([int(t) for t in toks[:i]])
                centers.append((float(toks[i + 1]), float(toks[i + 2])))
            else:
                cells.append([int(t) for t in toks])
                centers.append(None)
        segments = []
        if pos < len(lines):
            for ln in section("boundary"):
                vi, vj, tag = ln.split()
                segments.append((verts[int(vi)], verts[int(vj)], tag))
    except (ValueError, IndexError) as exc:
        raise MeshParseError(f"malformed mesh file: {exc}") from exc
    if pos != len(lines):
        raise MeshParseError(f"unexpected content: {lines[pos]!r}")
    if len(verts) == 0 or verts.shape[1] != 2:
        raise MeshParseError("vertices must have two coordinates")
    if not cells:
        raise MeshParseError("empty cell list")

    mesh = from_polygons(verts, cells, centers, porosity, permeability, segments)
    if validate:
        rep = validate_admissibility(mesh, angle_tol)
        if not rep.passed:
            raise AdmissibilityError("mesh is not admissible:\n" + rep.summary(), rep)
    return mesh


def write_mesh(mesh: Mesh, path) -> None:
    """Write a mesh file; tagged boundary pieces become boundary lines."""
    verts = [(float(v[0]), float(v[1])) for v in mesh.vertices]
    index = {v: i for i, v in enumerate(verts)}
    extra = []

    def vid(p):
        key = (float(p[0]), float(p[1]))
        if key not in index:
            index[key] = len(verts) + len(extra)
            extra.append(key)
        return index[key]

    bnd = []
    for i in range(mesh.n_boundary):
        if mesh.bnd_tag[i] != IMPERVIOUS:
            a, b = mesh.bnd_points[i]
            bnd.append((vid(a), vid(b), mesh.bnd_tag[i]))
    allv = verts + extra
    out = ["fvmesh 1", f"vertices {len(allv)}"]
    out += [f"{x!r} {y!r}" for x, y in allv]
    out.append(f"cells {mesh.n_cells}")
    for k, c in enumerate(mesh.cells):
        cx, cy = (float(c) for c in mesh.centers[k])
        out.append(" ".join(str(v) for v in c) + f" center {cx!r} {cy!r}")
    out.append(f"boundary {len(bnd)}")
    out += [f"{a} {b} {t}" for a, b, t in bnd]
    Path(path).write_text("\n".join(out) + "\n")


def locate_cells(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    """Index of the cell containing each point (-1 if none)."""
    from scipy.spatial import cKDTree

    points = np.atleast_2d(np.asarray(points, float))
    tree = cKDTree(mesh.centers)
    k = min(8, mesh.n_cells)
    _, cand = tree.query(points, k=k)
    cand = np.atleast_2d(cand).reshape(len(points), k)
    out = np.full(len(points), -1, dtype=np.int64)
    for i, p in enumerate(points):
        for c in cand[i]:
            if _point_in_convex(mesh.cell_polygon(int(c)), p):
                out[i] = c
                break
        else:
            for c in range(mesh.n_cells):
                if _point_in_convex(mesh.cell_polygon(c), p):
                    out[i] = c
                    break
    return out


def _point_in_convex(pts, x, tol=1e-12) -> bool:
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]))
    for i in range(len(pts)):
        a, b = pts[i], pts[(i + 1) % len(pts)]
        if (b[0] - a[0]) * (x[1] - a[1]) - (b[1] - a[1]) * (x[0] - a[0]) < -tol * scale * scale:
            return False
    return True


def closure_defect(mesh: Mesh) -> np.ndarray:
    """Per-cell |sum_faces |sigma| eta| divided by the cell perimeter."""
    acc = np.zeros((mesh.n_cells, 2))
    per = np.zeros(mesh.n_cells)
    v = mesh.face_measure[:, None] * mesh.face_normal
    np.add.at(acc, mesh.face_cells[:, 0], v)
    np.add.at(acc, mesh.face_cells[:, 1], -v)
    np.add.at(per, mesh.face_cells[:, 0], mesh.face_measure)
    np.add.at(per, mesh.face_cells[:, 1], mesh.face_measure)
    np.add.at(acc, mesh.bnd_cell, mesh.bnd_measure[:, None] * mesh.bnd_normal)
    np.add.at(per, mesh.bnd_cell, mesh.bnd_measure)
    return np.hypot(acc[:, 0], acc[:, 1]) / per

