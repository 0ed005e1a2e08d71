"""Triangular meshes and finite-element matrices for the SPDE field.

A mesh is a plain node/triangle structure over a planar domain. The two
products consumed downstream are the lumped mass matrix / stiffness matrix
pair (`assemble_fem`) and barycentric projection matrices mapping mesh
nodes to arbitrary observation locations (`projection_matrix`).

Mesh file format (plain text, ``#`` comments allowed anywhere)::

    mesh v1 <n_nodes> <n_triangles>
    x y boundary_flag        # one line per node
    i j k                    # one line per triangle, 0-based node indices

Coordinates are planar; the unit (meters, degrees, ...) is carried as
opaque metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import DataError, MeshError

# Coordinate tolerance below which two nodes count as duplicates.
DUPLICATE_NODE_TOL = 1e-9


@dataclass(frozen=True)
class TriangularMesh:
    """Immutable 2D triangulation.

    nodes : (n, 2) float array of planar coordinates.
    triangles : (m, 3) int array of node indices, counter-clockwise.
    boundary : (n,) bool array flagging hull nodes.
    units : free-form coordinate-unit label.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    units: str = "unspecified"

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def bbox(self) -> tuple[float, float, float, float]:
        xmin, ymin = self.nodes.min(axis=0)
        xmax, ymax = self.nodes.max(axis=0)
        return float(xmin), float(ymin), float(xmax), float(ymax)

    def diameter(self) -> float:
        xmin, ymin, xmax, ymax = self.bbox()
        return float(np.hypot(xmax - xmin, ymax - ymin))


@dataclass(frozen=True)
class FemMatrices:
    """Lumped mass diagonal ``c`` (area units) and stiffness ``G``."""

    c: np.ndarray
    G: sp.csc_matrix

    @property
    def C(self) -> sp.csc_matrix:
        return sp.diags(self.c).tocsc()

    @property
    def n(self) -> int:
        return self.c.shape[0]


def signed_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p1 = nodes[triangles[:, 0]]
    p2 = nodes[triangles[:, 1]]
    p3 = nodes[triangles[:, 2]]
    e1 = p2 - p1
    e2 = p3 - p1
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def total_area(mesh: TriangularMesh) -> float:
    return float(np.abs(signed_areas(mesh.nodes, mesh.triangles)).sum())


def _check_connected(n_nodes: int, triangles: np.ndarray) -> bool:
    # Union-find over triangle vertices.
    parent = np.arange(n_nodes)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b, c in triangles:
        ra, rb, rc = find(a), find(b), find(c)
        parent[rb] = ra
        parent[rc] = ra
    roots = {find(i) for i in range(n_nodes)}
    return len(roots) <= 1


def validate_mesh(mesh: TriangularMesh) -> None:
    """Raise MeshError on any TriangularMesh invariant violation."""
    nodes, tris = mesh.nodes, mesh.triangles
    if nodes.ndim != 2 or nodes.shape[1] != 2:
        raise MeshError("nodes must be an (n, 2) array")
    if tris.ndim != 2 or tris.shape[1] != 3:
        raise MeshError("triangles must be an (m, 3) array")
    if tris.size and (tris.min() < 0 or tris.max() >= len(nodes)):
        bad_rows = ((tris < 0) | (tris >= len(nodes))).any(axis=1)
        bad = int(np.argmax(bad_rows))
        raise MeshError(
            f"triangle {bad} references node index outside 0..{len(nodes) - 1}"
        )
    areas = signed_areas(nodes, tris)
    degenerate = np.nonzero(areas == 0.0)[0]
    if degenerate.size:
        raise MeshError(f"triangle {int(degenerate[0])} has zero area")
    # Duplicate nodes within tolerance: sort lexicographically, compare runs.
    order = np.lexsort((nodes[:, 1], nodes[:, 0]))
    sorted_nodes = nodes[order]
    close = np.all(np.abs(np.diff(sorted_nodes, axis=0)) <= DUPLICATE_NODE_TOL, axis=1)
    if close.any():
        k = int(np.argmax(close))
        raise MeshError(
            f"duplicate nodes {int(order[k])} and {int(order[k + 1])} "
            f"within {DUPLICATE_NODE_TOL}"
        )
    if not _check_connected(len(nodes), tris):
        raise MeshError("mesh is not connected")


def _normalize(mesh: TriangularMesh) -> TriangularMesh:
    """Flip clockwise triangles to counter-clockwise; validate."""
    areas = signed_areas(mesh.nodes, mesh.triangles)
    tris = mesh.triangles.copy()
    flip = areas < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    mesh = replace(mesh, triangles=tris)
    validate_mesh(mesh)
    return mesh


def build_structured_mesh(
    bbox: tuple[float, float, float, float],
    nx: int,
    ny: int,
    units: str = "unspecified",
) -> TriangularMesh:
    """Regular nx-by-ny node grid over ``bbox`` with each cell split in two.

    ``bbox`` is (xmin, ymin, xmax, ymax); nx and ny count nodes per axis.
    """
    xmin, ymin, xmax, ymax = map(float, bbox)
    if not (xmax > xmin and ymax > ymin):
        raise MeshError(f"degenerate bbox {bbox}")
    if nx < 2 or ny < 2:
        raise MeshError("nx and ny must both be >= 2")
    xs = np.linspace(xmin, xmax, nx)
    ys = np.linspace(ymin, ymax, ny)
    gx, gy = np.meshgrid(xs, ys)
    nodes = np.column_stack([gx.ravel(), gy.ravel()])

    tris = []
    for iy in range(ny - 1):
        for ix in range(nx - 1):
            n00 = iy * nx + ix
            n10 = n00 + 1
            n01 = n00 + nx
            n11 = n01 + 1
            tris.append((n00, n10, n11))
            tris.append((n00, n11, n01))
    triangles = np.array(tris, dtype=np.int64)

    ix = np.tile(np.arange(nx), ny)
    iy = np.repeat(np.arange(ny), nx)
    boundary = (ix == 0) | (ix == nx - 1) | (iy == 0) | (iy == ny - 1)

    mesh = TriangularMesh(nodes=nodes, triangles=triangles, boundary=boundary, units=units)
    validate_mesh(mesh)
    return mesh


def save_mesh(mesh: TriangularMesh, path) -> None:
    """Write the documented plain-text mesh format (exact float round-trip)."""
    with open(path, "w") as fh:
        fh.write(f"# units: {mesh.units}\n")
        fh.write(f"mesh v1 {mesh.n_nodes} {mesh.n_triangles}\n")
        for (x, y), b in zip(mesh.nodes, mesh.boundary):
            fh.write(f"{float(x)!r} {float(y)!r} {int(b)}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def load_mesh(path) -> TriangularMesh:
    """Parse and validate a mesh file; errors carry 1-based line numbers."""
    units = "unspecified"
    tokens: list[tuple[int, list[str]]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line.startswith("# units:"):
                units = line[len("# units:"):].strip()
                continue
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.append((lineno, line.split()))

    if not tokens:
        raise DataError(f"{path}: empty mesh file")
    lineno, header = tokens[0]
    if len(header) != 4 or header[0] != "mesh" or header[1] != "v1":
        raise DataError(f"{path}:{lineno}: expected header 'mesh v1 <n_nodes> <n_triangles>'")
    try:
        n_nodes, n_tris = int(header[2]), int(header[3])
    except ValueError:
        raise DataError(f"{path}:{lineno}: non-integer counts in header") from None
    if len(tokens) != 1 + n_nodes + n_tris:
        raise DataError(
            f"{path}: header promises {n_nodes} nodes + {n_tris} triangles, "
            f"found {len(tokens) - 1} data lines"
        )

    nodes = np.empty((n_nodes, 2))
    boundary = np.empty(n_nodes, dtype=bool)
    for row, (lineno, parts) in enumerate(tokens[1 : 1 + n_nodes]):
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: node line needs 'x y boundary_flag'")
        try:
            nodes[row] = (float(parts[0]), float(parts[1]))
            boundary[row] = bool(int(parts[2]))
        except ValueError:
            raise DataError(f"{path}:{lineno}: unparseable node line") from None

    triangles = np.empty((n_tris, 3), dtype=np.int64)
    for row, (lineno, parts) in enumerate(tokens[1 + n_nodes :]):
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: triangle line needs 'i j k'")
        try:
            triangles[row] = [int(p) for p in parts]
        except ValueError:
            raise DataError(f"{path}:{lineno}: unparseable triangle line") from None
        if triangles[row].min() < 0 or triangles[row].max() >= n_nodes:
            raise MeshError(
                f"{path}:{lineno}: triangle {row} references node "
                f"{int(triangles[row].max())} of {n_nodes}"
            )

    return _normalize(
        TriangularMesh(nodes=nodes, triangles=triangles, boundary=boundary, units=units)
    )


def assemble_fem(mesh: TriangularMesh) -> FemMatrices:
    """Assemble lumped mass diagonal and P1 stiffness matrix.

    Mass lumping is row-sum lumping of the consistent linear-element mass
    matrix (each triangle contributes area/3 to each vertex), so
    ``sum(c) == total mesh area``. G has constants in its null space.
    """
    nodes, tris = mesh.nodes, mesh.triangles
    e1 = nodes[tris[:, 1]] - nodes[tris[:, 0]]
    e2 = nodes[tris[:, 2]] - nodes[tris[:, 0]]
    areas2 = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]  # twice the signed area
    zero = np.nonzero(areas2 == 0.0)[0]
    if zero.size:
        raise MeshError(f"cannot assemble: triangle {int(zero[0])} has zero area")
    areas = 0.5 * np.abs(areas2)

    c = np.zeros(mesh.n_nodes)
    np.add.at(c, tris.ravel(), np.repeat(areas / 3.0, 3))

    # P1 gradients: grad(phi_i) = (y_j - y_k, x_k - x_j) / (2A), (i,j,k) cyclic.
    x = nodes[tris, 0]
    y = nodes[tris, 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    d = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)

    ke = (b[:, :, None] * b[:, None, :] + d[:, :, None] * d[:, None, :]) / (
        4.0 * areas[:, None, None]
    )
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    G = sp.coo_matrix(
        (ke.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    ).tocsc()
    return FemMatrices(c=c, G=G)


def projection_matrix(
    mesh: TriangularMesh,
    locations: np.ndarray,
    snap_tol: float | None = None,
) -> sp.csr_matrix:
    """Barycentric interpolation weights, one row per location.

    Locations must fall inside the mesh (or within ``snap_tol`` of it, in
    coordinate units; defaults to 1e-6 of the mesh bbox diagonal). Rows sum
    to one and carry at most three nonzeros.
    """
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    if locations.shape[1] != 2:
        raise MeshError("locations must be an (m, 2) array")
    if snap_tol is None:
        snap_tol = 1e-6 * mesh.diameter()

    nodes, tris = mesh.nodes, mesh.triangles
    x1, y1 = nodes[tris[:, 0], 0], nodes[tris[:, 0], 1]
    x2, y2 = nodes[tris[:, 1], 0], nodes[tris[:, 1], 1]
    x3, y3 = nodes[tris[:, 2], 0], nodes[tris[:, 2], 1]
    det = (y2 - y3) * (x1 - x3) + (x3 - x2) * (y1 - y3)  # 2 * signed area
    # Conservative barycentric slack per triangle: |grad(lambda)| <= L_max/(2A).
    edge_max = np.maximum.reduce(
        [
            np.hypot(x2 - x1, y2 - y1),
            np.hypot(x3 - x2, y3 - y2),
            np.hypot(x1 - x3, y1 - y3),
        ]
    )
    slack = snap_tol * edge_max / np.abs(det)

    rows, cols, vals = [], [], []
    outside = []
    for r, (px, py) in enumerate(locations):
        l1 = ((y2 - y3) * (px - x3) + (x3 - x2) * (py - y3)) / det
        l2 = ((y3 - y1) * (px - x3) + (x1 - x3) * (py - y3)) / det
        l3 = 1.0 - l1 - l2
        lmin = np.minimum(np.minimum(l1, l2), l3)
        ok = lmin >= -slack
        if not ok.any():
            outside.append((r, float(px), float(py)))
            continue
        # Prefer the containing triangle with the most interior coordinates.
        cands = np.nonzero(ok)[0]
        t = int(cands[np.argmax(lmin[cands])])
        w = np.array([l1[t], l2[t], l3[t]])
        w = np.clip(w, 0.0, 1.0)
        w /= w.sum()
        for node, weight in zip(tris[t], w):
            if weight > 1e-14:
                rows.append(r)
                cols.append(int(node))
                vals.append(float(weight))
    if outside:
        listing = ", ".join(f"({px}, {py})" for _, px, py in outside[:10])
        raise MeshError(
            f"{len(outside)} location(s) outside mesh hull beyond snap "
            f"tolerance {snap_tol:g}: {listing}"
        )
    return sp.csr_matrix(
        (vals, (rows, cols)), shape=(locations.shape[0], mesh.n_nodes)
    )
