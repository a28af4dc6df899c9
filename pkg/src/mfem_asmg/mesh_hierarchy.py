"""Triangular meshes, refinement and nested hierarchies.

Triangles are stored counter-clockwise with their refinement edge placed at
local edge 0, i.e. opposite local vertex 0 (the "newest vertex").  Local edge
``k`` joins local vertices ``k+1`` and ``k+2``.  Edges are numbered by the
lexicographic order of their sorted vertex pairs, so every derived quantity
is deterministic.  Vertex ids persist across refinement: new vertices are
appended to the coordinate array.
"""

from dataclasses import dataclass, field

import numpy as np

GEOM_TOL = 1e-12


class MeshError(ValueError):
    pass


def _signed_area2(coords, tris):
    p0, p1, p2 = coords[tris[:, 0]], coords[tris[:, 1]], coords[tris[:, 2]]
    d1, d2 = p1 - p0, p2 - p0
    return d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]


class Mesh:
    """Conforming triangulation with derived edge connectivity.

    Parameters
    ----------
    coords : (N, 2) array
        Vertex coordinates.  Vertices not referenced by any triangle are
        not allowed.
    tris : (T, 3) int array
        Counter-clockwise vertex triples, refinement edge at local edge 0.
    level : int
        Position in a hierarchy.
    """

    def __init__(self, coords, tris, level=0):
        self.coords = np.ascontiguousarray(coords, dtype=float)
        self.tris = np.ascontiguousarray(tris, dtype=np.int64)
        self.level = level
        if len(self.tris) == 0:
            raise MeshError("empty mesh")
        if np.any(self.tris[:, 0] == self.tris[:, 1]) or np.any(
                self.tris[:, 1] == self.tris[:, 2]) or np.any(self.tris[:, 0] == self.tris[:, 2]):
            raise MeshError("triangle with repeated vertex")
        area2 = _signed_area2(self.coords, self.tris)
        if np.any(area2 <= 0):
            raise MeshError("triangles must be counter-clockwise with positive area")
        self.area = 0.5 * area2
        self._build_edges()

    # ------------------------------------------------------------------
    def _build_edges(self):
        tris = self.tris
        nv = len(self.coords)
        a = tris[:, [1, 2, 0]]
        b = tris[:, [2, 0, 1]]
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        keys = (lo * nv + hi).ravel()
        uniq, inv = np.unique(keys, return_inverse=True)
        self.edges = np.column_stack([uniq // nv, uniq % nv])
        self.el_edges = inv.reshape(-1, 3)
        self.el_sign = np.where(a < b, 1, -1).astype(np.int8)
        ne = len(uniq)
        counts = np.bincount(inv, minlength=ne)
        if counts.max() > 2:
            raise MeshError("non-conforming mesh: edge shared by more than two triangles")
        order = np.argsort(inv, kind="stable")
        el_of = order // 3
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.edge_elems = np.full((ne, 2), -1, dtype=np.int64)
        self.edge_elems[:, 0] = el_of[start]
        two = counts == 2
        self.edge_elems[two, 1] = el_of[start[two] + 1]
        self.boundary_edges = counts == 1
        bv = np.zeros(nv, dtype=bool)
        bv[self.edges[self.boundary_edges].ravel()] = True
        self.boundary_vertices = bv
        used = np.zeros(nv, dtype=bool)
        used[tris.ravel()] = True
        if not used.all():
            raise MeshError("unreferenced vertices")
        # vertex -> triangles (CSR)
        flat = tris.ravel()
        vorder = np.argsort(flat, kind="stable")
        self.v2t_ptr = np.concatenate([[0], np.cumsum(np.bincount(flat, minlength=nv))])
        self.v2t = vorder // 3

    # ------------------------------------------------------------------
    @property
    def n_vertices(self):
        return len(self.coords)

    @property
    def n_triangles(self):
        return len(self.tris)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def refinement_edge(self):
        return np.zeros(len(self.tris), dtype=np.int8)

    def euler_characteristic(self):
        return self.n_vertices - self.n_edges + self.n_triangles

    def jacobians(self):
        """Affine maps x = x0 + B xi; returns (x0, B) with B of shape (T, 2, 2)."""
        p = self.coords[self.tris]
        B = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        return p[:, 0], B

    def diameters(self):
        p = self.coords[self.tris]
        lens = np.linalg.norm(p[:, [1, 2, 0]] - p[:, [2, 0, 1]], axis=2)
        return lens.max(axis=1)

    def shape_regularity(self):
        """max h_K / rho_K with rho_K the inradius diameter."""
        p = self.coords[self.tris]
        lens = np.linalg.norm(p[:, [1, 2, 0]] - p[:, [2, 0, 1]], axis=2)
        rho = 4.0 * self.area / lens.sum(axis=1)
        return float(np.max(lens.max(axis=1) / rho))

    def centroids(self):
        return self.coords[self.tris].mean(axis=1)

    def vertex_triangles(self, a):
        return self.v2t[self.v2t_ptr[a]:self.v2t_ptr[a + 1]]

    def check_conforming(self):
        """Raise if any edge is hanging (a vertex lying inside another edge)."""
        if self.euler_characteristic() != 1:
            raise MeshError("Euler relation V - E + T = 1 violated")
        nb = np.count_nonzero(self.boundary_edges)
        if 3 * self.n_triangles != 2 * self.n_edges - nb:
            raise MeshError("edge count inconsistent with a conforming mesh")


# ----------------------------------------------------------------------
# construction
def orient_longest_edge(coords, tris):
    """Rotate each triangle so that local edge 0 is its longest edge.

    Ties are broken by the lowest id of the opposite vertex.
    """
    tris = np.array(tris, dtype=np.int64)
    p = coords[tris]
    lens = np.linalg.norm(p[:, [1, 2, 0]] - p[:, [2, 0, 1]], axis=2)
    tol = GEOM_TOL * lens.max()
    out = np.empty_like(tris)
    for t in range(len(tris)):
        lmax = lens[t].max()
        cands = [k for k in range(3) if lens[t, k] >= lmax - tol]
        k = min(cands, key=lambda c: tris[t, c])
        out[t] = np.roll(tris[t], -k)
    return out


def build_initial_mesh(domain=(0.0, 1.0, 0.0, 1.0), h=0.5):
    """Criss-cross mesh: each axis-aligned square cell is split into 4 triangles.

    Parameters
    ----------
    domain : (x0, x1, y0, y1)
    h : float
        Side length of the square cells.
    """
    x0, x1, y0, y1 = map(float, domain)
    if not h > 0:
        raise MeshError("mesh size must be positive")
    nx = int(round((x1 - x0) / h))
    ny = int(round((y1 - y0) / h))
    if nx < 1 or ny < 1 or abs(nx * h - (x1 - x0)) > GEOM_TOL or abs(ny * h - (y1 - y0)) > GEOM_TOL:
        raise MeshError("domain is not an integer number of cells of size h")
    xs = x0 + h * np.arange(nx + 1)
    ys = y0 + h * np.arange(ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    centers = []
    tris = []
    nid = lambda i, j: j * (nx + 1) + i
    ngrid = len(grid)
    for j in range(ny):
        for i in range(nx):
            m = ngrid + len(centers)
            centers.append([xs[i] + 0.5 * h, ys[j] + 0.5 * h])
            a, b, c, d = nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)
            tris += [[m, a, b], [m, b, c], [m, c, d], [m, d, a]]
    coords = np.vstack([grid, np.array(centers)])
    tris = orient_longest_edge(coords, np.array(tris))
    return Mesh(coords, tris, level=0)


# ----------------------------------------------------------------------
# refinement
@dataclass
class Refinement:
    """Result of one refinement step."""
    mesh: Mesh
    parent: np.ndarray           # fine triangle -> coarse triangle
    new_vertices: np.ndarray
    refined: np.ndarray          # coarse triangles that were split
    bisections: list = field(default_factory=list)  # (new vertex, endpoint, endpoint)


def uniform_refine(mesh):
    """Red refinement: every triangle is split into four via edge midpoints."""
    nv = mesh.n_vertices
    mids = 0.5 * (mesh.coords[mesh.edges[:, 0]] + mesh.coords[mesh.edges[:, 1]])
    coords = np.vstack([mesh.coords, mids])
    v = mesh.tris
    m = nv + mesh.el_edges
    kids = np.stack([
        np.column_stack([v[:, 0], m[:, 2], m[:, 1]]),
        np.column_stack([v[:, 1], m[:, 0], m[:, 2]]),
        np.column_stack([v[:, 2], m[:, 1], m[:, 0]]),
        np.column_stack([m[:, 0], m[:, 1], m[:, 2]]),
    ], axis=1).reshape(-1, 3)
    parent = np.repeat(np.arange(mesh.n_triangles), 4)
    fine = Mesh(coords, kids, level=mesh.level + 1)
    bis = [(nv + e, int(a), int(b)) for e, (a, b) in enumerate(mesh.edges)]
    return Refinement(fine, parent, nv + np.arange(mesh.n_edges),
                      np.arange(mesh.n_triangles), bis)


def nvb_refine(mesh, marked, mode="newest"):
    """Newest vertex bisection with conformity closure.

    Parameters
    ----------
    mesh : Mesh
    marked : iterable of int
        Triangles to refine.
    mode : {"newest", "full"}
        ``"newest"`` bisects each marked triangle once (at its refinement
        edge); ``"full"`` marks all three edges, which splits each marked
        triangle into four.
    """
    marked = np.unique(np.asarray(list(marked), dtype=np.int64))
    if marked.size == 0:
        raise MeshError("no triangles marked")
    if marked.min() < 0 or marked.max() >= mesh.n_triangles:
        raise MeshError("marked triangle id out of range")
    mesh.check_conforming()
    ee = mesh.el_edges
    medge = np.zeros(mesh.n_edges, dtype=bool)
    if mode == "newest":
        medge[ee[marked, 0]] = True
    elif mode == "full":
        medge[ee[marked].ravel()] = True
    else:
        raise ValueError(f"unknown marking mode {mode!r}")
    for _ in range(mesh.n_triangles + 1):
        m = medge[ee]
        need = m.any(axis=1) & ~m[:, 0]
        if not need.any():
            break
        medge[ee[need, 0]] = True
    else:  # pragma: no cover - closure always terminates
        raise MeshError("closure did not terminate")

    nv = mesh.n_vertices
    edge_ids = np.flatnonzero(medge)
    mid_of = np.full(mesh.n_edges, -1, dtype=np.int64)
    mid_of[edge_ids] = nv + np.arange(len(edge_ids))
    ends = mesh.edges[edge_ids]
    coords = np.vstack([mesh.coords, 0.5 * (mesh.coords[ends[:, 0]] + mesh.coords[ends[:, 1]])])

    v = mesh.tris
    mm = mid_of[ee]
    kids = []
    parent = []
    for t in range(mesh.n_triangles):
        v0, v1, v2 = v[t]
        m0, m1, m2 = mm[t]
        if m0 < 0:
            ch = [(v0, v1, v2)]
        else:
            left = [(m0, v0, v1)] if m2 < 0 else [(m2, m0, v0), (m2, v1, m0)]
            right = [(m0, v2, v0)] if m1 < 0 else [(m1, m0, v2), (m1, v0, m0)]
            ch = left + right
        kids += ch
        parent += [t] * len(ch)
    fine = Mesh(coords, np.array(kids), level=mesh.level + 1)
    refined = np.flatnonzero(mm[:, 0] >= 0)
    bis = [(int(nv + i), int(a), int(b)) for i, (a, b) in enumerate(ends)]
    return Refinement(fine, np.array(parent), nv + np.arange(len(edge_ids)), refined, bis)


def doerfler_mark(element_errors, theta_mark):
    """Minimal set carrying a fraction theta of the total squared error.

    Elements are taken by decreasing error, ties by lower id, which gives a
    set of minimal cardinality.
    """
    err = np.asarray(element_errors, dtype=float)
    if np.any(err < 0) or not np.all(np.isfinite(err)):
        raise ValueError("errors must be finite and nonnegative")
    if not 0.0 < theta_mark <= 1.0:
        raise ValueError("theta_mark must lie in (0, 1]")
    sq = err**2
    total = sq.sum()
    if total == 0.0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(err)), -sq))
    cum = np.cumsum(sq[order])
    k = int(np.searchsorted(cum, theta_mark * total, side="left"))
    k = min(k, len(err) - 1)
    return np.sort(order[:k + 1])


# ----------------------------------------------------------------------
@dataclass
class Patch:
    """Vertex patch: triangles around ``center`` in counter-clockwise order.

    ``local_index[i]`` is the local vertex index of the center in
    ``triangle_ids[i]``.  ``interior_edge_ids`` are the spokes (edges through
    the center shared by two patch triangles); spoke ``i`` separates
    triangles ``i`` and ``i + 1``.  ``boundary_edge_ids`` are the edges on
    the patch boundary.
    """
    center: int
    triangle_ids: np.ndarray
    local_index: np.ndarray
    interior_edge_ids: np.ndarray
    boundary_edge_ids: np.ndarray
    on_boundary: bool


def vertex_patch(mesh, a):
    if not 0 <= a < mesh.n_vertices:
        raise MeshError(f"vertex {a} not in mesh")
    tri = mesh.vertex_triangles(a)
    if tri.size == 0:
        raise MeshError(f"vertex {a} not in mesh")
    loc = {int(t): int(np.flatnonzero(mesh.tris[t] == a)[0]) for t in tri}
    ee, e2t = mesh.el_edges, mesh.edge_elems

    def ccw_edge(t):
        return ee[t, (loc[t] + 1) % 3]

    def cw_edge(t):
        return ee[t, (loc[t] + 2) % 3]

    def across(e, t):
        a0, a1 = e2t[e]
        return a1 if a0 == t else a0

    on_bnd = bool(mesh.boundary_vertices[a])
    if on_bnd:
        starts = [int(t) for t in tri if mesh.boundary_edges[cw_edge(t)]]
        start = starts[0]
    else:
        start = int(tri.min())
    order = [start]
    spokes = []
    t = start
    while True:
        e = ccw_edge(t)
        nxt = across(e, t)
        if nxt < 0:
            break
        if nxt == start:
            spokes.append(e)
            break
        spokes.append(e)
        order.append(int(nxt))
        t = nxt
    if len(order) != len(tri):
        raise MeshError(f"patch of vertex {a} is not edge-connected")
    bnd = [ee[t, loc[t]] for t in order]
    if on_bnd:
        bnd = [cw_edge(order[0])] + bnd + [ccw_edge(order[-1])]
    return Patch(int(a), np.array(order), np.array([loc[t] for t in order]),
                 np.array(spokes, dtype=np.int64), np.array(bnd, dtype=np.int64), on_bnd)


# ----------------------------------------------------------------------
class MeshHierarchy:
    """Nested meshes T_0, ..., T_J with refinement bookkeeping."""

    def __init__(self, coarse, degrees=None):
        self.meshes = [coarse]
        self.parents = [None]
        self.new_vertices = [np.zeros(0, dtype=np.int64)]
        self.refined = [np.zeros(0, dtype=np.int64)]
        self.bisections = [[]]
        self._degrees = degrees

    @property
    def J(self):
        return len(self.meshes) - 1

    def append(self, ref: Refinement):
        self.meshes.append(ref.mesh)
        self.parents.append(np.asarray(ref.parent))
        self.new_vertices.append(np.asarray(ref.new_vertices))
        self.refined.append(np.asarray(ref.refined))
        self.bisections.append(ref.bisections)

    def truncated(self, J):
        h = MeshHierarchy(self.meshes[0], self._degrees)
        for j in range(1, J + 1):
            h.meshes.append(self.meshes[j])
            h.parents.append(self.parents[j])
            h.new_vertices.append(self.new_vertices[j])
            h.refined.append(self.refined[j])
            h.bisections.append(self.bisections[j])
        return h

    def polynomial_degrees(self, p):
        degs = self._degrees or [p] * (self.J + 1)
        if any(b < a for a, b in zip(degs, degs[1:])):
            raise ValueError("polynomial degrees must be non-decreasing")
        return list(degs)

    def child_map(self, j):
        """Children of each level-(j-1) triangle as a list of arrays."""
        par = self.parents[j]
        order = np.argsort(par, kind="stable")
        counts = np.bincount(par, minlength=self.meshes[j - 1].n_triangles)
        return np.split(order, np.cumsum(counts)[:-1])

    def ancestors(self, j, level=0):
        """Index of the level-`level` ancestor of each triangle of T_j."""
        anc = np.arange(self.meshes[j].n_triangles)
        for k in range(j, level, -1):
            anc = self.parents[k][anc]
        return anc

    def patch(self, j, a):
        if not 0 <= j <= self.J:
            raise MeshError("level out of range")
        return vertex_patch(self.meshes[j], a)

    def new_vertex_set(self, j):
        """New vertices of step j plus vertices whose patch changed."""
        if not 1 <= j <= self.J:
            raise MeshError("level out of range")
        coarse = self.meshes[j - 1]
        touched = coarse.tris[self.refined[j]].ravel()
        return np.union1d(self.new_vertices[j], touched).astype(np.int64)

    def check_nested(self, j):
        """Every fine triangle lies inside its parent (barycentric test)."""
        fine, coarse = self.meshes[j], self.meshes[j - 1]
        x0, B = coarse.jacobians()
        par = self.parents[j]
        Binv = np.linalg.inv(B[par])
        pts = fine.coords[fine.tris] - x0[par][:, None, :]
        lam = np.einsum("tij,tkj->tki", Binv, pts)
        bary = np.concatenate([1 - lam.sum(axis=2, keepdims=True), lam], axis=2)
        if bary.min() < -GEOM_TOL * 10:
            raise MeshError("hierarchy is not nested")
        return True


def uniform_hierarchy(coarse, J):
    h = MeshHierarchy(coarse)
    for _ in range(J):
        h.append(uniform_refine(h.meshes[-1]))
    return h


# ----------------------------------------------------------------------
# text i/o
def write_mesh(mesh, path, parent=None):
    """Write the plain-text mesh format (header ``mfem-mesh v1``)."""
    parent = np.full(mesh.n_triangles, -1) if parent is None else parent
    with open(path, "w") as fh:
        fh.write("mfem-mesh v1\n")
        fh.write(f"{mesh.n_vertices}\n")
        for (x, y), b in zip(mesh.coords, mesh.boundary_vertices):
            fh.write(f"{float(x)!r} {float(y)!r} {int(b)}\n")
        fh.write(f"{mesh.n_triangles}\n")
        for (a, b, c), par in zip(mesh.tris, parent):
            fh.write(f"{a} {b} {c} 0 {int(par)} {mesh.level}\n")


def read_mesh(path):
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines[0].strip() != "mfem-mesh v1":
        raise MeshError("bad mesh header")
    nv = int(lines[1])
    coords = np.array([[float(s) for s in ln.split()[:2]] for ln in lines[2:2 + nv]])
    nt = int(lines[2 + nv])
    rows = np.array([[int(s) for s in ln.split()] for ln in lines[3 + nv:3 + nv + nt]])
    tris = np.array([np.roll(r[:3], -r[3]) for r in rows])
    level = int(rows[0, 5]) if nt else 0
    return Mesh(coords, tris, level=level), rows[:, 4]


def write_vtk(mesh, path, cell_data=None):
    """Legacy VTK unstructured grid for visualisation."""
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nmesh\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        for x, y in mesh.coords:
            fh.write(f"{x!r} {y!r} 0\n")
        fh.write(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}\n")
        for a, b, c in mesh.tris:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {mesh.n_triangles}\n")
        fh.write("5\n" * mesh.n_triangles)
        if cell_data:
            fh.write(f"CELL_DATA {mesh.n_triangles}\n")
            for name, vals in cell_data.items():
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                fh.writelines(f"{v!r}\n" for v in vals)
