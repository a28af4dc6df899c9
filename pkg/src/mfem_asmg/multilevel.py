"""Discrete problem on a mesh hierarchy: spaces, transfers, loads, local solvers.

The velocity unknown on the finest level is split as ``u = u_0 + u_g`` where
``u_g`` carries the boundary normal flux (zero for homogeneous data) and
``u_0`` vanishes on boundary edges.  All solvers work with ``u_0``; the
functional ``v -> -(A^{-1} u_g, v)`` is folded into the velocity load.
"""

import numpy as np

import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order

from .assembly import (DiffusionField, ElementClasses, divergence_adjoint, divergence_apply,
                       load_vector, precise_residual)
from .fem_spaces import (PressureSpace, RtSpace, boundary_flux_dofs, prolongation,
                         pressure_prolongation)
from .mesh_hierarchy import vertex_patch
from .saddle_linalg import (DenseLocalSolver, ElementCondensation, LocalProblem,
                            SparseLocalSolver, global_orientation_problem)


def patch_problem(space, patch):
    """Condensed local problem on a vertex patch.

    Local edge unknowns are the spoke DOFs, oriented as seen from the first
    triangle (in counter-clockwise order) adjacent to the spoke.
    """
    p1 = space.p + 1
    ne = space.n_local_edge
    elems = patch.triangle_ids
    m = len(elems)
    ns = len(patch.interior_edge_ids)
    mm = np.arange(p1)
    rev = np.where(mm % 2 == 0, -1.0, 1.0)
    slot = np.full((m, ne), -1, dtype=np.int64)
    ssign = np.zeros((m, ne))
    gsign = np.zeros((ns, p1))
    for i in range(m):
        k = int(patch.local_index[i])
        ccw, cw = (k + 1) % 3, (k + 2) % 3
        if i < ns:
            slot[i, ccw * p1 + mm] = i * p1 + mm
            ssign[i, ccw * p1 + mm] = 1.0
            gsign[i] = space.lsign[elems[i], ccw * p1 + mm]
        s = (i - 1) % m if not patch.on_boundary else i - 1
        if s >= 0:
            slot[i, cw * p1 + mm] = s * p1 + mm
            ssign[i, cw * p1 + mm] = rev
    gidx = (patch.interior_edge_ids[:, None] * p1 + mm[None, :]).ravel()
    return LocalProblem(elems, slot, ssign, gidx, gsign.ravel(), tag=("patch", patch.center))


class PressureFit:
    """Removes an approximate pressure gradient ``B^T pi`` from a residual.

    Near convergence the residual ``load - M u`` is dominated by ``B^T p``
    with ``p`` the discrete pressure, while only its action on
    divergence-free fields matters.  Solving local problems with such a
    right-hand side loses digits in the (small) velocity.  Subtracting
    ``B^T pi`` leaves the action on divergence-free fields unchanged and
    keeps the right-hand side of the size of the algebraic residual.

    The non-constant modes of ``pi`` are fitted elementwise from the bubble
    entries; the element constants are integrated along a breadth-first
    spanning tree of the dual graph from the lowest-order edge entries.
    """

    def __init__(self, space):
        self.space = space
        mesh = space.mesh
        p1 = space.p + 1
        ne, nb = space.n_local_edge, space.n_bubble
        from .basis import reference_tensors
        _, D = reference_tensors(space.p)
        self.np_ = D.shape[0]
        self.pinv = np.linalg.pinv(D[1:, ne:].T) if nb else None
        ee = mesh.edge_elems
        inner = np.flatnonzero(ee[:, 1] >= 0)
        T = mesh.n_triangles
        G = sp.coo_matrix((np.ones(2 * len(inner)),
                           (np.r_[ee[inner, 0], ee[inner, 1]], np.r_[ee[inner, 1], ee[inner, 0]])),
                          shape=(T, T)).tocsr()
        order, pred = breadth_first_order(G, 0, directed=False, return_predecessors=True)
        if len(order) != T:
            raise ValueError("mesh dual graph is not connected")
        depth = np.zeros(T, dtype=np.int64)
        for k in order[1:]:
            depth[k] = depth[pred[k]] + 1
        # edge joining each element to its predecessor, with local positions
        self.layers = []
        edge_of = {}
        for e in inner:
            a, b = ee[e]
            edge_of[(a, b)] = e
            edge_of[(b, a)] = e
        for d in range(1, depth.max() + 1):
            ks = np.flatnonzero(depth == d)
            ps = pred[ks]
            es = np.array([edge_of[(int(k), int(q))] for k, q in zip(ks, ps)], dtype=np.int64)
            lk = np.argmax(mesh.el_edges[ks] == es[:, None], axis=1)
            lp = np.argmax(mesh.el_edges[ps] == es[:, None], axis=1)
            sk = space.lsign[ks, lk * p1] * D[0, lk * p1]
            sq = space.lsign[ps, lp * p1] * D[0, lp * p1]
            self.layers.append((ks, ps, es * p1, sk, sq))

    def fit(self, r):
        sp_ = self.space
        T = sp_.mesh.n_triangles
        ne = sp_.n_local_edge
        pi = np.zeros((T, self.np_))
        if self.pinv is not None:
            pi[:, 1:] = r[sp_.l2g[:, ne:]] @ self.pinv.T
            s = r - divergence_adjoint(sp_, pi)
        else:
            s = r
        for ks, ps, dofs, sk, sq in self.layers:
            pi[ks, 0] = (s[dofs] - sq * pi[ps, 0]) / sk
        return pi

    def __call__(self, r):
        pi = self.fit(r)
        return (r - divergence_adjoint(self.space, pi)) * self.space.free


class Level:
    """Spaces and element operators on one mesh."""

    def __init__(self, mesh, p, diffusion):
        self.mesh = mesh
        self.p = p
        self.space = RtSpace(mesh, p)
        self.wspace = PressureSpace(mesh, p)
        self.diffusion = diffusion
        self.classes = ElementClasses(self.space, diffusion)
        self.cond = ElementCondensation(self.classes)
        self.P = None   # prolongation from the previous level
        self.Q = None   # pressure prolongation from the previous level
        self._patches = {}
        self._global = None

    def mass_apply(self, x):
        return self.classes.mass_apply(x)

    def energy(self, x):
        return self.classes.energy(x)

    def div(self, x):
        return divergence_apply(self.space, x)

    def patches(self, vertices=None):
        """Batched solver for the vertex patches of the given vertices."""
        key = None if vertices is None else np.asarray(vertices).tobytes()
        if key not in self._patches:
            vs = np.arange(self.mesh.n_vertices) if vertices is None else np.asarray(vertices)
            probs = [patch_problem(self.space, vertex_patch(self.mesh, int(a))) for a in vs]
            self._patches[key] = DenseLocalSolver(self.cond, probs)
        return self._patches[key]

    def global_solver(self):
        """Sparse condensed solver on the whole level (zero-mean pressure)."""
        if self._global is None:
            sp_ = self.space
            edofs = np.flatnonzero(sp_.free[:sp_.n_edge_dofs])
            prob = global_orientation_problem(sp_, np.arange(self.mesh.n_triangles), edofs,
                                              tag=("global", self.mesh.level))
            self._global = SparseLocalSolver(self.cond, prob, weights=self.wspace.det)
        return self._global

    def solve_global(self, r, g=None):
        """Mixed solve on this level for velocity load r and pressure datum g."""
        rt, t, g0 = self.cond.pre(r, g)
        res = self.global_solver().solve(rt, t, g0 if g is not None else None)
        return res


class MultilevelSystem:
    """Hierarchy of levels plus the finest-level data of one test case.

    Parameters
    ----------
    hierarchy : MeshHierarchy
    p : int
        Polynomial degree on every level.
    case : TestCase
        Provides the diffusion, source, boundary flux and quadrature hints.
    """

    def __init__(self, hierarchy, p, case, load_order=None):
        self.hierarchy = hierarchy
        self.case = case
        self.p = p
        degs = hierarchy.polynomial_degrees(p)
        self.levels = []
        for j, mesh in enumerate(hierarchy.meshes):
            lev = Level(mesh, degs[j], case.diffusion(mesh))
            if j > 0:
                prev = self.levels[-1]
                lev.P = prolongation(prev.space, lev.space, hierarchy.parents[j])
                lev.Q = pressure_prolongation(prev.wspace, lev.wspace, hierarchy.parents[j])
            self.levels.append(lev)
        self.J = len(self.levels) - 1
        fine = self.levels[-1]
        self.load_order = load_order or 2 * fine.p + 6
        self._assemble_loads()
        self._fit = None

    # ------------------------------------------------------------------
    @property
    def fine(self):
        return self.levels[-1]

    def _assemble_loads(self):
        fine = self.fine
        case = self.case
        sp_ = fine.space
        if case.has_boundary_flux:
            self.u_g = boundary_flux_dofs(sp_, case.normal_flux)
        else:
            self.u_g = np.zeros(sp_.n_full)
        fw = load_vector(fine.wspace, case.source, self.load_order,
                         refine=case.quadrature_refine, singular_point=case.singular_point)
        load_w = fw - fine.div(self.u_g)
        # compatibility: zero total datum (the constant has coefficient 1/sqrt 2)
        area = fine.mesh.area
        c = load_w[:, 0].sum() / np.sqrt(2.0) / area.sum()
        self.compat_defect = float(c * area.sum())
        load_w[:, 0] -= c * np.sqrt(2.0) * area
        self.load_w = load_w
        self.load_v = -fine.mass_apply(self.u_g) * sp_.free
        self.loads_v = [None] * (self.J + 1)
        self.loads_w = [None] * (self.J + 1)
        self.loads_v[self.J] = self.load_v
        self.loads_w[self.J] = self.load_w
        for j in range(self.J, 0, -1):
            lev = self.levels[j]
            self.loads_v[j - 1] = lev.P.T @ self.loads_v[j]
            nc = self.levels[j - 1].wspace.n_local
            self.loads_w[j - 1] = (lev.Q.T @ self.loads_w[j].ravel()).reshape(-1, nc)

    # ------------------------------------------------------------------
    def restrict_all(self, gJ):
        """Restrictions of a finest-level functional to every level."""
        out = [None] * (self.J + 1)
        out[self.J] = gJ
        for j in range(self.J, 0, -1):
            out[j - 1] = self.levels[j].P.T @ out[j]
        return out

    def prolong(self, x, j_from, j_to=None):
        j_to = self.J if j_to is None else j_to
        for j in range(j_from + 1, j_to + 1):
            x = self.levels[j].P @ x
        return x

    def residual(self, u, deflate=False):
        """Finest-level functional v -> -(A^{-1}(u + u_g), v) on free DOFs.

        With ``deflate`` an approximate pressure gradient is removed; the
        action on divergence-free fields is unchanged.
        """
        r = (self.load_v - self.fine.mass_apply(u)) * self.fine.space.free
        return self.deflate(r) if deflate else r

    def deflate(self, r):
        """Remove an approximate pressure gradient from a residual."""
        if self._fit is None:
            self._fit = PressureFit(self.fine.space)
        return self._fit(r)

    def initial_residual(self, u0, passes=2):
        """Deflated residual of ``u0`` formed without cancellation.

        Solvers that track ``u = u0 + w`` update this residual by
        ``-M w`` only, so their right-hand sides keep full relative
        accuracy however small the algebraic error becomes.
        """
        fine = self.fine
        self.deflate(np.zeros(fine.space.n_full))
        free = fine.space.free
        r = precise_residual(fine.space, fine.classes, self.load_v, u0) * free
        pi = None
        for _ in range(passes):
            d = self._fit.fit(r)
            pi = d if pi is None else pi + d
            r = precise_residual(fine.space, fine.classes, self.load_v, u0, pi) * free
        return r

    def error_of(self, u0, r0=None):
        """``u_J - u0`` for a feasible ``u0``, solved from its residual.

        Accurate relative to the error itself rather than to ``u_J``.
        """
        if r0 is None:
            r0 = self.initial_residual(u0)
        fine = self.fine
        return fine.solve_global(r0, np.zeros_like(self.load_w)).total * fine.space.free

    def divergence_defect(self, u):
        """Relative defect of (div u, w) = datum over all pressure tests."""
        d = self.fine.div(u) - self.load_w
        scale = max(np.abs(self.load_w).max(), np.abs(self.fine.div(u)).max(), 1e-300)
        return float(np.abs(d).max() / scale)

    def energy(self, x):
        return self.fine.energy(x)

    def reference_solution(self):
        res = self.fine.solve_global(self.load_v, self.load_w)
        return res.total, res.pressure

    def total_velocity(self, u):
        return u + self.u_g
