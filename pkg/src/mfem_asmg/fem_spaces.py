"""Raviart-Thomas velocity and discontinuous pressure spaces on one mesh.

Global velocity DOFs use a *full* numbering that keeps boundary edges:
edge ``e`` and Legendre mode ``m`` map to ``e (p + 1) + m``, interior DOFs
of triangle ``t`` follow all edge DOFs at ``E (p + 1) + t p (p + 1) + b``.
Fields of ``RT_p(T) n H_0(div)`` are vectors in this numbering with the
boundary entries equal to zero; ``free`` marks the remaining entries.

A global edge is oriented from its lower to its higher vertex id and its
normal is the tangent rotated clockwise.  A local edge DOF relates to the
global one by ``local = sign * global`` with sign ``+1`` if the element
traverses the edge in the global direction and ``(-1)^(m+1)`` otherwise.
"""

from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .basis import dubiner, rt_reference, scalar_dim, edge_geometry
from .quadrature import gauss_interval, gauss_triangle
from scipy.special import eval_legendre


class RtSpace:
    """Degree-p Raviart-Thomas DOF handler on a mesh."""

    def __init__(self, mesh, p):
        if p < 0:
            raise ValueError("degree must be nonnegative")
        self.mesh = mesh
        self.p = p
        self.ref = rt_reference(p)
        self.n_edge = p + 1
        self.n_bubble = p * (p + 1)
        self.n_local = (p + 1) * (p + 3)
        self.n_local_edge = 3 * (p + 1)
        E, T = mesh.n_edges, mesh.n_triangles
        self.n_edge_dofs = E * (p + 1)
        self.n_full = self.n_edge_dofs + T * self.n_bubble
        m = np.arange(p + 1)
        edge_l2g = mesh.el_edges[:, :, None] * (p + 1) + m[None, None, :]
        rev = np.where(m % 2 == 0, -1.0, 1.0)  # (-1)^(m+1)
        edge_sign = np.where(mesh.el_sign[:, :, None] > 0, 1.0, rev[None, None, :])
        bub = self.n_edge_dofs + np.arange(T)[:, None] * self.n_bubble + np.arange(self.n_bubble)[None, :]
        self.l2g = np.concatenate([edge_l2g.reshape(T, -1), bub], axis=1)
        self.lsign = np.concatenate([edge_sign.reshape(T, -1), np.ones((T, self.n_bubble))], axis=1)
        self.free = np.ones(self.n_full, dtype=bool)
        bnd = np.flatnonzero(mesh.boundary_edges)
        self.free[(bnd[:, None] * (p + 1) + m[None, :]).ravel()] = False
        self.free_index = np.flatnonzero(self.free)

    @property
    def total_dim(self):
        """Dimension of the space with zero normal trace on the boundary."""
        return int(self.free.sum())

    def zeros(self):
        return np.zeros(self.n_full)

    def gather(self, x):
        """Element-local coefficients, shape (T, n_local)."""
        return x[self.l2g] * self.lsign

    def scatter(self, y):
        """Adjoint of :meth:`gather`: sum element contributions into a vector."""
        return np.bincount(self.l2g.ravel(), weights=(y * self.lsign).ravel(),
                           minlength=self.n_full)

    def edge_dof(self, e, m=0):
        return e * (self.p + 1) + m

    # -- evaluation ----------------------------------------------------
    def evaluate(self, x, triangle, ref_point):
        """Value of the field at a reference point of one triangle.

        ``ref_point`` is either (xi, eta) or barycentric (l0, l1, l2).
        """
        t = int(triangle)
        if not 0 <= t < self.mesh.n_triangles:
            raise IndexError("invalid triangle id")
        pt = np.asarray(ref_point, dtype=float)
        if pt.size == 3:
            pt = pt[1:]
        vals, _ = self.ref.eval(pt[None, :])
        x0, B = self.mesh.jacobians()
        c = self.gather(x)[t]
        vhat = c @ vals[:, 0, :]
        return B[t] @ vhat / np.linalg.det(B[t])

    def evaluate_all(self, x, ref_pts):
        """Values (T, nq, 2) and divergences (T, nq) at mapped reference points."""
        vals, div = self.ref.eval(ref_pts)
        _, B = self.mesh.jacobians()
        det = np.linalg.det(B)
        c = self.gather(x)
        vhat = np.einsum("ti,iqd->tqd", c, vals)
        v = np.einsum("tij,tqj->tqi", B, vhat) / det[:, None, None]
        return v, (c @ div) / det[:, None]

    def divergence_coeffs(self, x):
        """Coefficients (T, n_p) of div x in the pressure basis."""
        from .basis import reference_tensors
        _, D = reference_tensors(self.p)
        _, B = self.mesh.jacobians()
        det = np.linalg.det(B)
        return (self.gather(x) @ D.T) / det[:, None]


class PressureSpace:
    """Elementwise P_p with the reference-orthonormal Dubiner basis.

    The physical basis is ``w_k = hat w_k o F_K^{-1}``; the element mass is
    ``det(B_K) I``.  The zero-mean condition is imposed at solve time.
    """

    def __init__(self, mesh, p):
        self.mesh = mesh
        self.p = p
        self.n_local = scalar_dim(p)
        self.dim = mesh.n_triangles * self.n_local
        _, B = mesh.jacobians()
        self.det = np.linalg.det(B)

    def mean_weights(self):
        """(w_k, 1) for every basis function, shape (T, n_local)."""
        out = np.zeros((self.mesh.n_triangles, self.n_local))
        out[:, 0] = self.det / np.sqrt(2.0)
        return out

    def project(self, f, order=None):
        """L2 projection coefficients of a callable f(x, y)."""
        quad = gauss_triangle(order or 2 * self.p + 4)
        w = dubiner(self.p, quad.points)
        x0, B = self.mesh.jacobians()
        X = x0[:, None, :] + np.einsum("tij,qj->tqi", B, quad.points)
        fv = f(X[..., 0], X[..., 1])
        return (fv * quad.weights) @ w.T

    def evaluate_all(self, c, ref_pts):
        return c @ dubiner(self.p, ref_pts)


# ----------------------------------------------------------------------
# prolongation between nested levels
def _child_maps(coarse, fine, parent):
    """Affine maps xi_parent = T xi_child + t for every fine triangle."""
    x0c, Bc = coarse.jacobians()
    x0f, Bf = fine.jacobians()
    Binv = np.linalg.inv(Bc[parent])
    T = np.einsum("tij,tjk->tik", Binv, Bf)
    t = np.einsum("tij,tj->ti", Binv, x0f - x0c[parent])
    return T, t


def _pattern_groups(T, t):
    """Group children by their position in the parent.

    Returns exact (T, t) of one representative per group and the group index
    of every child.
    """
    key = np.round(np.concatenate([T.reshape(len(T), -1), t], axis=1) * 2**30)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    reps = np.concatenate([T.reshape(len(T), -1), t], axis=1)[first]
    return reps, inv.ravel()


def rt_transfer_local(pc, pf, T, t):
    """Fine local DOFs of the coarse basis restricted to a child.

    Returns L with ``L[i, j] = dof_i^child(phi_j^parent)``.
    """
    rc, rf = rt_reference(pc), rt_reference(pf)
    detT = np.linalg.det(T)
    Tinv = np.linalg.inv(T)

    def pulled(pts):
        vals, _ = rc.eval(pts @ T.T + t)
        return detT * np.einsum("ij,kqj->kqi", Tinv, vals)

    rows = []
    eq = gauss_interval(2 * pf + 6)
    for k in range(3):
        a, b, length, n = edge_geometry(k)
        pts = a[None, :] + eq.points[:, None] * (b - a)[None, :]
        vn = pulled(pts) @ n
        for m in range(pf + 1):
            leg = eval_legendre(m, 2.0 * eq.points - 1.0)
            rows.append(vn @ (eq.weights * leg * length))
    if pf >= 1:
        tq = gauss_triangle(2 * pf + 4)
        vals = pulled(tq.points)
        q = dubiner(pf - 1, tq.points)
        for comp in range(2):
            for m in range(q.shape[0]):
                rows.append(vals[:, :, comp] @ (tq.weights * q[m]))
    L = np.array(rows)
    L[np.abs(L) < 1e-13] = 0.0
    return L


def pressure_transfer_local(pc, pf, T, t):
    tq = gauss_triangle(pc + pf + 2)
    wf = dubiner(pf, tq.points)
    wc = dubiner(pc, tq.points @ T.T + t)
    Q = (wf * tq.weights) @ wc.T
    Q[np.abs(Q) < 1e-13] = 0.0
    return Q


def prolongation(space_c, space_f, parent):
    """Sparse matrix mapping coarse to fine coefficients of the same field.

    Rows of fine boundary DOFs and columns of coarse boundary DOFs are
    dropped (set to zero), so the operator maps ``V_{j-1} n H_0(div)`` into
    ``V_j n H_0(div)``.
    """
    coarse, fine = space_c.mesh, space_f.mesh
    T, t = _child_maps(coarse, fine, parent)
    pats, inv = _pattern_groups(T, t)
    nlf, nlc = space_f.n_local, space_c.n_local
    ne_f = space_f.n_local_edge
    # fine element owning each of its local DOFs
    owner = np.ones((fine.n_triangles, nlf), dtype=bool)
    first = fine.edge_elems[fine.el_edges, 0] == np.arange(fine.n_triangles)[:, None]
    owner[:, :ne_f] = np.repeat(first, space_f.n_edge, axis=1)
    rows, cols, vals = [], [], []
    for g, key in enumerate(pats):
        els = np.flatnonzero(inv == g)
        L = rt_transfer_local(space_c.p, space_f.p, key[:4].reshape(2, 2), key[4:])
        par = parent[els]
        own = owner[els]
        ei, li = np.nonzero(own)
        # entries: fine (els[ei], li) x coarse (par[ei], j)
        Lrow = L[li]  # (n, nlc)
        v = space_f.lsign[els[ei], li][:, None] * Lrow * space_c.lsign[par[ei]]
        r = np.repeat(space_f.l2g[els[ei], li][:, None], nlc, axis=1)
        c = space_c.l2g[par[ei]]
        nz = v != 0.0
        rows.append(r[nz]); cols.append(c[nz]); vals.append(v[nz])
    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(space_f.n_full, space_c.n_full))
    P = sp.diags(space_f.free.astype(float)) @ P @ sp.diags(space_c.free.astype(float))
    P.eliminate_zeros()
    return P.tocsr()


def pressure_prolongation(wspace_c, wspace_f, parent):
    coarse, fine = wspace_c.mesh, wspace_f.mesh
    T, t = _child_maps(coarse, fine, parent)
    pats, inv = _pattern_groups(T, t)
    nf, nc = wspace_f.n_local, wspace_c.n_local
    rows, cols, vals = [], [], []
    for g, key in enumerate(pats):
        els = np.flatnonzero(inv == g)
        Q = pressure_transfer_local(wspace_c.p, wspace_f.p, key[:4].reshape(2, 2), key[4:])
        i, j = np.nonzero(Q)
        rows.append((els[:, None] * nf + i[None, :]).ravel())
        cols.append((parent[els][:, None] * nc + j[None, :]).ravel())
        vals.append(np.tile(Q[i, j], len(els)))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(wspace_f.dim, wspace_c.dim))


def build_rt_space(mesh, p):
    return RtSpace(mesh, p)


def build_pressure_space(mesh, p):
    return PressureSpace(mesh, p)


def boundary_flux_dofs(space, g, order=None):
    """Edge moments of boundary data ``g(x, y, n)`` (normal flux) on boundary edges.

    Returns a full-numbering vector that is zero except on boundary edges.
    """
    mesh = space.mesh
    p = space.p
    x = np.zeros(space.n_full)
    bnd = np.flatnonzero(mesh.boundary_edges)
    if bnd.size == 0:
        return x
    q = gauss_interval(order or 2 * p + 16)
    a = mesh.coords[mesh.edges[bnd, 0]]
    b = mesh.coords[mesh.edges[bnd, 1]]
    tvec = b - a
    length = np.linalg.norm(tvec, axis=1)
    n = np.column_stack([tvec[:, 1], -tvec[:, 0]]) / length[:, None]
    pts = a[:, None, :] + q.points[None, :, None] * tvec[:, None, :]
    gv = g(pts[..., 0], pts[..., 1], n[:, None, :])
    for m in range(p + 1):
        leg = eval_legendre(m, 2.0 * q.points - 1.0)
        x[bnd * (p + 1) + m] = (gv * (q.weights * leg)[None, :]).sum(axis=1) * length
    return x
