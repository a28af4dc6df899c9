"""Weighted mass, divergence coupling and load vectors.

With the Piola map ``phi = B hat(phi) / det B`` the element mass matrix is
``M_K = sum_ab G_K[a, b] R[a, b]`` where ``G_K = B^T A_K^{-1} B / det B`` and
``R`` holds reference integrals.  ``G_K`` is invariant under rotation and
scaling of the element, so elements are grouped into *classes* sharing one
local matrix; on dyadic meshes the grouping is exact.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .basis import dubiner, reference_tensors
from .quadrature import gauss_triangle, duffy_triangle


class AssemblyError(ValueError):
    pass


@dataclass
class DiffusionField:
    """Piecewise constant SPD tensor, one 2x2 block per triangle."""
    A: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        if self.A.ndim != 3 or self.A.shape[1:] != (2, 2):
            raise AssemblyError("diffusion must have shape (T, 2, 2)")
        if not np.allclose(self.A, self.A.transpose(0, 2, 1), rtol=1e-14, atol=0):
            raise AssemblyError("diffusion tensor not symmetric")
        ev = np.linalg.eigvalsh(self.A)
        if ev.min() <= 0:
            raise AssemblyError("diffusion tensor not positive definite")
        self.lam_min = float(ev.min())
        self.lam_max = float(ev.max())

    @classmethod
    def scalar(cls, values):
        v = np.asarray(values, dtype=float)
        return cls(v[:, None, None] * np.eye(2)[None])

    @classmethod
    def identity(cls, n):
        return cls.scalar(np.ones(n))

    def inverse(self):
        return np.linalg.inv(self.A)


def element_G(mesh, diffusion):
    _, B = mesh.jacobians()
    det = np.linalg.det(B)
    G = np.einsum("tji,tjk,tkl->til", B, diffusion.inverse(), B) / det[:, None, None]
    return 0.5 * (G + G.transpose(0, 2, 1))


class ElementClasses:
    """Elements grouped by identical local mass matrices.

    Attributes
    ----------
    cls : (T,) int
        Class of each element.
    M : (ncls, n, n)
        Local mass matrix per class (reference DOF order, local signs).
    members : list of arrays
        Elements of each class.
    """

    def __init__(self, space, diffusion):
        self.space = space
        mesh = space.mesh
        if len(diffusion.A) != mesh.n_triangles:
            raise AssemblyError("diffusion size does not match mesh")
        G = element_G(mesh, diffusion)
        keys = np.ascontiguousarray(G.reshape(len(G), 4))
        _, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        self.cls = inv.ravel()
        self.G = G[first]
        self.n_classes = len(first)
        R, D = reference_tensors(space.p)
        self.R = R
        self.D = D
        self.M = np.einsum("cab,abij->cij", self.G, R)
        self.M = 0.5 * (self.M + self.M.transpose(0, 2, 1))
        order = np.argsort(self.cls, kind="stable")
        counts = np.bincount(self.cls, minlength=self.n_classes)
        self.members = np.split(order, np.cumsum(counts)[:-1])

    def apply_local(self, X):
        """Local products M_K x_K for X of shape (T, n)."""
        Y = np.empty_like(X)
        for c, els in enumerate(self.members):
            Y[els] = X[els] @ self.M[c]
        return Y

    def mass_apply(self, x):
        sp_ = self.space
        return sp_.scatter(self.apply_local(sp_.gather(x)))

    def energy_local(self, X):
        """x_K^T M_K x_K for every element."""
        return np.einsum("ti,ti->t", X, self.apply_local(X))

    def energy_local_subset(self, els, Z):
        """z^T M_K z for local vectors ``Z`` of elements ``els``."""
        cls = self.cls[els]
        out = np.empty(len(els))
        for c in np.unique(cls):
            sel = cls == c
            out[sel] = np.einsum("ti,ti->t", Z[sel], Z[sel] @ self.M[c])
        return out

    def energy(self, x):
        return float(self.energy_local(self.space.gather(x)).sum())


def assemble_mass(space, classes):
    """Sparse weighted mass matrix in the full numbering."""
    T, n = space.l2g.shape
    loc = classes.M[classes.cls] * space.lsign[:, :, None] * space.lsign[:, None, :]
    rows = np.repeat(space.l2g[:, :, None], n, axis=2)
    cols = np.repeat(space.l2g[:, None, :], n, axis=1)
    M = sp.coo_matrix((loc.ravel(), (rows.ravel(), cols.ravel())),
                      shape=(space.n_full, space.n_full)).tocsr()
    M.sum_duplicates()
    return M


def assemble_divergence(space, wspace):
    """Sparse B with B[(t, k), i] = (div phi_i, w_k)_t."""
    _, D = reference_tensors(space.p)
    npl = wspace.n_local
    T, n = space.l2g.shape
    loc = D[None, :, :] * space.lsign[:, None, :]
    rows = np.repeat((np.arange(T)[:, None] * npl + np.arange(npl)[None, :])[:, :, None], n, axis=2)
    cols = np.repeat(space.l2g[:, None, :], npl, axis=1)
    B = sp.coo_matrix((loc.ravel(), (rows.ravel(), cols.ravel())),
                      shape=(wspace.dim, space.n_full)).tocsr()
    B.eliminate_zeros()
    return B


def divergence_apply(space, x):
    """(div x, w_k)_t as an array of shape (T, n_p)."""
    _, D = reference_tensors(space.p)
    return space.gather(x) @ D.T


def divergence_adjoint(space, q):
    """Adjoint of :func:`divergence_apply`: full-numbering vector."""
    _, D = reference_tensors(space.p)
    return space.scatter(q @ D)


def precise_residual(space, classes, load, x, pi=None):
    """``load - M x - B^T pi`` accumulated in extended precision.

    The three terms are each of the size of the solution while their
    difference is of the size of the algebraic residual, so the sum is
    formed in ``np.longdouble`` before rounding back to double.
    """
    ld = np.longdouble
    X = (x[space.l2g] * space.lsign).astype(ld)
    Y = np.empty_like(X)
    for c, els in enumerate(classes.members):
        Y[els] = X[els] @ classes.M[c].astype(ld)
    if pi is not None:
        _, D = reference_tensors(space.p)
        Y += np.asarray(pi, dtype=ld) @ D.astype(ld)
    out = np.asarray(load, dtype=ld).copy()
    np.subtract.at(out, space.l2g.ravel(), (Y * space.lsign).ravel())
    return out.astype(float)


@dataclass
class SparseSystem:
    """Assembled mixed system in the full velocity numbering."""
    mass: sp.csr_matrix
    div: sp.csr_matrix
    rhs_f: np.ndarray          # (T * n_p,) load (f, w_k)
    free: np.ndarray           # velocity DOFs not on the boundary
    mean: np.ndarray           # (w_k, 1) for the zero-mean row
    space: object = None
    wspace: object = None


# ----------------------------------------------------------------------
# quadrature on elements
def element_quadrature(mesh, order, refine=None, singular_point=None, max_depth=14):
    """Physical quadrature points and weights for every element.

    Parameters
    ----------
    refine : callable or None
        ``refine(P)`` with ``P`` of shape (n, 3, 2) sub-triangle vertices
        returns a boolean mask of sub-triangles to split further.
    singular_point : (2,) or None
        Sub-triangles having this point as a vertex use a rule collapsed at
        that vertex, which integrates ``1/r`` singularities accurately.

    Returns
    -------
    owner : (nq,) element index of every point
    X : (nq, 2) points
    W : (nq,) weights
    """
    P = mesh.coords[mesh.tris]
    owner = np.arange(mesh.n_triangles)
    done_P, done_o = [], []
    for _ in range(max_depth):
        if refine is None or len(P) == 0:
            break
        split = np.asarray(refine(P), dtype=bool)
        done_P.append(P[~split]); done_o.append(owner[~split])
        if not split.any():
            P, owner = P[:0], owner[:0]
            break
        S, o = P[split], owner[split]
        m0 = 0.5 * (S[:, 1] + S[:, 2]); m1 = 0.5 * (S[:, 2] + S[:, 0]); m2 = 0.5 * (S[:, 0] + S[:, 1])
        P = np.concatenate([
            np.stack([S[:, 0], m2, m1], 1), np.stack([S[:, 1], m0, m2], 1),
            np.stack([S[:, 2], m1, m0], 1), np.stack([m0, m1, m2], 1)])
        owner = np.tile(o, 4)
    done_P.append(P); done_o.append(owner)
    P = np.concatenate(done_P)
    owner = np.concatenate(done_o)
    quad = gauss_triangle(order)
    if singular_point is not None:
        d = np.linalg.norm(P - np.asarray(singular_point)[None, None, :], axis=2)
        hit = d.min(axis=1) < 1e-14 * max(1.0, np.abs(P).max())
    else:
        hit = np.zeros(len(P), dtype=bool)
    Xs, Ws, Os = [], [], []
    reg = ~hit
    if reg.any():
        Pr = P[reg]
        B = np.stack([Pr[:, 1] - Pr[:, 0], Pr[:, 2] - Pr[:, 0]], axis=2)
        det = np.abs(np.linalg.det(B))
        Xs.append((Pr[:, 0][:, None, :] + np.einsum("tij,qj->tqi", B, quad.points)).reshape(-1, 2))
        Ws.append((det[:, None] * quad.weights[None, :]).ravel())
        Os.append(np.repeat(owner[reg], len(quad)))
    if hit.any():
        dq = duffy_triangle(order + 2, radial_points=max(order, 12))
        Ph = P[hit]
        d = np.linalg.norm(Ph - np.asarray(singular_point)[None, None, :], axis=2)
        k = d.argmin(axis=1)
        idx = (k[:, None] + np.arange(3)[None, :]) % 3
        Ph = np.take_along_axis(Ph, idx[:, :, None], axis=1)
        B = np.stack([Ph[:, 1] - Ph[:, 0], Ph[:, 2] - Ph[:, 0]], axis=2)
        det = np.abs(np.linalg.det(B))
        Xs.append((Ph[:, 0][:, None, :] + np.einsum("tij,qj->tqi", B, dq.points)).reshape(-1, 2))
        Ws.append((det[:, None] * dq.weights[None, :]).ravel())
        Os.append(np.repeat(owner[hit], len(dq)))
    return np.concatenate(Os), np.concatenate(Xs), np.concatenate(Ws)


def reference_coords(mesh, owner, X):
    x0, B = mesh.jacobians()
    Binv = np.linalg.inv(B)
    return np.einsum("nij,nj->ni", Binv[owner], X - x0[owner])


def load_vector(wspace, f, order=None, refine=None, singular_point=None):
    """(f, w_k)_t for every element, shape (T, n_p)."""
    mesh = wspace.mesh
    owner, X, W = element_quadrature(mesh, order or 2 * wspace.p + 6, refine, singular_point)
    xi = reference_coords(mesh, owner, X)
    w = dubiner(wspace.p, xi)  # (n_p, nq)
    fv = f(X[:, 0], X[:, 1]) * W
    out = np.zeros((mesh.n_triangles, wspace.n_local))
    for k in range(wspace.n_local):
        out[:, k] = np.bincount(owner, weights=fv * w[k], minlength=mesh.n_triangles)
    return out


def assemble_global(space, wspace, diffusion, f=None, order=None):
    classes = ElementClasses(space, diffusion)
    M = assemble_mass(space, classes)
    B = assemble_divergence(space, wspace)
    if f is None:
        rhs = np.zeros(wspace.dim)
    else:
        rhs = load_vector(wspace, f, order).ravel()
    return SparseSystem(M, B, rhs, space.free.copy(), wspace.mean_weights().ravel(), space, wspace)


def assemble_patch(system, patch):
    """Dense patch system with zero normal flux on the patch boundary.

    Returns ``(M_loc, B_loc, vdofs, wdofs)`` where the local velocity DOFs
    are the spoke-edge DOFs and interior DOFs of the patch triangles and the
    local pressure DOFs are all pressure DOFs of the patch triangles.
    """
    space, wspace = system.space, system.wspace
    tris = np.asarray(patch.triangle_ids)
    if tris.size == 0:
        raise AssemblyError("empty patch")
    p = space.p
    edofs = (np.asarray(patch.interior_edge_ids)[:, None] * (p + 1) + np.arange(p + 1)[None, :]).ravel()
    bdofs = space.l2g[tris, space.n_local_edge:].ravel()
    vdofs = np.concatenate([edofs, bdofs]).astype(np.int64)
    wdofs = (tris[:, None] * wspace.n_local + np.arange(wspace.n_local)[None, :]).ravel()
    Ml = system.mass[vdofs][:, vdofs].toarray()
    Bl = system.div[wdofs][:, vdofs].toarray()
    return Ml, Bl, vdofs, wdofs
