"""Independent reference computations used by the tests.

Nothing here calls the package's assembly or solver code.  The lowest
order mixed system is rebuilt from the classical closed-form basis, local
corrections are recomputed through an explicit null-space basis, and the
analytic data are checked with finite differences.
"""

import itertools
from math import factorial

import numpy as np
import scipy.linalg as sla


def monomial_integral(a, b):
    """Exact integral of x^a y^b over the triangle (0,0), (1,0), (0,1)."""
    return factorial(a) * factorial(b) / factorial(a + b + 2)


def doerfler_min_cardinality(errors, theta):
    """Smallest k such that some k-subset carries theta of the squared error."""
    sq = np.asarray(errors, dtype=float) ** 2
    total = sq.sum()
    n = len(sq)
    for k in range(1, n + 1):
        for sub in itertools.combinations(range(n), k):
            if sq[list(sub)].sum() >= theta * total:
                return k
    return n


def _cross(a, b):
    return a[0] * b[1] - a[1] * b[0]


# ----------------------------------------------------------------------
# lowest order Raviart-Thomas, classical form
def _edges(tris):
    edges = {}
    for t, (a, b, c) in enumerate(tris):
        for u, v in ((b, c), (c, a), (a, b)):
            key = (min(u, v), max(u, v))
            edges.setdefault(key, []).append(t)
    keys = sorted(edges)
    return keys, [edges[k] for k in keys]


def rt0_matrices(coords, tris, coeff=None):
    """Mass and divergence matrices of the classical lowest order pair.

    Basis on K for the edge opposite vertex P: ``s / (2|K|) (x - P)``
    with unit flux through the edge along the normal obtained by rotating the
    tangent (low id -> high id) clockwise; ``s`` is +1 when that normal points
    out of K.  ``coeff`` is the scalar diffusion per element (default 1).

    Returns (edges as sorted vertex pairs, owners per edge, M, B, areas).
    """
    coords = np.asarray(coords, dtype=float)
    keys, owners = _edges(tris)
    index = {k: i for i, k in enumerate(keys)}
    E, T = len(keys), len(tris)
    M = np.zeros((E, E))
    B = np.zeros((T, E))
    area = np.zeros(T)
    acoef = np.ones(T) if coeff is None else np.asarray(coeff, dtype=float)
    for t, tri in enumerate(tris):
        P = coords[list(tri)]
        area[t] = 0.5 * abs(_cross(P[1] - P[0], P[2] - P[0]))
        mids = [0.5 * (P[i] + P[(i + 1) % 3]) for i in range(3)]
        loc = []
        for k in range(3):
            u, v = tri[(k + 1) % 3], tri[(k + 2) % 3]
            key = (min(u, v), max(u, v))
            a, b = coords[key[0]], coords[key[1]]
            tv = b - a
            n = np.array([tv[1], -tv[0]]) / np.linalg.norm(tv)
            out = np.dot(n, 0.5 * (a + b) - P[k]) > 0
            s = 1.0 if out else -1.0
            loc.append((index[key], s, P[k]))
        for (i, si, Pi), (j, sj, Pj) in itertools.product(loc, loc):
            # edge-midpoint rule is exact for the quadratic integrand
            val = sum(np.dot(m - Pi, m - Pj) for m in mids) * area[t] / 3.0
            M[i, j] += si * sj / (4 * area[t] ** 2) * val / acoef[t]
        for i, si, _ in loc:
            B[t, i] += si
    return keys, owners, M, B, area


def rt0_mixed_solve(coords, tris, source, flux=None, coeff=None):
    """Dense solve of ``u + a grad p = 0, div u = f`` with ``u.n = flux``.

    Uses :func:`rt0_matrices`.  Returns the edge fluxes (ordered by sorted
    vertex pairs) and the elementwise pressures with zero mean.
    """
    coords = np.asarray(coords, dtype=float)
    keys, owners, M, B, area = rt0_matrices(coords, tris, coeff)
    T = len(tris)
    E = len(keys)
    rhs_w = np.array([_tri_integral(source, coords[list(tri)]) for tri in tris])
    bnd = np.array([len(o) == 1 for o in owners])
    g = np.zeros(E)
    if flux is not None:
        for i, k in enumerate(keys):
            if bnd[i]:
                a, b = coords[k[0]], coords[k[1]]
                tv = b - a
                n = np.array([tv[1], -tv[0]]) / np.linalg.norm(tv)
                g[i] = _edge_integral(lambda x, y: flux(x, y, n), a, b)
    free = ~bnd
    rv = -(M @ g)[free]
    rw = rhs_w - B @ g
    rw -= area * rw.sum() / area.sum()
    Mf, Bf = M[np.ix_(free, free)], B[:, free]
    nf = Mf.shape[0]
    K = np.zeros((nf + T + 1, nf + T + 1))
    K[:nf, :nf] = Mf
    K[:nf, nf:nf + T] = -Bf.T
    K[nf:nf + T, :nf] = Bf
    K[nf:nf + T, -1] = area
    K[-1, nf:nf + T] = area
    x = np.linalg.solve(K, np.concatenate([rv, rw, [0.0]]))
    u = g.copy()
    u[free] += x[:nf]
    p = x[nf:nf + T]
    return keys, u, p


def _tri_integral(f, P, levels=3):
    """Composite midpoint-subdivision rule; accurate enough for smooth data."""
    tris = [P]
    for _ in range(levels):
        nxt = []
        for Q in tris:
            m = [0.5 * (Q[i] + Q[(i + 1) % 3]) for i in range(3)]
            nxt += [np.array([Q[0], m[0], m[2]]), np.array([m[0], Q[1], m[1]]),
                    np.array([m[2], m[1], Q[2]]), np.array(m)]
        tris = nxt
    from numpy.polynomial.legendre import leggauss
    t, w = leggauss(6)
    u = 0.5 * (t + 1)
    out = 0.0
    for Q in tris:
        A = 0.5 * abs(_cross(Q[1] - Q[0], Q[2] - Q[0]))
        for ui, wi in zip(u, w):
            for vj, wj in zip(u, w):
                x, y = ui * (1 - vj), vj
                pt = Q[0] + x * (Q[1] - Q[0]) + y * (Q[2] - Q[0])
                out += 0.25 * wi * wj * (1 - vj) * 2 * A * f(pt[0], pt[1])
    return out


def _edge_integral(f, a, b, n=12):
    from numpy.polynomial.legendre import leggauss
    t, w = leggauss(n)
    s = 0.5 * (t + 1)
    pts = a[None, :] + s[:, None] * (b - a)[None, :]
    return 0.5 * np.linalg.norm(b - a) * float(np.sum(w * f(pts[:, 0], pts[:, 1])))


# ----------------------------------------------------------------------
def null_space_correction(M, B, r):
    """argmin over ker B of 0.5 v'Mv - r'v, with an explicit basis of ker B."""
    Z = sla.null_space(np.atleast_2d(B), rcond=1e-12)
    if Z.shape[1] == 0:
        return np.zeros(M.shape[0])
    return Z @ np.linalg.solve(Z.T @ M @ Z, Z.T @ r)


def piola_fit(space, field, n_pts=None):
    """RT coefficients of a vector field by elementwise least squares.

    Samples ``field`` at interior points of every element, fits the local
    coefficients against the Piola-mapped basis and scatters them into the
    global numbering.  Exact whenever the field lies in the space.
    """
    mesh = space.mesh
    ref = space.ref
    k = n_pts or 3 * space.n_local
    rng = np.random.default_rng(7)
    xi = rng.random((k, 2))
    xi = np.where(xi.sum(axis=1, keepdims=True) > 1, 1 - xi, xi)
    vals, _ = ref.eval(xi)
    x0, Bm = mesh.jacobians()
    det = np.linalg.det(Bm)
    out = np.zeros(space.n_full)
    for t in range(mesh.n_triangles):
        phys = np.einsum("ij,ndj->ndi", Bm[t], vals) / det[t]  # (n, k, 2)
        X = x0[t] + xi @ Bm[t].T
        fx, fy = field(X[:, 0], X[:, 1])
        A = phys.reshape(len(phys), -1).T
        c, *_ = np.linalg.lstsq(A, np.column_stack([fx, fy]).ravel(), rcond=None)
        out[space.l2g[t]] = c * space.lsign[t]
    return out


def central_gradient(f, x, y, h=1e-5):
    return ((f(x + h, y) - f(x - h, y)) / (2 * h), (f(x, y + h) - f(x, y - h)) / (2 * h))


def central_laplacian(f, x, y, h=1e-4):
    return (f(x + h, y) + f(x - h, y) + f(x, y + h) + f(x, y - h) - 4 * f(x, y)) / h ** 2
