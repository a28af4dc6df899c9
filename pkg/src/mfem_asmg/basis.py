"""Reference-element bases.

Scalar polynomials use the orthonormal Dubiner basis on the reference
triangle (vertices (0,0), (1,0), (0,1)), ordered hierarchically by total
degree.  The Raviart-Thomas element of degree p carries

* ``p + 1`` normal moments per edge against Legendre polynomials in the edge
  parameter, ``dof_{k,m}(v) = int_e v.n P_m(2s - 1) ds``;
* ``p (p + 1)`` interior moments against an orthonormal basis of
  ``[P_{p-1}]^2``.

Local edge ``k`` is opposite local vertex ``k`` and is traversed from vertex
``k+1`` to vertex ``k+2`` (indices mod 3), which for a counter-clockwise
triangle puts the outward normal on the right of the tangent.
"""

from functools import lru_cache

import numpy as np
from scipy.special import eval_jacobi, eval_legendre

from .quadrature import gauss_interval, gauss_triangle

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def scalar_dim(p):
    return (p + 1) * (p + 2) // 2 if p >= 0 else 0


def dubiner_indices(p):
    """(i, j) pairs ordered by total degree, then by j."""
    return [(d - j, j) for d in range(p + 1) for j in range(d + 1)]


def _jacobi_deriv(n, alpha, beta, x):
    if n == 0:
        return np.zeros_like(x)
    return 0.5 * (n + alpha + beta + 1) * eval_jacobi(n - 1, alpha + 1, beta + 1, x)


@lru_cache(maxsize=None)
def _dubiner_norms(p):
    quad = gauss_triangle(2 * p + 2)
    vals = _dubiner_raw(p, quad.points)[0]
    return 1.0 / np.sqrt(vals**2 @ quad.weights)


def _dubiner_raw(p, pts, grad=False):
    x = np.asarray(pts[:, 0], dtype=float)
    y = np.asarray(pts[:, 1], dtype=float)
    xi = 2.0 * x - 1.0
    eta = 2.0 * y - 1.0
    one_m_b = 1.0 - eta
    safe = np.abs(one_m_b) > 1e-14
    a = np.where(safe, 2.0 * (1.0 + xi) / np.where(safe, one_m_b, 1.0) - 1.0, -1.0)
    b = eta
    half = 0.5 * one_m_b
    idx = dubiner_indices(p)
    vals = np.empty((len(idx), len(x)))
    grads = np.empty((len(idx), len(x), 2)) if grad else None
    for n, (i, j) in enumerate(idx):
        pa = eval_legendre(i, a)
        pb = eval_jacobi(j, 2 * i + 1, 0, b)
        vals[n] = pa * half**i * pb
        if grad:
            dpa = _jacobi_deriv(i, 0, 0, a)
            dpb = _jacobi_deriv(j, 2 * i + 1, 0, b)
            hm1 = half ** (i - 1) if i >= 1 else np.zeros_like(x)
            d_xi = dpa * hm1 * pb
            d_eta = (0.5 * (1.0 + a) * dpa * hm1 * pb
                     + pa * (-0.5 * i * hm1 * pb + half**i * dpb))
            # d/dx = 2 d/dxi, d/dy = 2 d/deta
            grads[n, :, 0] = 2.0 * d_xi
            grads[n, :, 1] = 2.0 * d_eta
    return vals, grads


def dubiner(p, pts):
    """Orthonormal P_p basis values, shape (dim, npts)."""
    if p < 0:
        return np.zeros((0, len(pts)))
    vals, _ = _dubiner_raw(p, np.asarray(pts, dtype=float))
    return vals * _dubiner_norms(p)[:, None]


def dubiner_grad(p, pts):
    """Values (dim, npts) and gradients (dim, npts, 2) of the P_p basis."""
    vals, grads = _dubiner_raw(p, np.asarray(pts, dtype=float), grad=True)
    s = _dubiner_norms(p)
    return vals * s[:, None], grads * s[:, None, None]


def edge_geometry(k):
    """Start point, end point, length and outward unit normal of local edge k."""
    a = REF_VERTICES[(k + 1) % 3]
    b = REF_VERTICES[(k + 2) % 3]
    t = b - a
    length = float(np.hypot(*t))
    n = np.array([t[1], -t[0]]) / length
    return a, b, length, n


class RTReference:
    """Nodal Raviart-Thomas basis of degree p on the reference triangle.

    Local DOF order: edge 0 modes 0..p, edge 1, edge 2, then interior
    moments (all x-components first).
    """

    def __init__(self, p):
        if p < 0:
            raise ValueError("degree must be nonnegative")
        self.p = p
        self.n_edge = p + 1
        self.n_bubble = p * (p + 1)
        self.ndofs = (p + 1) * (p + 3)
        self.n_edge_total = 3 * (p + 1)
        self._top = np.arange(scalar_dim(p - 1), scalar_dim(p))
        dof = self._dof_matrix()
        self.dof_condition = np.linalg.cond(dof)
        # columns: nodal basis expressed in the spanning set
        self.coeffs = np.linalg.solve(dof, np.eye(self.ndofs))

    # -- spanning set [P_p]^2 + (x - c) * (degree-p part of P_p)
    def _span(self, pts):
        pts = np.asarray(pts, dtype=float)
        psi, dpsi = dubiner_grad(self.p, pts)
        nP = psi.shape[0]
        xc = pts - 1.0 / 3.0
        top = self._top
        ns = 2 * nP + len(top)
        vals = np.zeros((ns, len(pts), 2))
        div = np.zeros((ns, len(pts)))
        vals[:nP, :, 0] = psi
        div[:nP] = dpsi[:, :, 0]
        vals[nP:2 * nP, :, 1] = psi
        div[nP:2 * nP] = dpsi[:, :, 1]
        vals[2 * nP:] = psi[top][:, :, None] * xc[None, :, :]
        div[2 * nP:] = 2.0 * psi[top] + np.einsum("knd,nd->kn", dpsi[top], xc)
        return vals, div

    def _dof_matrix(self):
        p = self.p
        rows = []
        eq = gauss_interval(2 * p + 4)
        for k in range(3):
            a, b, length, n = edge_geometry(k)
            pts = a[None, :] + eq.points[:, None] * (b - a)[None, :]
            vals, _ = self._span(pts)
            vn = vals @ n  # (ns, nq)
            for m in range(p + 1):
                leg = eval_legendre(m, 2.0 * eq.points - 1.0)
                rows.append(vn @ (eq.weights * leg * length))
        if p >= 1:
            tq = gauss_triangle(2 * p + 2)
            vals, _ = self._span(tq.points)
            q = dubiner(p - 1, tq.points)
            for comp in range(2):
                for m in range(q.shape[0]):
                    rows.append(vals[:, :, comp] @ (tq.weights * q[m]))
        return np.array(rows)

    def eval(self, pts):
        """Basis values (ndofs, npts, 2) and divergences (ndofs, npts)."""
        vals, div = self._span(pts)
        return (np.einsum("ki,knd->ind", self.coeffs, vals),
                self.coeffs.T @ div)

    def edge_dof_functionals(self, k, npts_order=None):
        """Quadrature data to apply the edge-k moments to a sampled field.

        Returns (points, matrix W) with dof_{k,m}(v) = sum_q W[m, q] (v(x_q) . n).
        """
        a, b, length, n = edge_geometry(k)
        eq = gauss_interval(npts_order or 2 * self.p + 4)
        pts = a[None, :] + eq.points[:, None] * (b - a)[None, :]
        W = np.array([eq.weights * eval_legendre(m, 2.0 * eq.points - 1.0) * length
                      for m in range(self.p + 1)])
        return pts, n, W


@lru_cache(maxsize=None)
def rt_reference(p):
    return RTReference(p)


@lru_cache(maxsize=None)
def reference_tensors(p, order=None):
    """Reference mass tensors and divergence coupling for degree p.

    Returns ``R`` with ``R[a, b, i, j] = int phi_i^a phi_j^b`` over the
    reference triangle and ``D`` with ``D[k, i] = int div(phi_i) w_k``.
    Physical element mass: ``M_K = sum_ab G[a, b] R[a, b]`` with
    ``G = B^T A^{-1} B / det B``; physical divergence coupling equals ``D``.
    """
    ref = rt_reference(p)
    quad = gauss_triangle(order if order is not None else 2 * p + 2)
    vals, div = ref.eval(quad.points)
    wv = vals * quad.weights[None, :, None]
    R = np.einsum("iqa,jqb->abij", wv, vals)
    w = dubiner(p, quad.points)
    D = (w * quad.weights[None, :]) @ div.T
    D[np.abs(D) < 1e-13] = 0.0
    R.setflags(write=False)
    D.setflags(write=False)
    return R, D
