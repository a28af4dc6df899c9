"""Test cases: smooth, well wavefront and checkerboard (Kellogg).

Each case supplies the exact pressure and velocity ``u = -A grad(gamma)``,
the source ``f = div u``, a piecewise constant scalar diffusion, the
boundary normal flux and the mesh-hierarchy protocol.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import roots_legendre

from .assembly import DiffusionField, element_quadrature, reference_coords
from .mesh_hierarchy import (MeshHierarchy, Refinement, build_initial_mesh, doerfler_mark,
                             nvb_refine, read_mesh, uniform_hierarchy, write_mesh)


@dataclass
class TestCase:
    __test__ = False  # not a pytest class

    name: str
    domain: tuple
    h0: float
    protocol: str                      # "uniform" or "adaptive"
    theta_mark: Optional[float]
    pressure: Callable
    velocity: Callable                 # returns (ux, uy)
    source: Callable
    coeff: Callable                    # scalar diffusion a(x, y), A = a I
    has_boundary_flux: bool = False
    singular_point: Optional[tuple] = None
    quadrature_refine: Optional[Callable] = None
    nvb_mode: str = "newest"
    params: dict = field(default_factory=dict)
    error_order: int = 10

    def diffusion(self, mesh):
        c = mesh.centroids()
        return DiffusionField.scalar(self.coeff(c[:, 0], c[:, 1]))

    def normal_flux(self, x, y, n):
        ux, uy = self.velocity(x, y)
        return ux * n[..., 0] + uy * n[..., 1]

    def coarse_mesh(self):
        return build_initial_mesh(self.domain, self.h0)

    # ------------------------------------------------------------------
    def element_errors(self, space, u_total, diffusion=None):
        """Elementwise ``||A^{-1/2}(u - u_h)||_K`` for a discrete velocity."""
        mesh = space.mesh
        diffusion = diffusion or self.diffusion(mesh)
        sq = _generic_errors_sq(self, space, u_total, diffusion,
                                self.error_order, self.quadrature_refine, self.singular_point)
        return np.sqrt(np.maximum(sq, 0.0))


def _eval_discrete(space, u, owner, X, chunk=200000):
    mesh = space.mesh
    _, B = mesh.jacobians()
    det = np.linalg.det(B)
    C = space.gather(u)
    out = np.empty((len(owner), 2))
    for s in range(0, len(owner), chunk):
        o = owner[s:s + chunk]
        xi = reference_coords(mesh, o, X[s:s + chunk])
        vals, _ = space.ref.eval(xi)          # (n, nq, 2)
        vhat = np.einsum("qi,iqd->qd", C[o], vals)
        out[s:s + chunk] = np.einsum("qij,qj->qi", B[o], vhat) / det[o][:, None]
    return out


def _generic_errors_sq(case, space, u, diffusion, order, refine, singular, exclude=None):
    mesh = space.mesh
    owner, X, W = element_quadrature(mesh, order + 2 * space.p, refine, singular)
    if exclude is not None:
        keep = ~exclude[owner]
        owner, X, W = owner[keep], X[keep], W[keep]
    uh = _eval_discrete(space, u, owner, X)
    ux, uy = case.velocity(X[:, 0], X[:, 1])
    d = np.column_stack([ux, uy]) - uh
    Ainv = diffusion.inverse()[owner]
    val = np.einsum("qi,qij,qj->q", d, Ainv, d) * W
    return np.bincount(owner, weights=val, minlength=mesh.n_triangles)


# ----------------------------------------------------------------------
def smooth_case():
    pi = np.pi

    def pressure(x, y):
        return np.cos(pi * x) * np.cos(pi * y)

    def velocity(x, y):
        return pi * np.sin(pi * x) * np.cos(pi * y), pi * np.cos(pi * x) * np.sin(pi * y)

    def source(x, y):
        return 2 * pi**2 * np.cos(pi * x) * np.cos(pi * y)

    return TestCase("smooth", (0.0, 1.0, 0.0, 1.0), 0.5, "uniform", None,
                    pressure, velocity, source, lambda x, y: np.ones_like(x))


def wavefront_case(alpha=1000.0, xc=0.5, yc=0.5, r0=0.01, theta_mark=0.7):
    def radius(x, y):
        return np.hypot(x - xc, y - yc)

    def dgamma(r):
        return alpha / (1.0 + (alpha * (r - r0))**2)

    def d2gamma(r):
        s = alpha * (r - r0)
        return -2.0 * alpha**3 * (r - r0) / (1.0 + s * s)**2

    def pressure(x, y):
        return np.arctan(alpha * (radius(x, y) - r0))

    def velocity(x, y):
        r = radius(x, y)
        rs = np.where(r > 0, r, 1.0)
        g = np.where(r > 0, dgamma(r) / rs, 0.0)
        return -g * (x - xc), -g * (y - yc)

    def source(x, y):
        # the 1/r term is a genuine singularity at the centre; it is never
        # evaluated there because the centre is a mesh vertex
        r = np.maximum(radius(x, y), 1e-300)
        return -(d2gamma(r) + dgamma(r) / r)

    width = 1.0 / alpha

    def refine(P):
        c = np.array([xc, yc])
        d = np.linalg.norm(P - c, axis=2)
        rmax = d.max(axis=1)
        rmin = _point_triangle_distance(c, P)
        ring = np.where((rmin <= r0) & (r0 <= rmax), 0.0,
                        np.minimum(np.abs(rmin - r0), np.abs(rmax - r0)))
        diam = np.max(np.linalg.norm(P[:, [1, 2, 0]] - P[:, [2, 0, 1]], axis=2), axis=1)
        return diam > 0.5 * np.maximum(ring, width)

    return TestCase("wavefront", (0.0, 1.0, 0.0, 1.0), 0.5, "adaptive", theta_mark,
                    pressure, velocity, source, lambda x, y: np.ones_like(x),
                    has_boundary_flux=True, singular_point=(xc, yc), quadrature_refine=refine,
                    nvb_mode="full", params=dict(alpha=alpha, xc=xc, yc=yc, r0=r0))


def _point_triangle_distance(c, P):
    """Distance from point c to each triangle in P (n, 3, 2); 0 if inside."""
    a, b, d = P[:, 0], P[:, 1], P[:, 2]

    def seg(p, q):
        pq = q - p
        t = np.clip(np.einsum("ni,ni->n", c - p, pq) / np.einsum("ni,ni->n", pq, pq), 0.0, 1.0)
        return np.linalg.norm(p + t[:, None] * pq - c, axis=1)

    dist = np.minimum(np.minimum(seg(a, b), seg(b, d)), seg(d, a))

    def cross(p, q):
        return (q[:, 0] - p[:, 0]) * (c[1] - p[:, 1]) - (q[:, 1] - p[:, 1]) * (c[0] - p[:, 0])

    inside = (cross(a, b) >= 0) & (cross(b, d) >= 0) & (cross(d, a) >= 0)
    return np.where(inside, 0.0, dist)


# ----------------------------------------------------------------------
def kellogg_parameters(gamma):
    """Contrast R and angles (rho, sigma) of the Kellogg checkerboard solution.

    With the symmetric choice ``rho = pi / 4`` the flux conditions reduce to
    ``tan((pi/2 - sigma) gamma) = tan(sigma gamma)``, i.e.
    ``sin((pi/2 - 2 sigma) gamma) = 0``.  The root is bracketed on the
    admissible branch ``max(0, pi - pi gamma) < -2 gamma sigma < min(pi, 2 pi - pi gamma)``
    and found by Brent's method; R then follows from the first condition.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("exponent must lie in (0, 1)")
    rho = np.pi / 4
    lo = -min(np.pi, 2 * np.pi - np.pi * gamma) / (2 * gamma)
    hi = -max(0.0, np.pi - np.pi * gamma) / (2 * gamma)
    shrink = 1e-9 * (hi - lo)
    sigma = brentq(lambda s: np.sin((np.pi / 2 - 2 * s) * gamma), lo + shrink, hi - shrink,
                   xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=200)
    R = -np.tan((np.pi / 2 - sigma) * gamma) / np.tan(rho * gamma)
    res = kellogg_residuals(gamma, R, rho, sigma)
    if np.abs(res).max() > 1e-6 * R:
        raise RuntimeError("Kellogg parameter solve did not converge")
    return float(R), float(rho), float(sigma)


def kellogg_residuals(gamma, R, rho, sigma):
    """Residuals of the three flux-continuity conditions."""
    t = np.tan
    return np.array([
        R + t((np.pi / 2 - sigma) * gamma) / t(rho * gamma),
        1.0 / R + t(rho * gamma) / t(sigma * gamma),
        R + t(sigma * gamma) / t((np.pi / 2 - rho) * gamma),
    ])


class KelloggSolution:
    """``gamma(r, phi) = r^g mu(phi)`` with diffusion R in quadrants 1 and 3."""

    def __init__(self, exponent=0.0009):
        self.g = exponent
        self.R, self.rho, self.sigma = kellogg_parameters(exponent)
        g, rho, sig = self.g, self.rho, self.sigma
        hp = np.pi / 2
        # mu = amp_q cos(g (phi - shift_q)) on quadrant q
        self.amp = np.array([np.cos((hp - sig) * g), np.cos(rho * g),
                             np.cos(sig * g), np.cos((hp - rho) * g)])
        self.shift = np.array([hp - rho, np.pi - sig, np.pi + rho, 3 * hp + sig])
        self.a = np.array([self.R, 1.0, self.R, 1.0])

    @staticmethod
    def angle(x, y):
        return np.mod(np.arctan2(y, x), 2 * np.pi)

    def quadrant(self, phi):
        return np.clip(np.floor_divide(np.asarray(phi), np.pi / 2).astype(int), 0, 3)

    def mu(self, phi, q=None):
        q = self.quadrant(phi) if q is None else q
        return self.amp[q] * np.cos(self.g * (phi - self.shift[q]))

    def dmu(self, phi, q=None):
        q = self.quadrant(phi) if q is None else q
        return -self.g * self.amp[q] * np.sin(self.g * (phi - self.shift[q]))

    def coeff(self, x, y):
        return np.where(x * y > 0, self.R, 1.0)

    def pressure(self, x, y):
        r = np.hypot(x, y)
        return r**self.g * self.mu(self.angle(x, y))

    def velocity(self, x, y):
        r = np.maximum(np.hypot(x, y), 1e-300)
        phi = self.angle(x, y)
        q = self.quadrant(phi)
        a = self.a[q]
        gr = self.g * r**(self.g - 1) * self.mu(phi, q)
        gp = r**(self.g - 1) * self.dmu(phi, q)
        c, s = np.cos(phi), np.sin(phi)
        return -a * (gr * c - gp * s), -a * (gr * s + gp * c)


def checkerboard_case(exponent=0.0009, theta_mark=0.3):
    sol = KelloggSolution(exponent)
    case = TestCase("checkerboard", (-1.0, 1.0, -1.0, 1.0), 1.0, "adaptive", theta_mark,
                    sol.pressure, sol.velocity, lambda x, y: np.zeros_like(x), sol.coeff,
                    has_boundary_flux=True, singular_point=(0.0, 0.0), nvb_mode="full",
                    params=dict(exponent=exponent, contrast=sol.R, rho=sol.rho, sigma=sol.sigma))
    case.solution = sol

    def diffusion(mesh):
        P = mesh.coords[mesh.tris]
        sx = np.sign(np.where(np.abs(P[..., 0]) < 1e-14, 0.0, P[..., 0]))
        sy = np.sign(np.where(np.abs(P[..., 1]) < 1e-14, 0.0, P[..., 1]))
        if np.any((sx.max(1) > 0) & (sx.min(1) < 0)) or np.any((sy.max(1) > 0) & (sy.min(1) < 0)):
            raise ValueError("element straddles a coefficient interface")
        c = mesh.centroids()
        return DiffusionField.scalar(sol.coeff(c[:, 0], c[:, 1]))

    def element_errors(space, u_total, diffusion=None):
        mesh = space.mesh
        diffusion = diffusion or case.diffusion(mesh)
        P = mesh.coords[mesh.tris]
        at0 = np.linalg.norm(P, axis=2).min(axis=1) < 1e-14
        sq = _generic_errors_sq(case, space, u_total, diffusion, case.error_order, None, None,
                                exclude=at0)
        els = np.flatnonzero(at0)
        if els.size:
            sq[els] = _origin_errors_sq(sol, space, u_total, diffusion, els)
        return np.sqrt(np.maximum(sq, 0.0))

    case.diffusion = diffusion
    case.element_errors = element_errors
    return case


def _origin_errors_sq(sol, space, u, diffusion, els, n_angle=64):
    """Errors on triangles with a vertex at the singular point.

    ``||u||^2_K`` is integrated exactly in the radius and by Gauss in the
    angle, the cross term and ``||u_h||^2_K`` with a rule collapsed at the
    origin.
    """
    mesh = space.mesh
    g = sol.g
    out = np.zeros(len(els))
    t, w = roots_legendre(n_angle)
    for n, e in enumerate(els):
        P = mesh.coords[mesh.tris[e]]
        k = int(np.argmin(np.linalg.norm(P, axis=1)))
        P1, P2 = P[(k + 1) % 3], P[(k + 2) % 3]
        ph1 = sol.angle(*P1)
        dph = np.mod(sol.angle(*P2) - ph1, 2 * np.pi)
        phi = ph1 + 0.5 * (t + 1) * dph
        nrm = np.array([P2[1] - P1[1], P1[0] - P2[0]])
        Rphi = (nrm @ P1) / (nrm[0] * np.cos(phi) + nrm[1] * np.sin(phi))
        phm = np.mod(phi, 2 * np.pi)
        q = sol.quadrant(np.mod(ph1 + 0.5 * dph, 2 * np.pi))
        a = sol.a[q]
        dens = a * (g**2 * sol.mu(phm, q)**2 + sol.dmu(phm, q)**2)
        # (1/a) |u|^2 = a r^(2g-2) (...) ; int_0^R r^(2g-1) dr = R^(2g) / (2g)
        uu = 0.5 * dph * np.sum(w * dens * Rphi**(2 * g) / (2 * g))
        out[n] = uu
    # cross term and discrete energy with the collapsed rule
    from .fem_spaces import RtSpace  # noqa: F401  (documentation of the space type)
    sub = _SubMesh(mesh, els)
    owner, X, W = element_quadrature(sub, 24, None, (0.0, 0.0))
    owner = els[owner]
    uh = _eval_discrete(space, u, owner, X)
    ux, uy = sol.velocity(X[:, 0], X[:, 1])
    Ainv = diffusion.inverse()[owner]
    cross = np.einsum("qi,qij,qj->q", np.column_stack([ux, uy]), Ainv, uh) * W
    hh = np.einsum("qi,qij,qj->q", uh, Ainv, uh) * W
    idx = np.searchsorted(els, owner)
    out += np.bincount(idx, weights=hh - 2 * cross, minlength=len(els))
    return out


class _SubMesh:
    """Minimal mesh view used for quadrature on a subset of triangles."""

    def __init__(self, mesh, els):
        self.coords = mesh.coords
        self.tris = mesh.tris[els]
        self.n_triangles = len(els)


# ----------------------------------------------------------------------
CASES = {"smooth": smooth_case, "wavefront": wavefront_case, "checkerboard": checkerboard_case}


def get_case(name, **kw):
    try:
        return CASES[name](**kw)
    except KeyError:
        raise ValueError(f"unknown case {name!r}") from None


def solve_on_mesh(case, mesh, p=1):
    """Mixed solve on a single mesh; returns (space, total velocity)."""
    from .multilevel import MultilevelSystem
    sys1 = MultilevelSystem(MeshHierarchy(mesh), p, case)
    u, _ = sys1.reference_solution()
    return sys1.fine.space, sys1.total_velocity(u), sys1


def build_case_hierarchy(case, J, p=1, cache_dir=None, mode=None, verbose=False):
    """Mesh hierarchy T_0..T_J for a case.

    Uniform cases refine J times.  Adaptive cases loop over: mixed solve with
    degree ``p`` on the current mesh, exact elementwise errors, Doerfler
    marking and newest vertex bisection.
    """
    if J < 0:
        raise ValueError("J must be nonnegative")
    coarse = case.coarse_mesh()
    if case.protocol == "uniform":
        return uniform_hierarchy(coarse, J)
    mode = mode or case.nvb_mode
    if cache_dir is not None:
        cached = _load_cached(case, J, p, mode, cache_dir)
        if cached is not None:
            return cached
    h = MeshHierarchy(coarse)
    for j in range(J):
        mesh = h.meshes[-1]
        space, u, _ = solve_on_mesh(case, mesh, p)
        err = case.element_errors(space, u)
        marked = doerfler_mark(err, case.theta_mark)
        h.append(nvb_refine(mesh, marked, mode))
        if verbose:
            print(f"level {j + 1}: {h.meshes[-1].n_triangles} triangles")
    if cache_dir is not None:
        _store_cached(case, h, p, mode, cache_dir)
    return h


def _cache_path(case, p, mode, cache_dir):
    tag = f"{case.name}_theta{case.theta_mark}_p{p}_{mode}"
    return os.path.join(cache_dir, tag)


def _store_cached(case, h, p, mode, cache_dir):
    path = _cache_path(case, p, mode, cache_dir)
    os.makedirs(path, exist_ok=True)
    for j, mesh in enumerate(h.meshes):
        write_mesh(mesh, os.path.join(path, f"level_{j}.mesh"), h.parents[j])
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(dict(case=case.name, J=h.J, theta_mark=case.theta_mark,
                       marking_degree=p, nvb_mode=mode), fh, indent=1)


def _load_cached(case, J, p, mode, cache_dir):
    path = _cache_path(case, p, mode, cache_dir)
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            man = json.load(fh)
    except FileNotFoundError:
        return None
    if man["J"] < J:
        return None
    mesh0, _ = read_mesh(os.path.join(path, "level_0.mesh"))
    h = MeshHierarchy(mesh0)
    for j in range(1, J + 1):
        mesh, parent = read_mesh(os.path.join(path, f"level_{j}.mesh"))
        prev = h.meshes[-1]
        counts = np.bincount(parent, minlength=prev.n_triangles)
        h.append(Refinement(mesh, parent, np.arange(prev.n_vertices, mesh.n_vertices),
                            np.flatnonzero(counts > 1)))
    return h
