"""Gauss rules on the reference interval [0, 1] and reference triangle.

The reference triangle has vertices (0, 0), (1, 0), (0, 1) and area 1/2.
Triangle rules are collapsed (Stroud conical) products of Gauss-Legendre
and Gauss-Jacobi rules, so every weight is positive and any exactness
degree is available.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


@dataclass(frozen=True)
class Quadrature:
    points: np.ndarray
    weights: np.ndarray
    order: int

    def __len__(self):
        return len(self.weights)


@lru_cache(maxsize=None)
def gauss_interval(order):
    """Gauss-Legendre rule on [0, 1] exact for polynomials of degree `order`."""
    n = max(1, (order + 2) // 2)
    t, w = roots_legendre(n)
    pts = 0.5 * (t + 1.0)
    return Quadrature(pts, 0.5 * w, order)


@lru_cache(maxsize=None)
def gauss_triangle(order):
    """Collapsed Gauss rule on the reference triangle, exact to degree `order`."""
    n = max(1, (order + 2) // 2)
    tu, wu = roots_legendre(n)
    tv, wv = roots_jacobi(n, 1.0, 0.0)
    u = 0.5 * (tu + 1.0)
    v = 0.5 * (tv + 1.0)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    x = uu * (1.0 - vv)
    y = vv
    w = np.outer(0.5 * wu, 0.25 * wv)
    pts = np.column_stack([x.ravel(), y.ravel()])
    return Quadrature(pts, w.ravel(), order)


@lru_cache(maxsize=None)
def duffy_triangle(order, radial_points=None):
    """Rule that collapses local vertex 0 of the reference triangle.

    The Jacobian of the collapse vanishes linearly at vertex 0, which absorbs
    integrands behaving like ``1/r`` there.  ``radial_points`` overrides the
    number of Gauss points along the collapsed direction.
    """
    n = max(1, (order + 2) // 2)
    m = radial_points or n
    tr, wr = roots_legendre(m)
    ts, ws = roots_legendre(n)
    r = 0.5 * (tr + 1.0)
    s = 0.5 * (ts + 1.0)
    rr, ss = np.meshgrid(r, s, indexing="ij")
    # (r, s) -> r * ((1 - s) e1 + s e2), Jacobian r
    x = rr * (1.0 - ss)
    y = rr * ss
    w = np.outer(0.5 * wr * r, 0.5 * ws)
    return Quadrature(np.column_stack([x.ravel(), y.ravel()]), w.ravel(), order)
