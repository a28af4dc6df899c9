import numpy as np
import pytest

from oracles import piola_fit
from mfem_asmg.basis import dubiner
from mfem_asmg.fem_spaces import (boundary_flux_dofs, build_pressure_space, build_rt_space,
                                  pressure_prolongation, prolongation)
from mfem_asmg.mesh_hierarchy import Mesh, build_initial_mesh, uniform_hierarchy, uniform_refine
from mfem_asmg.quadrature import gauss_triangle


def field_at(space, x, t, X):
    """Values of field x at physical points X (n, 2) inside triangle t."""
    x0, B = space.mesh.jacobians()
    xi = np.linalg.solve(B[t], (np.atleast_2d(X) - x0[t]).T).T
    vals, div = space.ref.eval(xi)
    c = space.gather(x)[t]
    det = np.linalg.det(B[t])
    vhat = np.einsum("i,iqd->qd", c, vals)
    return vhat @ B[t].T / det, (c @ div) / det


def random_field(space, rng):
    x = rng.standard_normal(space.n_full)
    return x * space.free


@pytest.fixture(scope="module")
def refined():
    return uniform_refine(build_initial_mesh()).mesh


# ----------------------------------------------------------------------
def test_single_triangle_dimensions():
    m = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[1, 2, 0]]))
    V = build_rt_space(m, 0)
    assert V.total_dim == 0 and V.n_local == 3
    assert build_rt_space(m, 1).n_local == 8
    assert build_pressure_space(m, 2).dim == 6


@pytest.mark.parametrize("p", range(4))
def test_rt_dimension_formula(coarse_mesh, p):
    interior = sum(1 for e in range(coarse_mesh.n_edges)
                   if len({t for t in range(16) if np.sum(np.isin(coarse_mesh.tris[t],
                                                                 coarse_mesh.edges[e])) == 2}) == 2)
    assert interior == 20
    V = build_rt_space(coarse_mesh, p)
    assert V.total_dim == (p + 1) * interior + p * (p + 1) * 16


def test_pressure_dimensions(coarse_mesh):
    assert build_pressure_space(coarse_mesh, 0).dim == 16
    fine = uniform_hierarchy(coarse_mesh, 5).meshes[-1]
    assert build_pressure_space(fine, 1).dim == 49152


def test_negative_degree(coarse_mesh):
    with pytest.raises(ValueError):
        build_rt_space(coarse_mesh, -1)


# ----------------------------------------------------------------------
def test_evaluate_zero_and_linearity(refined, rng):
    V = build_rt_space(refined, 2)
    assert np.allclose(V.evaluate(V.zeros(), 3, (0.2, 0.3)), 0.0)
    u, v = random_field(V, rng), random_field(V, rng)
    a, b = rng.standard_normal(2)
    for t in rng.integers(0, refined.n_triangles, 5):
        bary = rng.dirichlet(np.ones(3))
        lhs = V.evaluate(a * u + b * v, t, bary)
        rhs = a * V.evaluate(u, t, bary) + b * V.evaluate(v, t, bary)
        assert np.allclose(lhs, rhs, atol=1e-12)
    with pytest.raises(IndexError):
        V.evaluate(u, refined.n_triangles, (0.1, 0.1))


def test_rt0_edge_basis_unit_flux(coarse_mesh):
    V = build_rt_space(coarse_mesh, 0)
    e = int(np.flatnonzero(~coarse_mesh.boundary_edges)[0])
    x = V.zeros()
    x[V.edge_dof(e)] = 1.0
    a, b = coarse_mesh.coords[coarse_mesh.edges[e]]
    tv = b - a
    length = np.linalg.norm(tv)
    n = np.array([tv[1], -tv[0]]) / length
    mid = 0.5 * (a + b)
    for t in coarse_mesh.edge_elems[e]:
        val, div = field_at(V, x, t, mid)
        assert val[0] @ n == pytest.approx(1.0 / length, rel=1e-12)
        # divergence is constant: +1/|K| on the side the normal leaves
        out = np.dot(coarse_mesh.centroids()[t] - mid, n) < 0
        assert div[0] == pytest.approx((1 if out else -1) / coarse_mesh.area[t], rel=1e-12)
        coeffs = V.divergence_coeffs(x)[t]
        assert coeffs[0] * np.sqrt(2.0) == pytest.approx(div[0], rel=1e-12)


def test_divergence_free_polynomial_field(refined):
    V = build_rt_space(refined, 1)
    x = piola_fit(V, lambda X, Y: (-Y + 0.3, X - 0.1))
    assert np.abs(V.divergence_coeffs(x)).max() < 1e-12
    # the fit reproduces the field
    v, _ = field_at(V, x, 5, refined.centroids()[5])
    c = refined.centroids()[5]
    assert np.allclose(v[0], [-c[1] + 0.3, c[0] - 0.1], atol=1e-12)


def test_normal_continuity_and_boundary(refined, rng):
    for p in (0, 1, 3):
        V = build_rt_space(refined, p)
        x = random_field(V, rng)
        worst_jump = worst_bnd = 0.0
        for e in rng.integers(0, refined.n_edges, 50):
            a, b = refined.coords[refined.edges[e]]
            tv = b - a
            n = np.array([tv[1], -tv[0]]) / np.linalg.norm(tv)
            X = a + rng.random() * tv
            t0, t1 = refined.edge_elems[e]
            v0 = field_at(V, x, t0, X)[0][0] @ n
            if t1 < 0:
                worst_bnd = max(worst_bnd, abs(v0))
            else:
                worst_jump = max(worst_jump, abs(v0 - field_at(V, x, t1, X)[0][0] @ n))
        assert worst_jump <= 1e-10
        assert worst_bnd <= 1e-10


@pytest.mark.parametrize("p", [0, 1, 2])
def test_divergence_matches_finite_differences(refined, rng, p):
    V = build_rt_space(refined, p)
    x = random_field(V, rng)
    h = 1e-6
    for t in rng.integers(0, refined.n_triangles, 10):
        X = refined.coords[refined.tris[t]].T @ rng.dirichlet(5 * np.ones(3))
        pts = X + np.array([[h, 0], [-h, 0], [0, h], [0, -h]])
        vals, _ = field_at(V, x, t, pts)
        fd = (vals[0, 0] - vals[1, 0] + vals[2, 1] - vals[3, 1]) / (2 * h)
        _, div = field_at(V, x, t, X)
        assert fd == pytest.approx(div[0], abs=1e-6 * max(1.0, abs(div[0])))
        # the pressure-basis coefficients reproduce the same value
        w = V.divergence_coeffs(x)[t]
        x0, B = refined.jacobians()
        xi = np.linalg.solve(B[t], X - x0[t])
        assert w @ dubiner(p, xi[None, :])[:, 0] == pytest.approx(div[0], rel=1e-10, abs=1e-10)


# ----------------------------------------------------------------------
@pytest.mark.parametrize("pc,pf", [(0, 0), (1, 1), (2, 2), (1, 3)])
def test_prolongation_is_exact(pc, pf):
    h = uniform_hierarchy(build_initial_mesh(), 1)
    coarse, fine = h.meshes
    Vc, Vf = build_rt_space(coarse, pc), build_rt_space(fine, pf)
    P = prolongation(Vc, Vf, h.parents[1])
    rng = np.random.default_rng(pc * 10 + pf)
    q = gauss_triangle(2 * pf + 2)
    x0, B = fine.jacobians()
    for _ in range(20):
        xc = random_field(Vc, rng)
        xf = P @ xc
        assert np.all(xf[~Vf.free] == 0)
        vf, divf = Vf.evaluate_all(xf, q.points)
        X = x0[:, None, :] + np.einsum("tij,qj->tqi", B, q.points)
        worst = 0.0
        for t in range(fine.n_triangles):
            vc, divc = field_at(Vc, xc, h.parents[1][t], X[t])
            worst = max(worst, np.abs(vc - vf[t]).max(), np.abs(divc - divf[t]).max())
        scale = np.abs(vf).max()
        assert worst <= 1e-11 * scale


def test_prolongation_preserves_l2_norm_of_basis_function():
    h = uniform_hierarchy(build_initial_mesh(), 1)
    coarse, fine = h.meshes
    Vc, Vf = build_rt_space(coarse, 0), build_rt_space(fine, 0)
    P = prolongation(Vc, Vf, h.parents[1])
    q = gauss_triangle(4)

    def l2(V, x):
        v, _ = V.evaluate_all(x, q.points)
        det = np.abs(np.linalg.det(V.mesh.jacobians()[1]))
        return np.sum((v ** 2).sum(axis=2) * q.weights * det[:, None])

    x = Vc.zeros()
    x[Vc.edge_dof(int(np.flatnonzero(~coarse.boundary_edges)[0]))] = 1.0
    assert l2(Vf, P @ x) == pytest.approx(l2(Vc, x), rel=1e-12)
    assert np.all(P @ Vc.zeros() == 0)


def test_pressure_prolongation_is_exact(rng):
    h = uniform_hierarchy(build_initial_mesh(), 1)
    coarse, fine = h.meshes
    Wc, Wf = build_pressure_space(coarse, 1), build_pressure_space(fine, 2)
    Q = pressure_prolongation(Wc, Wf, h.parents[1])
    c = rng.standard_normal((coarse.n_triangles, Wc.n_local))
    f = (Q @ c.ravel()).reshape(fine.n_triangles, -1)
    # values at fine centroids agree
    x0c, Bc = coarse.jacobians()
    for t in range(fine.n_triangles):
        X = fine.centroids()[t]
        par = h.parents[1][t]
        xic = np.linalg.solve(Bc[par], X - x0c[par])
        vf = Wf.evaluate_all(f[t:t + 1], np.array([[1 / 3, 1 / 3]]))[0, 0]
        vc = Wc.evaluate_all(c[par:par + 1], xic[None, :])[0, 0]
        assert vf == pytest.approx(vc, rel=1e-12, abs=1e-12)


def test_pressure_projection_reproduces_polynomials(refined):
    W = build_pressure_space(refined, 2)
    f = lambda x, y: 1 + 2 * x - y + x * y - 3 * y ** 2
    c = W.project(f)
    q = gauss_triangle(4)
    x0, B = refined.jacobians()
    X = x0[:, None, :] + np.einsum("tij,qj->tqi", B, q.points)
    assert np.allclose(W.evaluate_all(c, q.points), f(X[..., 0], X[..., 1]), atol=1e-12)
    # mean weights integrate the field
    assert np.sum(W.mean_weights() * c) == pytest.approx(
        np.sum(f(X[..., 0], X[..., 1]) * q.weights * W.det[:, None]), rel=1e-12)


def test_boundary_flux_dofs_of_constant_field(coarse_mesh):
    V = build_rt_space(coarse_mesh, 1)
    g = lambda x, y, n: 1.0 * n[..., 0] + 2.0 * n[..., 1]
    x = boundary_flux_dofs(V, g)
    assert np.all(x[V.free] == 0)
    bnd = np.flatnonzero(coarse_mesh.boundary_edges)
    a, b = coarse_mesh.coords[coarse_mesh.edges[bnd]].transpose(1, 0, 2)
    tv = b - a
    flux = tv[:, 1] * 1.0 - tv[:, 0] * 2.0
    assert np.allclose(x[bnd * 2], flux, atol=1e-14)
    assert np.allclose(x[bnd * 2 + 1], 0.0, atol=1e-14)
