import numpy as np
import pytest

from mfem_asmg.mesh_hierarchy import Mesh
from mfem_asmg.problems import (KelloggSolution, build_case_hierarchy, get_case,
                                kellogg_parameters, kellogg_residuals)


def laplacian(f, x, y, h):
    return (f(x + h, y) + f(x - h, y) + f(x, y + h) + f(x, y - h) - 4 * f(x, y)) / h ** 2


def gradient(f, x, y, h):
    return ((f(x + h, y) - f(x - h, y)) / (2 * h), (f(x, y + h) - f(x, y - h)) / (2 * h))


# ----------------------------------------------------------------------
def test_smooth_case(rng):
    c = get_case("smooth")
    assert c.pressure(0.0, 0.0) == 1.0
    assert abs(c.pressure(0.5, 0.5)) <= 1e-16
    x, y = rng.uniform(0.1, 0.9, (2, 20))
    assert np.allclose(c.source(x, y), -laplacian(c.pressure, x, y, 1e-4), rtol=1e-6, atol=1e-6)
    gx, gy = gradient(c.pressure, x, y, 1e-5)
    ux, uy = c.velocity(x, y)
    assert np.allclose(ux, -gx, atol=1e-8) and np.allclose(uy, -gy, atol=1e-8)


def test_wavefront_case(rng):
    c = get_case("wavefront")
    alpha, r0 = c.params["alpha"], c.params["r0"]
    assert abs(c.pressure(0.5 + r0, 0.5)) <= 1e-12  # 0.5 + r0 is not exact in binary
    h = 1e-7
    assert (c.pressure(0.5 + r0 + h, 0.5) - c.pressure(0.5 + r0 - h, 0.5)) / (2 * h) == \
        pytest.approx(alpha, rel=1e-6)
    # away from the centre and the steep front
    r = rng.uniform(0.1, 0.4, 20)
    t = rng.uniform(0, 2 * np.pi, 20)
    x, y = 0.5 + r * np.cos(t), 0.5 + r * np.sin(t)
    f = c.source(x, y)
    # Richardson extrapolated five-point stencil, fourth order
    lap = (4 * laplacian(c.pressure, x, y, 1e-3) - laplacian(c.pressure, x, y, 2e-3)) / 3
    assert np.allclose(f, -lap, rtol=1e-5, atol=1e-5 * np.abs(f).max())
    assert c.theta_mark == 0.7 and c.has_boundary_flux
    assert get_case("wavefront", theta_mark=0.5).theta_mark == 0.5


# ----------------------------------------------------------------------
def test_kellogg_contrast():
    R, rho, sigma = kellogg_parameters(0.0009)
    assert R == pytest.approx(2001405.429972, rel=1e-6)
    assert np.abs(kellogg_residuals(0.0009, R, rho, sigma)).max() <= 1e-6 * R


def test_kellogg_classical_parameters():
    R, rho, sigma = kellogg_parameters(0.1)
    assert R == pytest.approx(161.44763879758818, rel=1e-10)
    assert rho == pytest.approx(np.pi / 4, rel=1e-14)
    assert sigma == pytest.approx(-14.922565104551516, rel=1e-10)
    assert np.abs(kellogg_residuals(0.1, R, rho, sigma)).max() <= 1e-9


@pytest.mark.parametrize("g", [0.0, 1.0, 1.5])
def test_kellogg_bad_exponent(g):
    with pytest.raises(ValueError):
        kellogg_parameters(g)


@pytest.mark.parametrize("g", [0.1, 0.5, 0.0009])
def test_kellogg_solution_is_continuous_with_continuous_flux(g):
    sol = KelloggSolution(g)
    for k in range(4):
        phi = k * np.pi / 2
        left, right = (k - 1) % 4, k
        mu_l = sol.mu(phi + (2 * np.pi if k == 0 else 0.0), left)
        assert abs(mu_l - sol.mu(phi, right)) <= 1e-10
        # normal flux a dmu/dphi is continuous across the interface
        dl = sol.a[left] * sol.dmu(phi + (2 * np.pi if k == 0 else 0.0), left)
        dr = sol.a[right] * sol.dmu(phi, right)
        assert abs(dl - dr) <= 1e-9 * max(1.0, abs(dl))


def test_kellogg_pressure_is_harmonic_in_each_quadrant(rng):
    sol = KelloggSolution(0.5)
    r = rng.uniform(0.2, 0.8, 16)
    phi = (rng.integers(0, 4, 16) + rng.uniform(0.2, 0.8, 16)) * np.pi / 2
    x, y = r * np.cos(phi), r * np.sin(phi)
    assert np.abs(laplacian(sol.pressure, x, y, 1e-4)).max() <= 1e-5
    gx, gy = gradient(sol.pressure, x, y, 1e-6)
    ux, uy = sol.velocity(x, y)
    a = sol.coeff(x, y)
    assert np.allclose(ux, -a * gx, rtol=1e-7, atol=1e-7)
    assert np.allclose(uy, -a * gy, rtol=1e-7, atol=1e-7)


def test_checkerboard_case():
    c = get_case("checkerboard")
    assert c.domain == (-1.0, 1.0, -1.0, 1.0)
    assert c.params["contrast"] == pytest.approx(2001405.429972, rel=1e-6)
    m = c.coarse_mesh()
    D = c.diffusion(m)
    assert D.lam_max / D.lam_min == pytest.approx(c.params["contrast"], rel=1e-12)
    assert np.all(c.source(np.array([0.3]), np.array([-0.2])) == 0)


def test_unknown_case():
    with pytest.raises(ValueError):
        get_case("nosuch")


# ----------------------------------------------------------------------
def test_uniform_hierarchy_counts():
    h = build_case_hierarchy(get_case("smooth"), 5)
    assert [m.n_triangles for m in h.meshes] == [16 * 4 ** j for j in range(6)]
    assert h.meshes[-1].n_triangles == 16384
    with pytest.raises(ValueError):
        build_case_hierarchy(get_case("smooth"), -1)


def check_nested(h):
    for j in range(1, h.J + 1):
        prev, mesh = h.meshes[j - 1], h.meshes[j]
        assert mesh.n_triangles >= prev.n_triangles
        Mesh(mesh.coords, mesh.tris)  # validates conformity
        assert np.allclose(np.bincount(h.parents[j], weights=mesh.area,
                                       minlength=prev.n_triangles), prev.area, atol=1e-15)
        assert np.allclose(mesh.coords[:prev.n_vertices], prev.coords)


@pytest.mark.parametrize("name", ["wavefront", "checkerboard"])
def test_adaptive_hierarchy(name, tmp_path):
    c = get_case(name)
    h = build_case_hierarchy(c, 3, cache_dir=str(tmp_path))
    check_nested(h)
    assert h.meshes[-1].n_triangles > h.meshes[0].n_triangles
    again = build_case_hierarchy(c, 2, cache_dir=str(tmp_path))
    assert again.J == 2
    for a, b in zip(h.meshes, again.meshes):
        assert np.array_equal(a.tris, b.tris) and np.array_equal(a.coords, b.coords)
    for j in range(1, 3):
        assert np.array_equal(h.parents[j], again.parents[j])
