import dataclasses

import numpy as np
import pytest

from conftest import small_run
from mfem_asmg.feasible_init import FeasibilityError, construct_u0
from mfem_asmg.mesh_hierarchy import MeshHierarchy, build_initial_mesh, nvb_refine, uniform_hierarchy
from mfem_asmg.multilevel import MultilevelSystem
from mfem_asmg.problems import get_case


def feasibility(system, u):
    """max_w |(div u - f, w)| / ||w|| relative to ||f||, Dubiner basis is orthonormal."""
    d = system.fine.div(u) - system.load_w
    w = system.fine.wspace
    # ||w_k|| = sqrt(det) in the physical L2 norm
    return np.abs(d / np.sqrt(w.det)[:, None]).max() / np.abs(system.load_w / np.sqrt(w.det)[:, None]).max()


@pytest.mark.parametrize("J,p", [(1, 0), (2, 1), (2, 3)])
def test_smooth_start_is_feasible(J, p):
    R = small_run(J, p)
    u = R.u0
    assert feasibility(R.system, u) <= 1e-10
    assert np.all(u[~R.system.fine.space.free] == 0)
    # divergence coefficients equal the L2 projection of the source
    W = R.system.fine.wspace
    proj = W.project(R.case.source, 2 * p + 10)
    assert np.allclose(R.system.fine.space.divergence_coeffs(u), proj, atol=1e-9 * np.abs(proj).max())


def test_zero_source_gives_zero_start():
    case = dataclasses.replace(get_case("smooth"), source=lambda x, y: np.zeros_like(x))
    S = MultilevelSystem(uniform_hierarchy(case.coarse_mesh(), 2), 1, case)
    assert np.abs(construct_u0(S)).max() == 0


def test_one_level_start_is_the_coarse_solution():
    case = get_case("smooth")
    S = MultilevelSystem(MeshHierarchy(case.coarse_mesh()), 1, case)
    u0 = construct_u0(S)
    uref, _ = S.reference_solution()
    assert np.abs(u0 - uref).max() <= 1e-12 * np.abs(uref).max()


def test_start_on_bisection_hierarchy(rng):
    case = get_case("smooth")
    h = MeshHierarchy(build_initial_mesh())
    for _ in range(4):
        m = h.meshes[-1]
        h.append(nvb_refine(m, rng.choice(m.n_triangles, m.n_triangles // 3, replace=False)))
    S = MultilevelSystem(h, 2, case)
    assert feasibility(S, construct_u0(S)) <= 1e-10


def test_no_fine_global_factorization():
    case = get_case("smooth")
    S = MultilevelSystem(uniform_hierarchy(case.coarse_mesh(), 3), 1, case)
    stats = {}
    construct_u0(S, stats)
    assert stats["coarse_solves"] == 1
    assert stats["fine_global_factorizations"] == 0
    # one local problem per refined parent triangle on every level
    assert stats["local_solves"] == [16, 64, 256]
    assert all(lev._global is None for lev in S.levels[1:])


def test_checkerboard_start_with_boundary_flux():
    case = get_case("checkerboard")
    S = MultilevelSystem(uniform_hierarchy(case.coarse_mesh(), 2), 1, case)
    assert abs(S.compat_defect) <= 1e-10
    assert feasibility(S, construct_u0(S)) <= 1e-10


def test_incompatible_datum_raises():
    R = small_run(1, 0)
    S = R.system
    saved = S.load_w.copy()
    try:
        S.load_w[:, 0] += 1.0
        with pytest.raises(FeasibilityError):
            construct_u0(S)
    finally:
        S.load_w[:] = saved
