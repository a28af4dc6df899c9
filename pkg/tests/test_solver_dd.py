import numpy as np
import pytest

from conftest import small_run
from mfem_asmg.mesh_hierarchy import MeshHierarchy
from mfem_asmg.multilevel import MultilevelSystem
from mfem_asmg.problems import get_case
from mfem_asmg.solver_dd import DomainDecompositionSolver, run_dd
from mfem_asmg.solver_mg import MgState


def test_needs_a_refinement():
    case = get_case("smooth")
    S = MultilevelSystem(MeshHierarchy(case.coarse_mesh()), 0, case)
    with pytest.raises(ValueError):
        DomainDecompositionSolver(S)


def test_subdomains_cover_fine_mesh(smooth_j2_p1):
    S = smooth_j2_p1.system
    dd = DomainDecompositionSolver(S)
    assert len(dd.subdomains) == S.hierarchy.meshes[0].n_vertices
    count = np.zeros(S.fine.mesh.n_triangles, dtype=int)
    for sd in dd.subdomains:
        count[sd.elems] += 1
    # every fine element lies in the patches of its coarse ancestor's three vertices
    assert np.all(count == 3)


@pytest.mark.parametrize("J,p", [(1, 0), (2, 1)])
def test_convergence_and_identities(J, p):
    R = small_run(J, p)
    res = DomainDecompositionSolver(R.system).run(R.u0, reference=R.uref)
    assert res.converged and res.variant == "dd"
    for rec in res.records:
        assert rec.overlap_ok
        assert rec.pythagoras <= 1e-10
        assert rec.eta <= rec.error + 1e-10
        assert rec.lambda_min >= 1 / 3 - 1e-12
        assert abs(rec.eta_loc ** 2 - rec.eta ** 2) <= 1e-12 * rec.eta ** 2
        if rec.effectivity is not None:
            assert 0 < rec.effectivity <= 1


def test_step_size_is_optimal(smooth_j2_p1):
    R = smooth_j2_p1
    S = R.system
    dd = DomainDecompositionSolver(S)
    state = MgState.start(S, R.u0)
    for _ in range(3):
        new, _ = dd.iterate(state)
        d = R.uref - state.u
        c = new.w - state.w
        rho, lam = new.rho[1], new.lambdas[1]
        base = S.fine.energy(d - c)
        for f in (0.99, 1.01):
            assert S.fine.energy(d - c - (f - 1) * lam * rho) >= base
        state = new


def test_unit_tolerance_and_exact_start(smooth_j2_p1):
    R = smooth_j2_p1
    assert len(run_dd(R.system, R.u0, tol_factor=1.0).records) == 1
    res = run_dd(R.system, R.uref, reference=R.uref)
    assert len(res.records) == 1 and res.records[0].eta == 0.0
    assert np.array_equal(res.u, R.uref)


def test_subdomain_contributions(smooth_j2_p1):
    R = smooth_j2_p1
    res = run_dd(R.system, R.u0, keep_patches_at=0)
    rec = res.records[0]
    ids, vals = rec.patch_contrib[0]
    assert len(ids) == 13 and np.all(vals >= 0)
    assert rec.level_contrib[0] + vals.sum() == pytest.approx(rec.eta_loc ** 2, rel=1e-12)
