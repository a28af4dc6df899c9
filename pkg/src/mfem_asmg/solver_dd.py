"""Two-level overlapping additive Schwarz with an optimal step size.

The coarse space is the mixed space on ``T_0``; the subdomains are the
coarse vertex patches discretised with the finest mesh, with zero normal
flux on the subdomain boundary.  Each iteration performs a coarse solve,
then independent subdomain solves against the coarse-corrected residual,
and scales their sum by the energy-optimal step size.  Subdomain
factorizations are computed once and reused.
"""

import numpy as np

from .saddle_linalg import SaddleSolveError, SparseLocalSolver, global_orientation_problem
from .solver_mg import IterationRecord, SolverError, _div_ratio, _run_loop


class SubdomainContext:
    """Fine-mesh restriction of the velocity space to one coarse patch."""

    def __init__(self, level, vertex, elems):
        self.vertex = int(vertex)
        self.elems = np.asarray(elems, dtype=np.int64)
        space = level.space
        mesh = level.mesh
        p1 = space.p + 1
        inside = np.zeros(mesh.n_triangles, dtype=bool)
        inside[self.elems] = True
        ee = mesh.edge_elems
        interior = (ee[:, 1] >= 0) & inside[ee[:, 0]] & inside[np.maximum(ee[:, 1], 0)]
        edges = np.flatnonzero(interior)
        dofs = (edges[:, None] * p1 + np.arange(p1)[None, :]).ravel()
        prob = global_orientation_problem(space, self.elems, dofs, tag=("subdomain", self.vertex))
        try:
            self.solver = SparseLocalSolver(level.cond, prob)
        except SaddleSolveError as exc:
            raise SaddleSolveError(f"subdomain of coarse vertex {self.vertex}: {exc}") from exc

    def solve(self, rt, t):
        res = self.solver.solve(rt, t, None)
        return res.total, float(res.energy[0])


class DomainDecompositionSolver:
    """Additive Schwarz solver on a :class:`MultilevelSystem` (uses levels 0 and J)."""

    variant = "dd"

    def __init__(self, system):
        if system.J < 1:
            raise ValueError("domain decomposition needs at least one refinement")
        self.system = system
        h = system.hierarchy
        coarse = h.meshes[0]
        anc = h.ancestors(system.J, 0)
        fine = system.fine
        self.subdomains = []
        for a in range(coarse.n_vertices):
            ct = coarse.v2t[coarse.v2t_ptr[a]:coarse.v2t_ptr[a + 1]]
            elems = np.flatnonzero(np.isin(anc, ct))
            self.subdomains.append(SubdomainContext(fine, a, elems))
        self.all_patches = np.array([0, len(self.subdomains)])

    def iterate(self, state, keep_patches=False):
        S = self.system
        c0, fine = S.levels[0], S.fine
        gJ = state.residual(S)
        g0 = S.restrict_all(gJ)[0]
        rhoH = c0.solve_global(g0).total * c0.space.free
        eH = c0.energy(rhoH)
        cH = S.prolong(rhoH, 0)
        r = (gJ - fine.mass_apply(cH)) * fine.space.free
        rt, t, _ = fine.cond.pre(r, None)
        rho = np.zeros(fine.space.n_full)
        energies = np.zeros(len(self.subdomains))
        for k, sd in enumerate(self.subdomains):
            x, energies[k] = sd.solve(rt, t)
            rho += x
        nrm2 = fine.energy(rho)
        if nrm2 > 0:
            lam = float(r @ rho) / nrm2
        else:
            lam = 1.0
        new = state.advance(cH + lam * rho, rho=[rhoH, rho], lambdas=[1.0, lam])
        contrib = np.array([eH, lam * lam * nrm2])
        contrib_loc = np.array([eH, lam * energies.sum()])
        overlap_ok = bool(nrm2 <= 3.0 * energies.sum() * (1 + 1e-12) + 1e-300)
        corr_div = max(_div_ratio(c0, rhoH), _div_ratio(fine, rho))
        pc = None
        if keep_patches:
            # keyed by level 0: subdomains are coarse vertex patches
            pc = {0: (np.arange(len(self.subdomains)), lam * energies)}
        rec = IterationRecord(
            i=state.i, eta=float(np.sqrt(contrib.sum())), level_contrib=contrib,
            level_contrib_loc=contrib_loc, lambdas=[[1.0], [lam]],
            sweeps=np.array([1, 1]), patches=np.array([0, len(self.subdomains)]),
            div_defect=S.divergence_defect(new.u), corr_div=corr_div,
            patch_contrib=pc, overlap_ok=overlap_ok)
        if not overlap_ok:
            raise SolverError(f"iteration {state.i}: overlap bound violated")
        return new, rec

    def run(self, u0, tol_factor=1e-5, max_iter=200, reference=None,
            keep_patches_at=None, feas_tol=1e-9, callback=None):
        return _run_loop(self, u0, tol_factor, max_iter, reference, keep_patches_at,
                         feas_tol, callback)


def dd_iterate(solver, state, keep_patches=False):
    return solver.iterate(state, keep_patches)


def run_dd(system, u0, tol_factor=1e-5, max_iter=200, reference=None, keep_patches_at=None):
    return DomainDecompositionSolver(system).run(u0, tol_factor, max_iter, reference,
                                                 keep_patches_at)
