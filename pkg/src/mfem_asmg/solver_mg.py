"""Estimator-steered multigrid V-cycle for the mixed system.

One iteration performs a coarse solve followed, on each finer level, by one
block-Jacobi sweep over vertex patches (no pre-smoothing).  The summed patch
correction is scaled by the step size that minimises the energy error along
it, so no damping parameter is needed.  All corrections are divergence-free,
hence the iterate stays feasible, and the correction norms give a
guaranteed lower bound ``eta`` on the algebraic error with

    ||u_J - u^{i+1}||^2 = ||u_J - u^i||^2 - eta_i^2

in the energy norm ``||v||^2 = (A^{-1} v, v)``.

Two variants share the same code path:

* adaptive smoothing repeats the sweep on a level while the newest sweep
  still removes a noticeable part of the first sweep's contribution;
* local smoothing visits only patches of vertices that are new on the level
  or whose patch shrank.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import algebraic_error, noise_floor, pythagoras_defect


class SolverError(RuntimeError):
    """Loss of feasibility, divergence of the estimator or a failed local solve."""


@dataclass
class IterationRecord:
    i: int
    eta: float
    level_contrib: np.ndarray          # (lambda_j ||rho_j||)^2 summed over sweeps
    level_contrib_loc: np.ndarray      # lambda_j * sum_a ||rho_ja||^2 summed over sweeps
    lambdas: list                      # step sizes per level (one list per level)
    sweeps: np.ndarray                 # smoothing sweeps per level
    patches: np.ndarray                # smoothed patches per level
    div_defect: float = 0.0            # feasibility of the new iterate
    corr_div: float = 0.0              # largest relative divergence of a correction
    error: float = None                # ||u_J - u^i||, when a reference is known
    error_next: float = None           # ||u_J - u^{i+1}||
    effectivity: float = None
    contraction: float = None
    pythagoras: float = None           # relative defect of the error identity
    patch_contrib: dict = None         # level -> (vertices, lambda_j ||rho_ja||^2)
    overlap_ok: bool = True            # additive Schwarz overlap bound (DD only)
    u_start: np.ndarray = None         # iterate u^i, kept with patch_contrib

    @property
    def eta_loc(self):
        return float(np.sqrt(max(self.level_contrib_loc.sum(), 0.0)))

    @property
    def lambda_min(self):
        vals = [x for lam in self.lambdas[1:] for x in lam]
        return min(vals) if vals else 1.0

    @property
    def lambda_max(self):
        vals = [x for lam in self.lambdas[1:] for x in lam]
        return max(vals) if vals else 1.0


@dataclass
class MgState:
    """Current fine iterate ``u = base + w`` plus the pieces of the last V-cycle.

    ``r0`` is the deflated residual of ``base``; the residual of ``u`` is
    ``r0 - M w``, which never cancels digits of the size of ``u``.
    """
    base: np.ndarray
    w: np.ndarray
    r0: np.ndarray
    i: int = 0
    rho: list = field(default_factory=list)       # level corrections (last sweep)
    iterates: list = field(default_factory=list)  # running iterate per level, as level-j correction
    lambdas: list = field(default_factory=list)

    @classmethod
    def start(cls, system, u0):
        u0 = np.asarray(u0, dtype=float).copy()
        return cls(base=u0, w=np.zeros_like(u0), r0=system.initial_residual(u0))

    @property
    def u(self):
        return self.base + self.w

    def residual(self, system):
        fine = system.fine
        r = (self.r0 - fine.mass_apply(self.w)) * fine.space.free
        return system.deflate(r)

    def advance(self, c, **kw):
        return MgState(base=self.base, w=self.w + c, r0=self.r0, i=self.i + 1, **kw)


@dataclass
class SolverResult:
    u: np.ndarray
    records: list
    converged: bool
    variant: str
    message: str = ""
    all_patches: np.ndarray = None     # patches per level of the full sweep

    @property
    def cycles(self):
        """Number of V-cycles (or Schwarz steps) performed."""
        return len(self.records)

    @property
    def iterations(self):
        """Index ``i`` of the estimator that met the stopping test.

        ``eta_0`` comes from the first cycle, so ``i`` counts the cycles
        after the one that measured the initial error.
        """
        return max(len(self.records) - 1, 0)

    @property
    def mean_sweeps(self):
        s = np.concatenate([r.sweeps[1:] for r in self.records]) if self.records else np.zeros(0)
        return float(s.mean()) if s.size else 0.0

    @property
    def max_sweeps(self):
        s = np.concatenate([r.sweeps[1:] for r in self.records]) if self.records else np.zeros(0)
        return int(s.max()) if s.size else 0

    @property
    def patch_ratio(self):
        """Smoothed patches relative to all patches, levels 1..J."""
        num = sum(r.patches[1:].sum() for r in self.records)
        den = self.all_patches[1:].sum() * len(self.records)
        return float(num / den) if den else 1.0

    @property
    def mean_decrease(self):
        """Average computable error decrease per iteration."""
        return float(np.mean([r.eta ** 2 for r in self.records])) if self.records else 0.0


def _div_ratio(level, x):
    scale = np.abs(x).max()
    if scale == 0:
        return 0.0
    d = level.div(x)
    # divergence moments of one basis function are O(1) in this scaling
    return float(np.abs(d).max() / scale)


class MultigridSolver:
    """V-cycle solver on a :class:`MultilevelSystem`.

    Parameters
    ----------
    system : MultilevelSystem
    variant : {"mg", "mg-adaptive", "mg-local"}
    theta : float
        Adaptivity parameter of the adaptive-smoothing variant.
    max_sweeps : int
        Cap on the smoothing sweeps per level (adaptive variant).
    """

    variants = ("mg", "mg-adaptive", "mg-local")

    def __init__(self, system, variant="mg", theta=0.3, max_sweeps=5):
        if variant not in self.variants:
            raise ValueError(f"unknown multigrid variant {variant!r}")
        self.system = system
        self.variant = variant
        self.theta = float(theta)
        self.max_sweeps = int(max_sweeps) if variant == "mg-adaptive" else 1
        self.vertex_sets = [None] * (system.J + 1)
        if variant == "mg-local":
            h = system.hierarchy
            for j in range(1, system.J + 1):
                vs = h.new_vertex_set(j)
                if len(vs) < h.meshes[j].n_vertices:
                    self.vertex_sets[j] = vs
        self.all_patches = np.array([0] + [m.n_vertices for m in system.hierarchy.meshes[1:]])

    # ------------------------------------------------------------------
    def iterate(self, state, keep_patches=False):
        """One V-cycle; returns the updated state and its record."""
        S = self.system
        lv = S.levels
        J = S.J
        g = S.restrict_all(state.residual(S))
        contrib = np.zeros(J + 1)
        contrib_loc = np.zeros(J + 1)
        sweeps = np.zeros(J + 1, dtype=int)
        patches = np.zeros(J + 1, dtype=int)
        lambdas = [[1.0]] + [[] for _ in range(J)]
        rhos = [None] * (J + 1)
        corr_div = 0.0
        patch_contrib = {} if keep_patches else None

        # coarse correction, lambda_0 = 1
        rho0 = lv[0].solve_global(g[0]).total * lv[0].space.free
        rhos[0] = rho0
        e0 = lv[0].energy(rho0)
        contrib[0] = contrib_loc[0] = e0
        sweeps[0] = 1
        corr_div = max(corr_div, _div_ratio(lv[0], rho0))
        c = rho0
        iterates = [c]

        for j in range(1, J + 1):
            lev = lv[j]
            c = lev.P @ c
            solver = lev.patches(self.vertex_sets[j])
            patches[j] = solver.n_problems
            first = None
            for k in range(self.max_sweeps):
                r = (g[j] - lev.mass_apply(c)) * lev.space.free
                rt, t, _ = lev.cond.pre(r, None)
                res = solver.solve(rt, t, None)
                rho = res.total
                nrm2 = lev.energy(rho)
                sweeps[j] += 1
                if nrm2 <= 0.0:
                    lambdas[j].append(1.0)
                    break
                lam = float(r @ rho) / nrm2
                c = c + lam * rho
                rhos[j] = rho
                lambdas[j].append(lam)
                cj = lam * lam * nrm2
                contrib[j] += cj
                contrib_loc[j] += lam * res.energy.sum()
                corr_div = max(corr_div, _div_ratio(lev, rho))
                if keep_patches and k == 0:
                    vs = (np.arange(lev.mesh.n_vertices) if self.vertex_sets[j] is None
                          else self.vertex_sets[j])
                    patch_contrib[j] = (vs, lam * res.energy)
                if first is None:
                    first = cj
                if not cj > self.theta ** 2 * first:
                    break
            iterates.append(c)

        new = state.advance(c, rho=rhos, iterates=iterates,
                            lambdas=[lam[-1] if lam else 1.0 for lam in lambdas])
        eta = float(np.sqrt(contrib.sum()))
        rec = IterationRecord(
            i=state.i, eta=eta, level_contrib=contrib, level_contrib_loc=contrib_loc,
            lambdas=lambdas, sweeps=sweeps, patches=patches,
            div_defect=S.divergence_defect(new.u), corr_div=corr_div,
            patch_contrib=patch_contrib)
        return new, rec

    # ------------------------------------------------------------------
    def run(self, u0, tol_factor=1e-5, max_iter=200, reference=None,
            keep_patches_at=None, feas_tol=1e-9, callback=None):
        """Iterate until ``eta_i <= tol_factor * eta_0``.

        Parameters
        ----------
        u0 : feasible initial velocity
        reference : exact discrete velocity, enables error diagnostics
        keep_patches_at : iteration index whose patch contributions are kept
        """
        return _run_loop(self, u0, tol_factor, max_iter, reference, keep_patches_at,
                         feas_tol, callback)


def _run_loop(solver, u0, tol_factor, max_iter, reference, keep_patches_at, feas_tol, callback):
    S = solver.system
    state = MgState.start(S, u0)
    records = []
    eta0 = None
    eta_min = np.inf
    floor = None
    err = None
    if reference is not None:
        floor = noise_floor(S, reference)
        # error vector of u0 solved from its residual: keeps full relative
        # accuracy once the error is far below the size of u_J
        d = S.error_of(state.base, state.r0)
        # the two direct solves differ by round-off of order cond * eps * |u_J|;
        # this guard only catches a reference from a different problem
        drift = np.sqrt(S.energy(np.asarray(reference) - state.base - d))
        if drift > max(1e-6 * np.sqrt(S.energy(d)), 1e3 * floor):
            raise SolverError(f"reference does not match the initial residual ({drift:.2e})")
        err = algebraic_error(S, d, state.w)
    # estimators below this are round-off of the residual: the iterate is
    # already the discrete solution and the correction is discarded
    eta_floor = 1e3 * np.finfo(float).eps * np.sqrt(S.energy(S.total_velocity(state.base)))
    converged, message = False, "maximum number of iterations reached"
    for it in range(max_iter):
        keep = keep_patches_at == it
        w_start = state.w
        prev = state
        state, rec = solver.iterate(state, keep_patches=keep)
        if rec.eta <= eta_floor:
            state = dataclasses.replace(prev, i=prev.i + 1)
            _discard(rec)
        if keep:
            rec.u_start = state.base + w_start
        if rec.div_defect > feas_tol:
            raise SolverError(f"iteration {it}: feasibility lost ({rec.div_defect:.2e})")
        if reference is not None:
            err_next = algebraic_error(S, d, state.w)
            rec.error, rec.error_next = err, err_next
            rec.pythagoras = pythagoras_defect(S, d, w_start, state.w, rec.eta)
            if err > floor:
                rec.effectivity = rec.eta / err
                rec.contraction = err_next / err
            err = err_next
        records.append(rec)
        if callback is not None:
            callback(rec)
        if eta0 is None:
            eta0 = rec.eta
        if rec.eta == 0.0:
            converged, message = True, "iterate exact to round-off"
            break
        if rec.eta <= tol_factor * eta0:
            converged, message = True, "estimator reduced"
            break
        eta_min = min(eta_min, rec.eta)
        if rec.eta > 10.0 * eta_min:
            raise SolverError(f"iteration {it}: estimator grew tenfold ({rec.eta:.3e})")
    res = SolverResult(u=state.u, records=records, converged=converged,
                       variant=solver.variant, message=message,
                       all_patches=solver.all_patches)
    return res


def _discard(rec):
    """Turn a record into the one of a zero correction."""
    rec.eta = 0.0
    rec.level_contrib = np.zeros_like(rec.level_contrib)
    rec.level_contrib_loc = np.zeros_like(rec.level_contrib_loc)
    rec.lambdas = [[1.0] for _ in rec.lambdas]
    if rec.patch_contrib is not None:
        rec.patch_contrib = {j: (v, np.zeros_like(c)) for j, (v, c) in rec.patch_contrib.items()}


def mg_iterate(solver, state, keep_patches=False):
    return solver.iterate(state, keep_patches)


def run(system, u0, variant="mg", tol_factor=1e-5, max_iter=200, reference=None,
        theta=0.3, max_sweeps=5, keep_patches_at=None):
    """Convenience wrapper: build a :class:`MultigridSolver` and run it."""
    solver = MultigridSolver(system, variant, theta=theta, max_sweeps=max_sweeps)
    return solver.run(u0, tol_factor, max_iter, reference, keep_patches_at)
