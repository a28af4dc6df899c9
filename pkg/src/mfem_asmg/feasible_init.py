"""Divergence-feasible initial iterate.

The lift is built level by level.  A coarse mixed solve gives a velocity
whose divergence matches the coarse projection of the datum; on every finer
level the prolonged field is corrected by local mixed problems posed on the
children of each refined parent triangle, with zero flux through the parent
boundary.  The local data ``Pi_j f - Pi_{j-1} f`` have zero mean on every
parent, so the local problems are compatible and no fine-level global solve
is needed.
"""

import numpy as np

from .saddle_linalg import DenseLocalSolver, global_orientation_problem


class FeasibilityError(RuntimeError):
    pass


def _children_problems(space, parent):
    """One local problem per parent with more than one child."""
    mesh = space.mesh
    p1 = space.p + 1
    ee = mesh.edge_elems
    inner = (ee[:, 1] >= 0)
    inner[inner] = parent[ee[inner, 0]] == parent[ee[inner, 1]]
    edge_owner = np.full(mesh.n_edges, -1, dtype=np.int64)
    edge_owner[inner] = parent[ee[inner, 0]]
    order = np.argsort(parent, kind="stable")
    counts = np.bincount(parent)
    kids = np.split(order, np.cumsum(counts)[:-1])
    e_order = np.argsort(edge_owner, kind="stable")
    e_counts = np.bincount(edge_owner[inner], minlength=len(counts))
    e_sorted = e_order[np.count_nonzero(~inner):]
    e_groups = np.split(e_sorted, np.cumsum(e_counts)[:-1])
    probs = []
    for K, ch in enumerate(kids):
        if len(ch) < 2:
            continue
        edges = np.sort(e_groups[K])
        dofs = (edges[:, None] * p1 + np.arange(p1)[None, :]).ravel()
        probs.append(global_orientation_problem(space, ch, dofs, tag=("children", K)))
    return probs


def construct_u0(system, stats=None):
    """Feasible velocity on the finest level of ``system``.

    Parameters
    ----------
    system : MultilevelSystem
    stats : dict, optional
        Filled with instrumentation counters: ``coarse_solves``,
        ``local_solves`` (per level) and ``fine_global_factorizations``.

    Returns
    -------
    u : full-numbering velocity with zero boundary DOFs satisfying
        ``(div u, w) = load_w(w)`` for every pressure test function.
    """
    lv = system.levels
    # the datum must have zero total (constant mode of each element is 1/sqrt 2)
    total = system.load_w[:, 0].sum()
    scale = max(np.abs(system.load_w).sum(), 1e-300)
    if abs(total) > 1e-12 * scale and abs(total) > 1e-12:
        raise FeasibilityError(f"incompatible data: total datum {total:.3e}")
    if stats is not None:
        stats.update(coarse_solves=0, local_solves=[], fine_global_factorizations=0)
    res = lv[0].solve_global(system.loads_v[0], system.loads_w[0])
    u = res.total * lv[0].space.free
    if stats is not None:
        stats["coarse_solves"] += 1
    for j in range(1, system.J + 1):
        lev = lv[j]
        u = lev.P @ u
        datum = system.loads_w[j] - lev.div(u)
        probs = _children_problems(lev.space, system.hierarchy.parents[j])
        if probs:
            rt, t, g0 = lev.cond.pre(np.zeros(lev.space.n_full), datum)
            u = u + DenseLocalSolver(lev.cond, probs).solve(rt, t, g0).total
        if stats is not None:
            stats["local_solves"].append(len(probs))
    if stats is not None and system.J > 0:
        stats["fine_global_factorizations"] = int(system.fine._global is not None)
    return u
