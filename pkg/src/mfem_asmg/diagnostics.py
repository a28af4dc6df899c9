"""Reference solutions, error norms and estimator localization."""

import csv

import numpy as np

from .assembly import divergence_adjoint

UNDEFINED = float("nan")


class DiagnosticsError(ValueError):
    pass


def reference_solution(system, check=True, tol=1e-10):
    """Direct solve of the finest-level mixed system.

    Returns the velocity in the full numbering (without the boundary lift)
    and the pressure coefficients.  With ``check`` the KKT residual is
    verified to ``tol`` relative.
    """
    u, q = system.reference_solution()
    if check:
        res = kkt_residual(system, u, q)
        if res > tol:
            raise DiagnosticsError(f"reference KKT residual {res:.2e} above {tol:.0e}")
    return u, q


def kkt_residual(system, u, q):
    fine = system.fine
    free = fine.space.free
    Mu = fine.mass_apply(u)
    Bq = divergence_adjoint(fine.space, q)
    rv = (system.load_v - Mu - Bq) * free
    rw = fine.div(u) - system.load_w
    sv = max(np.linalg.norm(system.load_v * free), np.linalg.norm(Mu * free),
             np.linalg.norm(Bq * free), 1e-300)
    sw = max(np.linalg.norm(system.load_w), np.linalg.norm(fine.div(u)), 1e-300)
    return float(max(np.linalg.norm(rv) / sv, np.linalg.norm(rw) / sw))


def algebraic_error(system, u_ref, u):
    """Energy norm ``||A^{-1/2}(u_ref - u)||`` on the finest level."""
    u_ref = np.asarray(u_ref)
    u = np.asarray(u)
    if u_ref.shape != u.shape:
        raise DiagnosticsError("velocities live in different spaces")
    return float(np.sqrt(max(system.energy(u_ref - u), 0.0)))


def error_drop(system, u_ref, u, u_next):
    """``||u_ref - u||^2 - ||u_ref - u_next||^2`` without cancellation.

    With ``d = u_ref - u`` and ``c = u_next - u`` the drop equals
    ``(A^{-1} c, 2 d - c)``, which stays accurate when both errors are
    many orders of magnitude below ``||u_ref||``.
    """
    c = np.asarray(u_next) - np.asarray(u)
    d = np.asarray(u_ref) - np.asarray(u)
    return float(c @ system.fine.mass_apply(2.0 * d - c))


def pythagoras_defect(system, u_ref, u, u_next, eta):
    """Relative defect of ``||e^i||^2 = ||e^{i+1}||^2 + eta_i^2``."""
    e2 = system.energy(np.asarray(u_ref) - np.asarray(u))
    if e2 <= 0:
        return 0.0 if eta == 0 else np.inf
    return abs(error_drop(system, u_ref, u, u_next) - eta ** 2) / e2


def noise_floor(system, u_ref):
    """Errors below this are round-off: ``1e3 eps ||A^{-1/2} u_J||``."""
    return 1e3 * np.finfo(float).eps * np.sqrt(system.energy(system.total_velocity(u_ref)))


def effectivity_index(record):
    """``eta / error`` or NaN when the error is below the noise floor."""
    if record.effectivity is None:
        return UNDEFINED
    return float(record.effectivity)


def contraction(record):
    if record.contraction is None:
        return UNDEFINED
    return float(record.contraction)


def elementwise_energy(level, x):
    return level.classes.energy_local(level.space.gather(x))


def localization_table(record, system, u_ref, u_i):
    """Per-patch estimator contributions and true patch errors.

    Parameters
    ----------
    record : IterationRecord with ``patch_contrib``
    u_ref, u_i : exact discrete velocity and the iterate the record started from

    Returns
    -------
    list of (level, vertex, estimator_contribution, patch_error_sq)
    """
    if record.patch_contrib is None:
        raise DiagnosticsError("record holds no patch contributions")
    h = system.hierarchy
    err_el = elementwise_energy(system.fine, u_ref - u_i)
    rows = []
    for j in sorted(record.patch_contrib):
        verts, vals = record.patch_contrib[j]
        mesh = h.meshes[j]
        anc = h.ancestors(system.J, j)
        err_j = np.bincount(anc, weights=err_el, minlength=mesh.n_triangles)
        for a, v in zip(verts, vals):
            tris = mesh.v2t[mesh.v2t_ptr[a]:mesh.v2t_ptr[a + 1]]
            rows.append((j, int(a), float(v), float(err_j[tris].sum())))
    return rows


def localization_export(record, system, u_ref, u_i, path):
    """Write :func:`localization_table` as CSV; returns the rows."""
    rows = localization_table(record, system, u_ref, u_i)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "vertex_id", "estimator_contribution", "patch_error_sq"])
        for r in rows:
            w.writerow([r[0], r[1], f"{r[2]:.17e}", f"{r[3]:.17e}"])
    return rows


def discretization_error(system, u):
    """Energy error of ``u + u_g`` against the exact velocity of the case."""
    fine = system.fine
    e = system.case.element_errors(fine.space, system.total_velocity(u), fine.diffusion)
    return float(np.sqrt((e ** 2).sum()))
