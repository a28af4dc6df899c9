"""Command-line front end.

Example::

    mfem-asmg solve --case smooth --p 1 --levels 5 --solver mg --out run.json

writes ``run.json`` (configuration echo and summary) and ``iters.csv``
(one row per iteration) next to it.  ``iterations`` in the JSON equals the
number of CSV rows, i.e. the number of cycles performed; ``stop_index`` is
the index i of the estimator that met the stopping test, which is one less
whenever the run converged.

CSV columns: ``iter, eta, error, effectivity, contraction, lambda_min,
lambda_max, level_contrib_0 .. level_contrib_J``.  For the domain
decomposition solver the two contribution columns are the coarse term and
the subdomain term.  Undefined ratios (error below the noise floor or no
reference) are written as ``nan``.

Exit codes: 0 success, 1 bad usage, 2 solver failure or non-convergence.
The environment variable ``MFEM_ASMG_THREADS`` caps BLAS threads.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

log = logging.getLogger("mfem_asmg")

SOLVERS = ("mg", "mg-adaptive", "mg-local", "dd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    from .problems import CASES
    ap = _Parser(prog="mfem-asmg", description="Estimator-steered multigrid and "
                 "domain decomposition solvers for mixed Darcy problems.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("solve", help="run one solver on one test case")
    s.add_argument("--case", choices=sorted(CASES), required=True)
    s.add_argument("--solver", choices=SOLVERS, default="mg")
    s.add_argument("--p", type=int, default=1, help="polynomial degree on every level")
    s.add_argument("--levels", type=int, default=3, help="number of refinements J")
    s.add_argument("--tol-factor", type=float, default=1e-5,
                   help="stop when eta_i <= tol_factor * eta_0")
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--theta-adapt", type=float, default=0.3)
    s.add_argument("--max-sweeps", type=int, default=5)
    s.add_argument("--theta-mark", type=float, default=None,
                   help="Doerfler parameter (default: case value)")
    s.add_argument("--seed", type=int, default=0, help="reserved; runs are deterministic")
    s.add_argument("--out", default="run.json", help="JSON summary path")
    s.add_argument("--csv", default=None, help="iteration table (default: iters.csv next to --out)")
    s.add_argument("--export-mesh", default=None, metavar="DIR")
    s.add_argument("--dump-matrices", default=None, metavar="DIR")
    s.add_argument("--localization-iter", type=int, default=None, metavar="N")
    s.add_argument("--cache-dir", default=None, help="adaptive hierarchy cache")
    s.add_argument("--no-reference", action="store_true",
                   help="skip the direct reference solve (no error columns)")
    s.add_argument("-v", "--verbose", action="store_true")
    return ap


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return repr(float(x))


def check_records(records, tol=1e-9):
    """Re-assert reliability and contraction before anything is written."""
    for r in records:
        if r.effectivity is not None and r.effectivity > 1 + tol:
            raise AssertionError(f"iteration {r.i}: effectivity {r.effectivity!r} exceeds 1")
        if r.contraction is not None and not r.contraction < 1:
            raise AssertionError(f"iteration {r.i}: contraction {r.contraction!r} not below 1")


def emit_results(records, csv_path, n_contrib):
    """Write the per-iteration CSV; returns the number of data rows."""
    check_records(records)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "eta", "error", "effectivity", "contraction", "lambda_min",
                    "lambda_max"] + [f"level_contrib_{j}" for j in range(n_contrib)])
        for r in records:
            w.writerow([r.i, _fmt(r.eta), _fmt(r.error), _fmt(r.effectivity),
                        _fmt(r.contraction), _fmt(r.lambda_min), _fmt(r.lambda_max)]
                       + [_fmt(c) for c in r.level_contrib])
    return len(records)


def _export_mesh(hierarchy, path):
    from .mesh_hierarchy import write_mesh, write_vtk
    os.makedirs(path, exist_ok=True)
    for j, mesh in enumerate(hierarchy.meshes):
        write_mesh(mesh, os.path.join(path, f"level_{j}.mesh"), hierarchy.parents[j])
    write_vtk(hierarchy.meshes[-1], os.path.join(path, "finest.vtk"))


def _dump_matrices(system, path):
    import scipy.io
    from .assembly import assemble_divergence, assemble_mass
    fine = system.fine
    os.makedirs(path, exist_ok=True)
    free = fine.space.free_index
    M = assemble_mass(fine.space, fine.classes)[free][:, free]
    B = assemble_divergence(fine.space, fine.wspace)[:, free]
    scipy.io.mmwrite(os.path.join(path, "mass.mtx"), M)
    scipy.io.mmwrite(os.path.join(path, "divergence.mtx"), B)
    np.savetxt(os.path.join(path, "rhs_velocity.txt"), system.load_v[free])
    np.savetxt(os.path.join(path, "rhs_pressure.txt"), system.load_w.ravel())


def run_solve(args):
    from .diagnostics import localization_export, reference_solution
    from .feasible_init import construct_u0
    from .multilevel import MultilevelSystem
    from .problems import build_case_hierarchy, get_case
    from .solver_dd import DomainDecompositionSolver
    from .solver_mg import MultigridSolver

    if args.p < 0 or args.levels < 0:
        raise UsageError("--p and --levels must be nonnegative")
    if args.solver == "dd" and args.levels < 1:
        raise UsageError("the dd solver needs --levels >= 1")
    if not 0 < args.tol_factor <= 1:
        raise UsageError("--tol-factor must lie in (0, 1]")
    case = get_case(args.case)
    if args.theta_mark is not None:
        if case.protocol != "adaptive":
            raise UsageError(f"--theta-mark does not apply to the uniform case {case.name!r}")
        if not 0 < args.theta_mark <= 1:
            raise UsageError("--theta-mark must lie in (0, 1]")
        case = get_case(args.case, theta_mark=args.theta_mark)
    hierarchy = build_case_hierarchy(case, args.levels, p=1, cache_dir=args.cache_dir,
                                     verbose=args.verbose)
    system = MultilevelSystem(hierarchy, args.p, case)
    if args.export_mesh:
        _export_mesh(hierarchy, args.export_mesh)
    if args.dump_matrices:
        _dump_matrices(system, args.dump_matrices)
    u0 = construct_u0(system)
    uref = None if args.no_reference else reference_solution(system)[0]
    if args.solver == "dd":
        solver = DomainDecompositionSolver(system)
    else:
        solver = MultigridSolver(system, args.solver, theta=args.theta_adapt,
                                 max_sweeps=args.max_sweeps)
    result = solver.run(u0, args.tol_factor, args.max_iter, reference=uref,
                        keep_patches_at=args.localization_iter,
                        callback=(lambda r: log.info("iter %d eta %.3e", r.i, r.eta)))
    recs = result.records
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    csv_path = args.csv or os.path.join(out_dir, "iters.csv")
    emit_results(recs, csv_path, len(recs[0].level_contrib) if recs else 0)
    loc_path = None
    if args.localization_iter is not None:
        if args.localization_iter >= len(recs):
            raise UsageError("--localization-iter beyond the last iteration")
        if uref is None:
            raise UsageError("--localization-iter needs the reference solution")
        rec = recs[args.localization_iter]
        loc_path = os.path.join(out_dir, f"localization_iter{args.localization_iter}.csv")
        localization_export(rec, system, uref, rec.u_start, loc_path)
    last = recs[-1] if recs else None
    summary = dict(
        config={k: v for k, v in vars(args).items() if k not in ("verbose",)},
        case=case.name, degree=args.p, levels=hierarchy.J,
        triangles=[m.n_triangles for m in hierarchy.meshes],
        velocity_dofs=int(system.fine.space.total_dim),
        pressure_dofs=int(system.fine.wspace.dim),
        iterations=len(recs), stop_index=result.iterations,
        converged=result.converged, message=result.message,
        eta_initial=recs[0].eta if recs else None,
        eta_final=last.eta if last else None,
        error_final=last.error_next if last else None,
        effectivity_final=last.effectivity if last else None,
        contraction_final=last.contraction if last else None,
        lambda_min=min((r.lambda_min for r in recs), default=None),
        mean_sweeps=result.mean_sweeps if args.solver == "mg-adaptive" else None,
        max_sweeps=result.max_sweeps if args.solver == "mg-adaptive" else None,
        patch_ratio=result.patch_ratio if args.solver == "mg-local" else None,
        mean_decrease=result.mean_decrease,
        iters_csv=csv_path, localization_table=loc_path,
    )
    with open(args.out, "w") as fh:
        json.dump(summary, fh, indent=1, default=float)
    print(f"{case.name} {args.solver} p={args.p} J={hierarchy.J}: {len(recs)} iterations "
          f"(stop index {result.iterations}), eta {summary['eta_final']:.3e}"
          if recs else "no iterations")
    if not result.converged:
        print(f"not converged: {result.message}", file=sys.stderr)
        return 2
    return 0


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    from .saddle_linalg import SaddleSolveError
    from .solver_mg import SolverError
    threads = os.environ.get("MFEM_ASMG_THREADS")
    limiter = None
    if threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=int(threads))
    try:
        return run_solve(args)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(f"mfem-asmg: error: {exc}", file=sys.stderr)
        return 1
    except (SolverError, SaddleSolveError, AssertionError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
