"""Direct solvers for the mixed saddle-point systems.

Two routes are provided.

* Plain KKT solves of ``[[M, B^T, 0], [B, 0, e], [0, e^T, 0]]`` (dense or
  sparse), where ``e`` pins the pressure mean.  These are simple and serve
  as references in the tests.
* Element-condensed solves used by the solvers.  On every element the
  interior velocity DOFs and the non-constant pressure modes are eliminated,
  which leaves a system in the edge DOFs, one constant pressure per element
  and the mean multiplier.  Small local problems (vertex patches, children
  of one parent) are solved in batches with cached dense inverses; large
  ones (coarse grid, subdomains, reference solve) with sparse LU.  Each
  solve applies one step of iterative refinement.
"""

import warnings

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SaddleSolveError(RuntimeError):
    pass


# ----------------------------------------------------------------------
# plain KKT route
def _kkt_sparse(M, B, e):
    n, m = M.shape[0], B.shape[0]
    e = sp.csr_matrix(np.asarray(e).reshape(-1, 1))
    return sp.bmat([[M, B.T, None], [B, None, e], [None, e.T, None]], format="csc")


class SaddleFactorization:
    """Sparse LU of the KKT matrix restricted to free velocity DOFs."""

    def __init__(self, system):
        self.system = system
        self.free = np.flatnonzero(system.free)
        M = system.mass[self.free][:, self.free]
        B = system.div[:, self.free]
        e = system.mean / np.linalg.norm(system.mean)
        self.K = _kkt_sparse(M, B, e)
        self.n_v, self.n_w = M.shape[0], B.shape[0]
        try:
            self.lu = spla.splu(self.K)
        except RuntimeError as exc:  # pragma: no cover - structural failure
            raise SaddleSolveError(f"singular KKT system: {exc}") from exc

    def solve(self, rhs_v, rhs_w, refine=2):
        b = np.concatenate([np.asarray(rhs_v)[self.free], rhs_w, [0.0]])
        x = self.lu.solve(b)
        for _ in range(refine):
            x += self.lu.solve(b - self.K @ x)
        u = np.zeros(self.system.mass.shape[0])
        u[self.free] = x[:self.n_v]
        return u, x[self.n_v:self.n_v + self.n_w]

    def residual(self, u, q, rhs_v, rhs_w):
        b = np.concatenate([np.asarray(rhs_v)[self.free], rhs_w, [0.0]])
        x = np.concatenate([u[self.free], q, [0.0]])
        r = b - self.K @ x
        return np.linalg.norm(r) / max(np.linalg.norm(b), 1e-300)


def solve_mixed(system, rhs_v, rhs_w):
    """Solve the mixed system; returns full-numbering velocity and pressure."""
    return SaddleFactorization(system).solve(rhs_v, rhs_w)


def dense_kkt(Ml, Bl, e=None):
    m = Bl.shape[0]
    if e is None:
        e = np.ones(m) / np.sqrt(m)
    n = Ml.shape[0]
    K = np.zeros((n + m + 1, n + m + 1))
    K[:n, :n] = Ml
    K[n:n + m, :n] = Bl
    K[:n, n:n + m] = Bl.T
    K[n:n + m, -1] = e
    K[-1, n:n + m] = e
    return K


def solve_divfree_correction(Ml, Bl, residual, mean=None):
    """Correction rho with (M rho, v) = residual(v) for all v with B v = 0."""
    n = Ml.shape[0]
    K = dense_kkt(Ml, Bl, mean)
    b = np.zeros(K.shape[0])
    b[:n] = residual
    try:
        with warnings.catch_warnings():
            # singularity is detected from the pivots below
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu = sla.lu_factor(K)
    except (ValueError, sla.LinAlgError) as exc:  # pragma: no cover
        raise SaddleSolveError(str(exc)) from exc
    piv = np.abs(np.diag(lu[0]))
    if piv.min() < 1e-12 * np.abs(K).max():
        raise SaddleSolveError("singular local system")
    x = sla.lu_solve(lu, b)
    x += sla.lu_solve(lu, b - K @ x)
    return x[:n]


def nullspace_correction(Ml, Bl, residual):
    """Same correction through an explicit basis Z of ker B."""
    Z = sla.null_space(Bl, rcond=1e-12)
    if Z.shape[1] == 0:
        return np.zeros(Ml.shape[0])
    y = np.linalg.solve(Z.T @ Ml @ Z, Z.T @ residual)
    return Z @ y


# ----------------------------------------------------------------------
# element condensation
class ElementCondensation:
    """Per-class elimination of interior velocity and non-constant pressure.

    For the element unknowns ordered as edge DOFs ``x_e``, interior DOFs
    ``x_b``, constant pressure ``q_0`` and remaining pressures ``q'`` the
    interior block ``Y = [[M_bb, D_b'^T], [D_b', 0]]`` is inverted and the
    edge Schur complement ``S = M_ee - C^T Y^{-1} C`` formed with
    ``C = [[M_be], [D_e']]``.
    """

    def __init__(self, classes):
        self.classes = classes
        space = classes.space
        self.space = space
        self.p = space.p
        self.ne = space.n_local_edge
        self.nb = space.n_bubble
        D = classes.D
        self.np_ = D.shape[0]
        self.ni = self.nb + self.np_ - 1
        ne, nb, ni = self.ne, self.nb, self.ni
        nc = classes.n_classes
        self.D0 = D[0, :ne].copy()
        self.S = np.empty((nc, ne, ne))
        self.Yinv = np.empty((nc, ni, ni))
        self.YinvC = np.empty((nc, ni, ne))
        De = D[1:, :ne]
        Db = D[1:, ne:]
        for c in range(nc):
            M = classes.M[c]
            if ni == 0:
                self.S[c] = M[:ne, :ne]
                continue
            Y = np.zeros((ni, ni))
            Y[:nb, :nb] = M[ne:, ne:]
            Y[:nb, nb:] = Db.T
            Y[nb:, :nb] = Db
            C = np.vstack([M[ne:, :ne], De])
            Yi = np.linalg.inv(Y)
            Yi = 0.5 * (Yi + Yi.T)
            YC = Yi @ C
            YC += Yi @ (C - Y @ YC)
            S = M[:ne, :ne] - C.T @ YC
            self.S[c] = 0.5 * (S + S.T)
            self.Yinv[c] = Yi
            self.YinvC[c] = YC

    def pre(self, r, g=None):
        """Element elimination of a right-hand side.

        Parameters
        ----------
        r : full-numbering velocity functional
        g : (T, n_p) pressure datum or None

        Returns
        -------
        rt : full-numbering vector whose edge entries hold the condensed
             edge functional (interior entries are copied from ``r``)
        t : (T, ni) interior particular solutions ``Y^{-1} [r_b; g']``
        g0 : (T,) constant-pressure datum
        """
        sp_ = self.space
        T = sp_.mesh.n_triangles
        ne, nb = self.ne, self.nb
        t = np.zeros((T, self.ni))
        rt = r.copy()
        if self.ni:
            v = np.zeros((T, self.ni))
            v[:, :nb] = r[sp_.l2g[:, ne:]]
            if g is not None:
                v[:, nb:] = g[:, 1:]
            ce = np.empty((T, ne))
            for c, els in enumerate(self.classes.members):
                t[els] = v[els] @ self.Yinv[c]
                ce[els] = v[els] @ self.YinvC[c]
            rt -= np.bincount(sp_.l2g[:, :ne].ravel(), weights=(ce * sp_.lsign[:, :ne]).ravel(),
                              minlength=sp_.n_full)
        g0 = np.zeros(T) if g is None else np.asarray(g[:, 0], dtype=float)
        return rt, t, g0

    def recover(self, els, ze, t):
        """Interior unknowns y = t - Y^{-1} C z_e for elements ``els``."""
        if self.ni == 0:
            return np.zeros((len(els), 0))
        cls = self.classes.cls[els]
        y = np.array(t, copy=True)
        for c in np.unique(cls):
            sel = cls == c
            y[sel] -= ze[sel] @ self.YinvC[c].T
        return y


class LocalProblem:
    """Description of a local condensed problem.

    Parameters
    ----------
    elems : (m,) element ids
    slot : (m, ne) index of each element edge DOF among the local edge
        unknowns, -1 when the DOF is fixed to zero
    ssign : (m, ne) element-local DOF = ssign * local unknown
    gidx : (n_e,) full-numbering DOF of each local edge unknown
    gsign : (n_e,) global value = gsign * local unknown
    """

    __slots__ = ("elems", "slot", "ssign", "gidx", "gsign", "tag")

    def __init__(self, elems, slot, ssign, gidx, gsign, tag=None):
        self.elems = np.asarray(elems, dtype=np.int64)
        self.slot = np.asarray(slot, dtype=np.int64)
        self.ssign = np.asarray(ssign, dtype=float)
        self.gidx = np.asarray(gidx, dtype=np.int64)
        self.gsign = np.asarray(gsign, dtype=float)
        self.tag = tag

    @property
    def n_edge(self):
        return len(self.gidx)

    @property
    def size(self):
        return self.n_edge + len(self.elems) + 1


def global_orientation_problem(space, elems, edge_dofs, tag=None):
    """Local problem on ``elems`` whose edge unknowns are ``edge_dofs``."""
    elems = np.asarray(elems, dtype=np.int64)
    edge_dofs = np.asarray(edge_dofs, dtype=np.int64)
    pos = np.full(space.n_edge_dofs, -1, dtype=np.int64)
    pos[edge_dofs] = np.arange(len(edge_dofs))
    ne = space.n_local_edge
    slot = pos[space.l2g[elems, :ne]]
    ssign = space.lsign[elems, :ne]
    return LocalProblem(elems, slot, ssign, edge_dofs, np.ones(len(edge_dofs)), tag)


def condensed_matrix(cond, prob, weights=None, sparse=False):
    """Condensed matrix [[K_e, B0^T, 0], [B0, 0, e], [0, e^T, 0]]."""
    m = len(prob.elems)
    n_e = prob.n_edge
    n = n_e + m + 1
    cls = cond.classes.cls[prob.elems]
    mask = prob.slot >= 0
    rows, cols, vals = [], [], []
    for i in range(m):
        mk = mask[i]
        idx = prob.slot[i][mk]
        s = prob.ssign[i][mk]
        S = cond.S[cls[i]][np.ix_(mk, mk)] * s[:, None] * s[None, :]
        rows.append(np.repeat(idx, len(idx))); cols.append(np.tile(idx, len(idx))); vals.append(S.ravel())
        b = s * cond.D0[mk]
        rows += [np.full(len(idx), n_e + i), idx]
        cols += [idx, np.full(len(idx), n_e + i)]
        vals += [b, b]
    if weights is None:
        e = np.full(m, 1.0 / np.sqrt(m))
    else:
        e = np.asarray(weights, dtype=float) / np.linalg.norm(weights)
    rows += [n_e + np.arange(m), np.full(m, n - 1)]
    cols += [np.full(m, n - 1), n_e + np.arange(m)]
    vals += [e, e]
    K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    return K.tocsc() if sparse else K.toarray()


class LocalResult:
    """Sum of local solutions plus per-problem energies."""

    def __init__(self, total, energy, pressure=None, locals_=None):
        self.total = total
        self.energy = energy
        self.pressure = pressure
        self.locals = locals_


class DenseLocalSolver:
    """Batched solver for many small local problems.

    Problems with identical element classes and DOF layout share one cached
    inverse, which is applied to all of them at once.
    """

    def __init__(self, cond, problems, keep_locals=False):
        self.cond = cond
        self.n_problems = len(problems)
        self.keep_locals = keep_locals
        cls = cond.classes.cls
        groups = {}
        for k, pr in enumerate(problems):
            key = (cls[pr.elems].tobytes(), pr.slot.tobytes(), pr.ssign.astype(np.int8).tobytes(),
                   len(pr.gidx))
            groups.setdefault(key, []).append(k)
        self.groups = []
        for key, ids in groups.items():
            pr0 = problems[ids[0]]
            K = condensed_matrix(cond, pr0)
            try:
                Kinv = np.linalg.inv(K)
            except np.linalg.LinAlgError as exc:
                raise SaddleSolveError(f"singular local problem {pr0.tag}") from exc
            self.groups.append(dict(
                ids=np.array(ids),
                elems=np.stack([problems[i].elems for i in ids]),
                gidx=np.stack([problems[i].gidx for i in ids]),
                gsign=np.stack([problems[i].gsign for i in ids]),
                slot=pr0.slot, ssign=pr0.ssign, K=K, Kinv=Kinv,
                cls=cls[pr0.elems], n_e=pr0.n_edge))

    @property
    def n_unique(self):
        return len(self.groups)

    def solve(self, rt, t, g0=None):
        cond = self.cond
        sp_ = cond.space
        ne, nb = cond.ne, cond.nb
        energy = np.zeros(self.n_problems)
        idx_acc, val_acc = [], []
        locs = [None] * self.n_problems if self.keep_locals else None
        Mcls = cond.classes.M
        for G in self.groups:
            elems, n_e = G["elems"], G["n_e"]
            P, m = elems.shape
            rhs = np.zeros((P, n_e + m + 1))
            rhs[:, :n_e] = G["gsign"] * rt[G["gidx"]]
            if g0 is not None:
                rhs[:, n_e:n_e + m] = g0[elems]
            x = rhs @ G["Kinv"].T
            x += (rhs - x @ G["K"].T) @ G["Kinv"].T
            xe = x[:, :n_e]
            idx_acc.append(G["gidx"].ravel()); val_acc.append((G["gsign"] * xe).ravel())
            en = np.zeros(P)
            bub_parts = []
            for i in range(m):
                ze = np.zeros((P, ne))
                mk = G["slot"][i] >= 0
                ze[:, mk] = G["ssign"][i][mk] * xe[:, G["slot"][i][mk]]
                c = G["cls"][i]
                if nb:
                    y = t[elems[:, i]] - ze @ cond.YinvC[c].T
                    zb = y[:, :nb]
                    z = np.concatenate([ze, zb], axis=1)
                    bidx = sp_.l2g[elems[:, i], ne:]
                    idx_acc.append(bidx.ravel()); val_acc.append(zb.ravel())
                    bub_parts.append((bidx, zb))
                else:
                    z = ze
                en += np.einsum("pi,pi->p", z, z @ Mcls[c])
            energy[G["ids"]] = en
            if locs is not None:
                for r, k in enumerate(G["ids"]):
                    d = [G["gidx"][r]] + [b[0][r] for b in bub_parts]
                    v = [G["gsign"][r] * xe[r]] + [b[1][r] for b in bub_parts]
                    locs[k] = (np.concatenate(d), np.concatenate(v))
        total = np.bincount(np.concatenate(idx_acc) if idx_acc else np.zeros(0, int),
                            weights=np.concatenate(val_acc) if val_acc else None,
                            minlength=sp_.n_full)
        return LocalResult(total, energy, locals_=locs)


class SparseLocalSolver:
    """One (possibly large) condensed problem factored with sparse LU."""

    def __init__(self, cond, problem, weights=None):
        self.cond = cond
        self.problem = problem
        self.K = condensed_matrix(cond, problem, weights, sparse=True)
        try:
            self.lu = spla.splu(self.K)
        except RuntimeError as exc:
            raise SaddleSolveError(f"singular problem {problem.tag}: {exc}") from exc

    def solve(self, rt, t, g0=None, refine=1):
        cond, pr = self.cond, self.problem
        sp_ = cond.space
        ne, nb = cond.ne, cond.nb
        n_e, m = pr.n_edge, len(pr.elems)
        rhs = np.zeros(n_e + m + 1)
        rhs[:n_e] = pr.gsign * rt[pr.gidx]
        if g0 is not None:
            rhs[n_e:n_e + m] = g0[pr.elems]
        x = self.lu.solve(rhs)
        for _ in range(refine):
            x += self.lu.solve(rhs - self.K @ x)
        xe = x[:n_e]
        mk = pr.slot >= 0
        ze = np.zeros((m, ne))
        ze[mk] = pr.ssign[mk] * xe[pr.slot[mk]]
        y = cond.recover(pr.elems, ze, t[pr.elems])
        out = np.zeros(sp_.n_full)
        out[pr.gidx] = pr.gsign * xe
        if nb:
            out[sp_.l2g[pr.elems, ne:]] = y[:, :nb]
            z = np.concatenate([ze, y[:, :nb]], axis=1)
        else:
            z = ze
        energy = float(cond.classes.energy_local_subset(pr.elems, z).sum())
        q = np.zeros((m, cond.np_))
        q[:, 0] = x[n_e:n_e + m]
        q[:, 1:] = y[:, nb:]
        return LocalResult(out, np.array([energy]), pressure=q)
