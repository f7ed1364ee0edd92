"""Sparse solver stack: incomplete Cholesky, PCG, restarted GMRES, direct LU.

Matrix storage and products go through scipy.sparse CSR; the factorization
and Krylov loops live here because their behavior (drop rule, breakdown
shift, stopping tests, preconditioner structure) is part of the method.

Saddle systems are preconditioned by a block upper-triangular operator

    [ Ahat  B^T  C  ]
    [  0   -Mhat 0  ]
    [  0     0  Aphat ]

with Ahat/Aphat incomplete-Cholesky applications of the (symmetrized)
diagonal blocks and Mhat the pressure mass diagonal scaled by 1/nu.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


CsrMatrix = sp.csr_matrix


class DimensionMismatch(Exception):
    pass


class NotSymmetric(Exception):
    pass


class Singular(Exception):
    pass


def as_csr(A) -> sp.csr_matrix:
    A = sp.csr_matrix(A)
    A.sum_duplicates()
    A.sort_indices()
    return A


def spmv(A, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if A.shape[1] != x.shape[0]:
        raise DimensionMismatch(f"matrix {A.shape} times vector {x.shape}")
    return A @ x


@dataclass
class SolveReport:
    iterations: int
    final_residual: float
    converged: bool
    method: str = ""
    breakdown_shifts: int = 0


class Preconditioner:
    kind = "NONE"

    def apply(self, r: np.ndarray) -> np.ndarray:
        return r


class JacobiPreconditioner(Preconditioner):
    kind = "JACOBI"

    def __init__(self, A):
        d = as_csr(A).diagonal()
        if np.any(d == 0.0):
            raise Singular("zero diagonal entry in Jacobi preconditioner")
        self._inv = 1.0 / d

    def apply(self, r):
        return self._inv * r


class IncompleteCholesky(Preconditioner):
    """Lower-triangular incomplete factor; apply solves L L^T z = r."""

    kind = "ICHOL"

    def __init__(self, L: sp.csr_matrix, shifts: int, droptol: float):
        self.L = L
        self.shifts = shifts
        self.droptol = droptol
        # SuperLU of a triangular matrix under natural ordering is the matrix
        # itself; it provides compiled forward and transposed solves.
        self._lu = spla.splu(L.tocsc(), permc_spec="NATURAL",
                             options={"DiagPivotThresh": 0.0,
                                      "SymmetricMode": False})

    def apply(self, r):
        y = self._lu.solve(r, trans="N")
        return self._lu.solve(y, trans="T")


def ichol(A, droptol: float = 1e-3) -> IncompleteCholesky:
    """Row-wise incomplete Cholesky with drop tolerance.

    Row i of L solves L[:i,:i] y = A[i,:i]; entries with
    |y_k| < droptol*sqrt(|A_ii|) are dropped as they are produced and then
    contribute no updates. A nonpositive pivot is replaced by |A_ii| and
    counted as a breakdown shift.
    """
    A = as_csr(A)
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"ichol needs a square matrix, got {A.shape}")
    skew = abs(A - A.T)
    scale = max(1.0, abs(A).max())
    if skew.nnz and skew.max() > 1e-12 * scale:
        raise NotSymmetric(f"max |A - A^T| = {skew.max():.3e}")

    indptr, indices, data = A.indptr, A.indices, A.data
    diag = A.diagonal()
    row_cols: list[np.ndarray] = []
    row_vals: list[np.ndarray] = []
    ldiag = np.empty(n)
    # column structure of the finished rows, for the scatter updates
    col_rows: list[list[int]] = [[] for _ in range(n)]
    col_vals: list[list[float]] = [[] for _ in range(n)]
    shifts = 0

    w = np.zeros(n)
    for i in range(n):
        lo, hi = indptr[i], indptr[i + 1]
        cols0 = indices[lo:hi]
        keep0 = cols0 < i
        active = cols0[keep0].tolist()
        w[active] = data[lo:hi][keep0]
        heapq.heapify(active)
        pivot = diag[i]
        drop = droptol * np.sqrt(abs(diag[i]))

        kept_c: list[int] = []
        kept_v: list[float] = []
        seen = -1
        while active:
            k = heapq.heappop(active)
            if k == seen:
                continue
            seen = k
            y = w[k] / ldiag[k]
            w[k] = 0.0
            if abs(y) < drop:
                continue
            kept_c.append(k)
            kept_v.append(y)
            pivot -= y * y
            # column k holds only rows finished before i
            for j, ljk in zip(col_rows[k], col_vals[k]):
                if w[j] == 0.0:
                    heapq.heappush(active, j)
                w[j] -= y * ljk

        if pivot <= 0.0:
            pivot = abs(diag[i])
            shifts += 1
            if pivot == 0.0:
                raise Singular(f"zero diagonal at row {i}")
        ldiag[i] = np.sqrt(pivot)
        for c, v in zip(kept_c, kept_v):
            col_rows[c].append(i)
            col_vals[c].append(v)
        row_cols.append(np.array(kept_c + [i], dtype=np.int64))
        row_vals.append(np.array(kept_v + [ldiag[i]]))

    nnz = np.array([len(c) for c in row_cols])
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(nnz, out=ptr[1:])
    L = sp.csr_matrix((np.concatenate(row_vals), np.concatenate(row_cols), ptr),
                      shape=(n, n))
    return IncompleteCholesky(L, shifts, droptol)


class DirectPreconditioner(Preconditioner):
    kind = "DIRECT"

    def __init__(self, A):
        self._factor = DirectFactor(A)

    def apply(self, r):
        return self._factor.solve(r)


class BlockTriangularPreconditioner(Preconditioner):
    """Upper block-triangular preconditioner for (extended) saddle systems.

    Blocks are taken from the constrained monolithic matrix: velocity block
    sizes nu_, pressure np_, optional head block nphi (coupled systems).
    """

    kind = "BLOCK_TRIANGULAR"

    def __init__(self, K, nu_: int, np_: int, mass_diag: np.ndarray,
                 nu_viscosity: float, nphi: int = 0, droptol: float = 1e-3):
        K = as_csr(K)
        if K.shape[0] != nu_ + np_ + nphi:
            raise DimensionMismatch("block sizes do not cover the matrix")
        self.nu_ = nu_
        self.np_ = np_
        self.nphi = nphi
        Auu = K[:nu_, :nu_]
        self.BT = K[:nu_, nu_:nu_ + np_]
        self.ahat = ichol(as_csr(0.5 * (Auu + Auu.T)), droptol)
        self.mdiag = np.asarray(mass_diag, dtype=float) / nu_viscosity
        if nphi:
            self.C = K[:nu_, nu_ + np_:]
            self.aphat = ichol(K[nu_ + np_:, nu_ + np_:], droptol)

    def apply(self, r):
        nu_, np_ = self.nu_, self.np_
        ru, rp = r[:nu_], r[nu_:nu_ + np_]
        z = np.empty_like(r)
        if self.nphi:
            zphi = self.aphat.apply(r[nu_ + np_:])
            z[nu_ + np_:] = zphi
        zp = -rp / self.mdiag
        z[nu_:nu_ + np_] = zp
        rhs_u = ru - self.BT @ zp
        if self.nphi:
            rhs_u = rhs_u - self.C @ zphi
        z[:nu_] = self.ahat.apply(rhs_u)
        return z


def pcg(A, b, M: Preconditioner | None = None, tol: float = 1e-9,
        maxit: int | None = None):
    """Preconditioned conjugate gradients; stops on ||b-Ax||/||b|| <= tol
    (absolute when b = 0). Non-convergence is reported, not raised."""
    A = as_csr(A)
    b = np.asarray(b, dtype=float)
    if A.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"matrix {A.shape} vs rhs {b.shape}")
    M = M or Preconditioner()
    n = b.shape[0]
    maxit = maxit or 10 * n
    bnorm = np.linalg.norm(b)
    ref = bnorm if bnorm > 0 else 1.0

    x = np.zeros(n)
    r = b.copy()
    res = np.linalg.norm(r)
    if res <= tol * ref:
        return x, SolveReport(0, res / ref, True, "pcg")
    z = M.apply(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, maxit + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r)
        if res <= tol * ref:
            return x, SolveReport(it, res / ref, True, "pcg")
        z = M.apply(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, SolveReport(maxit, res / ref, False, "pcg")


def gmres(A, b, P: Preconditioner | None = None, tol: float = 1e-9,
          restart: int = 50, maxit: int = 5000):
    """Left-preconditioned restarted GMRES with modified Gram-Schmidt.

    Stops when the preconditioned residual drops below tol relative to the
    initial preconditioned residual."""
    A = as_csr(A)
    b = np.asarray(b, dtype=float)
    if A.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"matrix {A.shape} vs rhs {b.shape}")
    P = P or Preconditioner()
    n = b.shape[0]
    x = np.zeros(n)
    r0 = P.apply(b)
    beta0 = np.linalg.norm(r0)
    if beta0 == 0.0:
        return x, SolveReport(0, 0.0, True, "gmres")

    total = 0
    while True:
        r = P.apply(b - A @ x)
        rel = np.linalg.norm(r) / beta0
        if rel <= tol or total >= maxit:
            return x, SolveReport(total, rel, rel <= tol, "gmres")
        m = min(restart, maxit - total, n)
        V = np.empty((m + 1, n))
        V[0] = r / (rel * beta0)
        H = np.zeros((m + 1, m))
        cs = np.empty(m)
        sn = np.empty(m)
        g = np.zeros(m + 1)
        g[0] = rel * beta0
        exhausted = False
        for j in range(m):
            w = P.apply(A @ V[j])
            for i in range(j + 1):
                H[i, j] = w @ V[i]
                w -= H[i, j] * V[i]
            H[j + 1, j] = np.linalg.norm(w)
            if H[j + 1, j] > 0:
                V[j + 1] = w / H[j + 1, j]
            else:
                exhausted = True  # Krylov space closed; solve and leave
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            d = np.hypot(H[j, j], H[j + 1, j])
            cs[j], sn[j] = H[j, j] / d, H[j + 1, j] / d
            H[j, j] = d
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            total += 1
            if abs(g[j + 1]) / beta0 <= tol or total >= maxit or exhausted:
                break
        y = np.linalg.solve(np.triu(H[:j + 1, :j + 1]), g[:j + 1])
        x = x + V[:j + 1].T @ y
        if exhausted:
            r = P.apply(b - A @ x)
            rel = np.linalg.norm(r) / beta0
            return x, SolveReport(total, rel, rel <= tol, "gmres")


class DirectFactor:
    """Reusable sparse LU factorization (partial pivoting via SuperLU)."""

    def __init__(self, A):
        A = as_csr(A)
        if A.shape[0] != A.shape[1]:
            raise DimensionMismatch(f"direct solve needs square, got {A.shape}")
        try:
            self._lu = spla.splu(A.tocsc())
        except RuntimeError as exc:
            raise Singular(str(exc)) from exc
        self.shape = A.shape
        self.solves = 0

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.shape[0]:
            raise DimensionMismatch(f"factor {self.shape} vs rhs {b.shape}")
        self.solves += 1
        x = self._lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise Singular("non-finite solution from LU solve")
        return x

    # lets a factorization of a nearby matrix serve as a Krylov preconditioner
    kind = "LU"

    def apply(self, r: np.ndarray) -> np.ndarray:
        return self.solve(r)


def direct_solve(A, b) -> np.ndarray:
    return DirectFactor(A).solve(b)


def constrain_matrix(A, dofs: np.ndarray) -> sp.csr_matrix:
    """Zero the constrained rows and columns, unit diagonal there."""
    A = as_csr(A)
    n = A.shape[0]
    keep = np.ones(n)
    keep[dofs] = 0.0
    D = sp.diags(keep)
    fixed = np.zeros(n)
    fixed[dofs] = 1.0
    return as_csr(D @ A @ D + sp.diags(fixed))


def constrain_rhs(A, b: np.ndarray, dofs: np.ndarray,
                  values: np.ndarray) -> np.ndarray:
    """Right side matching constrain_matrix: moves A x0 to the right side so
    the eliminated system stays symmetric, then pins the constrained values."""
    n = b.shape[0]
    x0 = np.zeros(n)
    x0[dofs] = values
    out = b - as_csr(A) @ x0
    out[dofs] = values
    return out


def constrain_dirichlet(A, b, dofs, values):
    return constrain_matrix(A, dofs), constrain_rhs(A, b, dofs, values)
