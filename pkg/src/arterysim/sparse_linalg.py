"""Block sparse matrices, two-phase sparse LU, and unrestarted GMRES.

The LU separates a symbolic phase (fill-reducing permutation plus the
elimination structure of the factors) from the numeric phase so that
repeated factorizations of matrices with an identical nonzero pattern can
reuse the symbolic work.  The numeric kernel is SuperLU driven without
partial pivoting (diagonal pivot threshold zero, natural column order on
the symbolically permuted matrix), which keeps refactorization bitwise
reproducible.  An optional Gershgorin-scaled diagonal perturbation rescues
near-singular systems; it is off by default.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import FactorizationError, GmresError

#: Above this dimension the exact greedy minimum-degree ordering is replaced
#: by SuperLU's COLAMD ordering (same approximate-minimum-degree family).
EXACT_MINDEG_LIMIT = 1500

PIVOT_FLOOR = 1e-13


class BlockSparseMatrix:
    """2x2 block sparse matrix over the [u; c] monolithic dof layout."""

    def __init__(self, uu, uc, cu, cc):
        self.uu = sp.csr_matrix(uu)
        self.uc = sp.csr_matrix(uc)
        self.cu = sp.csr_matrix(cu)
        self.cc = sp.csr_matrix(cc)
        nu, nc = self.uu.shape[0], self.cc.shape[0]
        if (self.uc.shape != (nu, nc) or self.cu.shape != (nc, nu)
                or self.uu.shape != (nu, nu) or self.cc.shape != (nc, nc)):
            raise ValueError("inconsistent block dimensions")
        self.n_u, self.n_c = nu, nc
        self._mono = None

    @property
    def shape(self):
        n = self.n_u + self.n_c
        return (n, n)

    def monolithic(self) -> sp.csr_matrix:
        """Concatenated single sparse matrix; cached."""
        if self._mono is None:
            self._mono = sp.bmat([[self.uu, self.uc], [self.cu, self.cc]],
                                 format="csr")
            self._mono.sum_duplicates()
        return self._mono

    def matvec(self, x):
        return self.monolithic() @ x

    @classmethod
    def from_monolithic(cls, A, n_u):
        A = sp.csr_matrix(A)
        n = A.shape[0]
        return cls(A[:n_u, :n_u], A[:n_u, n_u:], A[n_u:, :n_u], A[n_u:, n_u:])


def spmv(A, x):
    """y = A x over the monolithic layout."""
    x = np.asarray(x)
    if isinstance(A, BlockSparseMatrix):
        if x.shape[0] != A.shape[0]:
            raise ValueError(f"dimension mismatch: {A.shape} @ {x.shape}")
        return A.matvec(x)
    if A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {A.shape} @ {x.shape}")
    return A @ x


def export_matrix_market(A, path, comment=""):
    """Writes the (monolithic) matrix in Matrix Market format."""
    from scipy.io import mmwrite
    if isinstance(A, BlockSparseMatrix):
        A = A.monolithic()
    mmwrite(str(path), sp.coo_matrix(A), comment=comment)


# ---------------------------------------------------------------------------
# Orderings and symbolic factorization
# ---------------------------------------------------------------------------

def _adjacency_sets(P: sp.csr_matrix):
    n = P.shape[0]
    indptr, indices = P.indptr, P.indices
    return [set(indices[indptr[i]:indptr[i + 1]].tolist()) - {i}
            for i in range(n)]


def _greedy_minimum_degree(P: sp.csr_matrix):
    """Exact greedy minimum-degree ordering, deterministic index tie-break."""
    n = P.shape[0]
    adj = _adjacency_sets(P)
    alive = np.ones(n, dtype=bool)
    heap = [(len(adj[i]), i) for i in range(n)]
    heapq.heapify(heap)
    perm = []
    while heap:
        d, v = heapq.heappop(heap)
        if not alive[v] or d != len(adj[v]):
            continue
        alive[v] = False
        perm.append(v)
        nbrs = [u for u in adj[v] if alive[u]]
        clique = set(nbrs)
        for u in nbrs:
            au = adj[u]
            au.discard(v)
            au |= clique - {u}
            heapq.heappush(heap, (len(au), u))
        adj[v] = set()
    return np.asarray(perm, dtype=int)


def _colamd_ordering(P: sp.csr_matrix):
    """Column ordering harvested from a stabilized SuperLU factorization."""
    n = P.shape[0]
    B = sp.csr_matrix((np.ones_like(P.data, dtype=float), P.indices, P.indptr),
                      shape=P.shape) + float(n) * sp.eye(n, format="csr")
    lu = spla.splu(sp.csc_matrix(B), permc_spec="COLAMD",
                   options=dict(SymmetricMode=True, Equil=False))
    return np.asarray(lu.perm_c, dtype=int)


def _symmetrized_pattern(A) -> sp.csr_matrix:
    A = sp.csr_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise FactorizationError("matrix must be square")
    P = sp.csr_matrix(
        (np.ones_like(A.data, dtype=np.int8), A.indices, A.indptr),
        shape=A.shape)
    P = (P + P.T).tocsr()
    P.sum_duplicates()
    P.data[:] = 1
    return P


@dataclass
class SymbolicFactorization:
    """Fill-reducing permutation and the elimination pattern of L and U.

    The structure is computed for the symmetrized pattern, so L and U
    transpose onto each other; `l_indptr`/`l_indices` hold the strictly
    lower triangular pattern rows of L after permutation.
    """

    perm: np.ndarray
    pattern: sp.csr_matrix          # symmetrized input pattern (unpermuted)
    ordering: str
    _l_rows: tuple | None = field(default=None, repr=False)

    @property
    def n(self):
        return self.pattern.shape[0]

    def pattern_matches(self, A) -> bool:
        """True when A's (symmetrized) pattern equals the stored pattern."""
        P = _symmetrized_pattern(A)
        return (P.shape == self.pattern.shape
                and np.array_equal(P.indptr, self.pattern.indptr)
                and np.array_equal(P.indices, self.pattern.indices))

    def pattern_contains(self, A) -> bool:
        """True when A's pattern is a subset of the stored pattern."""
        P = _symmetrized_pattern(A)
        if P.shape != self.pattern.shape:
            return False
        diff = P - self.pattern
        return diff.nnz == 0 or diff.data.max() <= 0

    def _elimination(self):
        """Row patterns of L via elimination-tree reach (computed lazily)."""
        if self._l_rows is not None:
            return self._l_rows
        n = self.n
        iperm = np.empty(n, dtype=int)
        iperm[self.perm] = np.arange(n)
        Pp = self.pattern[self.perm][:, self.perm].tocsr()
        parent = np.full(n, -1, dtype=int)
        rows = []
        mark = np.full(n, -1, dtype=int)
        for i in range(n):
            cols = Pp.indices[Pp.indptr[i]:Pp.indptr[i + 1]]
            mark[i] = i
            row = []
            for j in cols:
                j = int(j)
                while j < i and mark[j] != i:
                    mark[j] = i
                    row.append(j)
                    if parent[j] == -1:
                        parent[j] = i
                    j = parent[j]
            row.sort()
            rows.append(np.asarray(row, dtype=int))
        object.__setattr__(self, "_l_rows", (rows, parent))
        return self._l_rows

    @property
    def fill_nnz(self):
        """Entries of L + U including the diagonal."""
        rows, _ = self._elimination()
        lower = sum(len(r) for r in rows)
        return 2 * lower + self.n

    def l_pattern(self) -> sp.csr_matrix:
        """Strict lower triangle of the permuted factor pattern."""
        rows, _ = self._elimination()
        indptr = np.zeros(self.n + 1, dtype=int)
        indptr[1:] = np.cumsum([len(r) for r in rows])
        indices = np.concatenate(rows) if rows else np.empty(0, dtype=int)
        data = np.ones(len(indices), dtype=np.int8)
        return sp.csr_matrix((data, indices, indptr), shape=(self.n, self.n))


def symbolic_factorize(pattern, ordering="amd") -> SymbolicFactorization:
    """Fill-reducing analysis of a (structurally symmetric) sparse pattern.

    ordering="amd" picks a minimum-degree style permutation, "natural"
    keeps the given order.  Deterministic in both cases.
    """
    P = _symmetrized_pattern(pattern)
    n = P.shape[0]
    if np.any(np.diff(P.indptr) == 0):
        raise FactorizationError("structurally singular: empty row")
    if ordering == "natural":
        perm = np.arange(n)
    elif ordering == "amd":
        if n <= EXACT_MINDEG_LIMIT:
            perm = _greedy_minimum_degree(P)
        else:
            perm = _colamd_ordering(P)
    else:
        raise FactorizationError(f"unknown ordering {ordering!r}")
    return SymbolicFactorization(perm=perm, pattern=P, ordering=ordering)


@dataclass
class NumericFactorization:
    """Numeric LU over a retained symbolic structure."""

    sym: SymbolicFactorization
    lu: object
    a_norm: float
    perturbed_rows: np.ndarray

    @property
    def n(self):
        return self.sym.n

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        x = np.empty_like(b)
        perm = self.sym.perm
        x[perm] = self.lu.solve(b[perm] if b.ndim == 1 else b[perm, :])
        return x


def numeric_factorize(sym: SymbolicFactorization, A,
                      perturb=False) -> NumericFactorization:
    """LU of A over the symbolic structure, no partial pivoting.

    Pivots below PIVOT_FLOOR * ||A|| raise unless perturb=True, in which
    case the affected diagonal entries receive a Gershgorin-scaled shift
    and the factorization is repeated.
    """
    A = sp.csr_matrix(A)
    if A.shape[0] != sym.n:
        raise FactorizationError("matrix size does not match symbolic object")
    if not sym.pattern_contains(A):
        raise FactorizationError("matrix pattern not contained in the "
                                 "symbolic pattern; refactorize symbolically")
    a_norm = spla.norm(A, np.inf) if A.nnz else 0.0
    floor = PIVOT_FLOOR * max(a_norm, 1e-300)
    perm = sym.perm
    Ap = sp.csc_matrix(A[perm][:, perm])

    def attempt(M):
        try:
            return spla.splu(M, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                             options=dict(SymmetricMode=True, Equil=False,
                                          IterRefine="NOREFINE"))
        except RuntimeError as exc:
            raise FactorizationError(f"factorization failed: {exc}") from exc

    def shift_for(rows, radii):
        tau = np.zeros(sym.n)
        tau[rows] = np.maximum(np.sqrt(PIVOT_FLOOR) * radii[rows],
                               np.sqrt(PIVOT_FLOOR) * max(a_norm, 1.0))
        return sp.diags(tau).tocsc()

    radii = np.asarray(np.abs(Ap).sum(axis=1)).ravel()
    perturbed = np.empty(0, dtype=int)
    if perturb:
        # structurally dead rows (e.g. zero coarse basis columns) would make
        # SuperLU fail outright; shift them before the first attempt
        dead = np.flatnonzero(radii <= floor)
        if len(dead):
            Ap = (Ap + shift_for(dead, np.maximum(radii, 1.0))).tocsc()
            perturbed = dead

    lu = attempt(Ap)
    piv = np.abs(lu.U.diagonal())
    bad = np.flatnonzero(piv < floor)
    if len(bad):
        if not perturb:
            raise FactorizationError(
                f"{len(bad)} pivot(s) below {floor:.2e}; enable perturbation "
                "or fix the system (missing Dirichlet conditions?)")
        Ap = (Ap + shift_for(bad, radii)).tocsc()
        lu = attempt(Ap)
        still = np.flatnonzero(np.abs(lu.U.diagonal()) < floor)
        if len(still):
            raise FactorizationError(
                f"{len(still)} pivot(s) remain below {floor:.2e} after "
                "perturbation")
        perturbed = np.union1d(perturbed, bad)
    return NumericFactorization(sym=sym, lu=lu, a_norm=a_norm,
                                perturbed_rows=perm[perturbed])


def lu_solve(fac: NumericFactorization, b):
    """Forward/backward substitution with the retained factors."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != fac.n:
        raise FactorizationError(f"rhs length {b.shape[0]} != {fac.n}")
    return fac.solve(b)


def factorize(A, ordering="amd", perturb=False) -> NumericFactorization:
    """Convenience: symbolic + numeric in one call."""
    sym = symbolic_factorize(A, ordering=ordering)
    return numeric_factorize(sym, A, perturb=perturb)


# ---------------------------------------------------------------------------
# GMRES
# ---------------------------------------------------------------------------

def _as_operator(A):
    if A is None:
        return lambda x: x
    if isinstance(A, BlockSparseMatrix):
        M = A.monolithic()
        return lambda x: M @ x
    if sp.issparse(A) or isinstance(A, np.ndarray):
        return lambda x: A @ x
    if isinstance(A, NumericFactorization):
        return A.solve
    if callable(A):
        return A
    raise TypeError(f"cannot interpret {type(A)} as a linear operator")


def gmres(A, b, M_inv=None, tol=1e-6, max_it=1000, record_history=True):
    """Right-preconditioned unrestarted GMRES with modified Gram-Schmidt.

    Returns (x, iterations, history) for the first iterate whose recomputed
    true residual satisfies ||b - A x||_2 <= tol * ||b||_2.  The
    preconditioner enters only through M_inv (a callable, matrix or
    NumericFactorization); the convergence criterion is independent of it.
    Raises GmresError with the best iterate when max_it is exhausted.
    """
    if not (0 < tol < 1):
        raise GmresError(f"tolerance {tol} outside (0, 1)")
    apply_a = _as_operator(A)
    apply_m = _as_operator(M_inv)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros(n), 0, [0.0]
    target = tol * b_norm

    max_it = min(max_it, n)
    cap = min(64, max_it)
    V = np.empty((n, cap + 1))
    H = np.zeros((cap + 1, cap))
    cs = np.zeros(cap)
    sn = np.zeros(cap)
    g = np.zeros(cap + 1)
    V[:, 0] = b / b_norm
    g[0] = b_norm
    history = [b_norm]
    check_at = target

    j = 0
    while j < max_it:
        if j == cap:    # grow the Krylov workspace geometrically
            new_cap = min(max(2 * cap, 64), max_it)
            V2 = np.empty((n, new_cap + 1)); V2[:, :cap + 1] = V
            H2 = np.zeros((new_cap + 1, new_cap)); H2[:cap + 1, :cap] = H
            cs2 = np.zeros(new_cap); cs2[:cap] = cs
            sn2 = np.zeros(new_cap); sn2[:cap] = sn
            g2 = np.zeros(new_cap + 1); g2[:cap + 1] = g
            V, H, cs, sn, g, cap = V2, H2, cs2, sn2, g2, new_cap

        w = apply_a(apply_m(V[:, j]))
        for i in range(j + 1):
            H[i, j] = V[:, i] @ w
            w -= H[i, j] * V[:, i]
        H[j + 1, j] = np.linalg.norm(w)
        breakdown = H[j + 1, j] < 1e-300
        if not breakdown:
            V[:, j + 1] = w / H[j + 1, j]

        for i in range(j):
            t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
            H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
            H[i, j] = t
        r = np.hypot(H[j, j], H[j + 1, j])
        cs[j] = H[j, j] / r
        sn[j] = H[j + 1, j] / r
        H[j, j] = r
        H[j + 1, j] = 0.0
        g[j + 1] = -sn[j] * g[j]
        g[j] = cs[j] * g[j]
        j += 1
        est = abs(g[j])
        if record_history:
            history.append(est)

        if est <= check_at or breakdown or j == max_it:
            y = np.linalg.solve(H[:j, :j], g[:j])
            x = apply_m(V[:, :j] @ y)
            true_res = np.linalg.norm(b - apply_a(x))
            if true_res <= target:
                history[-1] = true_res
                return x, j, history
            if breakdown:
                raise GmresError("breakdown before reaching the residual "
                                 "target", best_x=x, history=history)
            # estimate was optimistic: tighten and continue
            check_at = 0.5 * check_at
    y = np.linalg.solve(H[:j, :j], g[:j])
    x = apply_m(V[:, :j] @ y)
    raise GmresError(f"no convergence within {max_it} iterations "
                     f"(best true residual {np.linalg.norm(b - apply_a(x)):.3e}, "
                     f"target {target:.3e})", best_x=x, history=history)
