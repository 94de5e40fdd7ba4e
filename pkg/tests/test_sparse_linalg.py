"""Sparse linear algebra tests: block matvec against dense oracles, symbolic
fill structure, LU accuracy and reuse, and the GMRES stopping contract."""

import numpy as np
import pytest
import scipy.sparse as sp

from arterysim.errors import FactorizationError, GmresError
from arterysim.sparse_linalg import (BlockSparseMatrix, NumericFactorization,
                                     factorize, gmres, lu_solve,
                                     numeric_factorize, spmv,
                                     symbolic_factorize)


def random_block_matrix(rng, nu=12, nc=8, density=0.4):
    mk = lambda m, n: sp.random(m, n, density=density, random_state=rng,
                                format="csr")
    uu = mk(nu, nu) + sp.eye(nu) * 3
    cc = mk(nc, nc) + sp.eye(nc) * 3
    return BlockSparseMatrix(uu, mk(nu, nc), mk(nc, nu), cc)


def random_dd_matrix(rng, n=50, density=0.15):
    """Random strictly diagonally dominant sparse matrix."""
    A = sp.random(n, n, density=density, random_state=rng, format="csr")
    A = A + A.T
    rowsum = np.asarray(np.abs(A).sum(axis=1)).ravel()
    return (A + sp.diags(rowsum + 1.0)).tocsr()


class TestSpmv:
    def test_identity(self):
        A = BlockSparseMatrix(sp.eye(5), sp.csr_matrix((5, 3)),
                              sp.csr_matrix((3, 5)), sp.eye(3))
        x = np.arange(8.0)
        assert np.array_equal(spmv(A, x), x)

    @pytest.mark.parametrize("seed", range(3))
    def test_against_dense(self, seed):
        rng = np.random.default_rng(seed)
        A = random_block_matrix(rng)
        x = rng.normal(size=20)
        dense = A.monolithic().toarray()
        assert np.linalg.norm(spmv(A, x) - dense @ x) <= 1e-14 * np.linalg.norm(
            dense @ x)

    def test_blockwise_equivalence(self):
        rng = np.random.default_rng(5)
        A = random_block_matrix(rng)
        x = rng.normal(size=20)
        xu, xc = x[:12], x[12:]
        y = spmv(A, x)
        assert np.allclose(y[:12], A.uu @ xu + A.uc @ xc)
        assert np.allclose(y[12:], A.cu @ xu + A.cc @ xc)

    def test_dimension_mismatch(self):
        A = random_block_matrix(np.random.default_rng(0))
        with pytest.raises(ValueError):
            spmv(A, np.ones(7))


class TestSymbolic:
    def test_diagonal_zero_fill(self):
        A = sp.diags([1.0, 2.0, 3.0]).tocsr()
        sym = symbolic_factorize(A)
        assert sym.fill_nnz == 3
        assert sym.l_pattern().nnz == 0

    def test_tridiagonal_fill_free_natural(self):
        n = 10
        A = sp.diags([np.ones(n - 1), 2 * np.ones(n), np.ones(n - 1)],
                     [-1, 0, 1]).tocsr()
        sym = symbolic_factorize(A, ordering="natural")
        assert sym.fill_nnz == A.nnz

    def test_arrow_matrix_ordering(self):
        n = 30
        A = sp.lil_matrix((n, n))
        A.setdiag(2.0)
        A[0, :] = 1.0
        A[:, 0] = 1.0
        A = A.tocsr()
        sym = symbolic_factorize(A, ordering="amd")
        # minimum degree defers the hub to the end: no fill beyond the arrow
        assert np.flatnonzero(sym.perm == 0)[0] >= n - 2
        fill_in = sym.fill_nnz - A.nnz
        assert fill_in <= 2 * n and sym.l_pattern().nnz <= 2 * n
        nat = symbolic_factorize(A, ordering="natural")
        assert nat.fill_nnz == n * n   # hub first causes complete fill

    def test_structural_singularity(self):
        A = sp.lil_matrix((3, 3))
        A[0, 0] = A[1, 1] = 1.0
        with pytest.raises(FactorizationError):
            symbolic_factorize(A.tocsr())


class TestNumericLU:
    def test_identity(self):
        fac = factorize(sp.eye(6).tocsr())
        b = np.arange(6.0)
        assert np.allclose(lu_solve(fac, b), b)

    @pytest.mark.parametrize("seed", range(10))
    def test_against_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        A = random_dd_matrix(rng)
        x_ref = np.linalg.solve(A.toarray(), np.ones(50))
        fac = factorize(A)
        x = lu_solve(fac, np.ones(50))
        assert np.linalg.norm(x - x_ref) / np.linalg.norm(x_ref) < 1e-10

    def test_refactorize_bitwise_identical(self):
        rng = np.random.default_rng(42)
        A = random_dd_matrix(rng)
        sym = symbolic_factorize(A)
        b = rng.normal(size=50)
        x1 = lu_solve(numeric_factorize(sym, A), b)
        B = A.copy()
        B.data = B.data * 1.7
        _ = numeric_factorize(sym, B)     # refresh values on the same symbolic
        x2 = lu_solve(numeric_factorize(sym, A), b)
        assert np.array_equal(x1, x2)

    def test_tridiagonal_vs_thomas(self):
        n = 40
        rng = np.random.default_rng(1)
        lower = rng.random(n - 1)
        diag = 4.0 + rng.random(n)
        upper = rng.random(n - 1)
        A = sp.diags([lower, diag, upper], [-1, 0, 1]).tocsr()
        b = rng.normal(size=n)

        # Thomas algorithm oracle
        c = upper.copy().astype(float)
        d = b.copy().astype(float)
        bb = diag.copy().astype(float)
        for i in range(1, n):
            w = lower[i - 1] / bb[i - 1]
            bb[i] -= w * c[i - 1] if i - 1 < n - 1 else 0.0
            d[i] -= w * d[i - 1]
        x_ref = np.empty(n)
        x_ref[-1] = d[-1] / bb[-1]
        for i in range(n - 2, -1, -1):
            x_ref[i] = (d[i] - upper[i] * x_ref[i + 1]) / bb[i]

        x = lu_solve(factorize(A, ordering="natural"), b)
        assert np.linalg.norm(x - x_ref) / np.linalg.norm(x_ref) < 1e-12

    def test_zero_rhs(self):
        fac = factorize(random_dd_matrix(np.random.default_rng(3)))
        assert np.all(lu_solve(fac, np.zeros(50)) == 0)

    def test_residual_contract(self):
        rng = np.random.default_rng(7)
        A = random_dd_matrix(rng)
        b = rng.normal(size=50)
        x = lu_solve(factorize(A), b)
        assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-10

    def test_pattern_mismatch_rejected(self):
        rng = np.random.default_rng(0)
        A = random_dd_matrix(rng)
        sym = symbolic_factorize(A)
        B = A.tolil()
        B[0, 49] = 5.0 if A[0, 49] == 0 else 0.0
        B[0, 47] = 3.0
        B = B.tocsr()
        if sym.pattern_contains(B):
            pytest.skip("random pattern already covered the extra entry")
        with pytest.raises(FactorizationError):
            numeric_factorize(sym, B)

    def test_singular_requires_perturbation(self):
        A = sp.lil_matrix((4, 4))
        A.setdiag([2.0, 2.0, 0.0, 2.0])
        A[0, 2] = A[2, 0] = 1e-20
        A = A.tocsr()
        with pytest.raises(FactorizationError):
            factorize(A)
        fac = factorize(A, perturb=True)
        assert len(fac.perturbed_rows) >= 1

    def test_backward_stability_sample(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(100):
            A = random_dd_matrix(rng, n=30, density=0.2)
            b = rng.normal(size=30)
            x = lu_solve(factorize(A), b)
            worst = max(worst, np.linalg.norm(A @ x - b) / np.linalg.norm(b))
        assert worst < 1e-10


class TestGmres:
    def test_identity_one_iteration(self):
        b = np.array([1.0, -2.0, 3.0])
        x, its, _ = gmres(sp.eye(3).tocsr(), b, tol=1e-8)
        assert its == 1
        assert np.allclose(x, b)

    def test_exact_preconditioner_one_iteration(self):
        rng = np.random.default_rng(2)
        A = random_dd_matrix(rng, n=30)
        fac = factorize(A)
        b = rng.normal(size=30)
        x, its, _ = gmres(A, b, M_inv=fac, tol=1e-8)
        assert its == 1
        assert np.linalg.norm(A @ x - b) <= 1e-8 * np.linalg.norm(b)

    def test_exact_termination_small_spd(self):
        rng = np.random.default_rng(4)
        Q = np.linalg.qr(rng.normal(size=(5, 5)))[0]
        A = sp.csr_matrix(Q @ np.diag([1.0, 2, 3, 4, 5]) @ Q.T)
        b = rng.normal(size=5)
        x, its, _ = gmres(A, b, tol=1e-10)
        assert its <= 5
        x_ref = np.linalg.solve(A.toarray(), b)
        assert np.linalg.norm(x - x_ref) / np.linalg.norm(x_ref) < 1e-9

    def test_true_residual_rule_with_bad_preconditioner(self):
        rng = np.random.default_rng(9)
        A = random_dd_matrix(rng, n=40)
        b = rng.normal(size=40)
        # intentionally poor preconditioner: scaled identity + noise
        D = sp.diags(1.0 / (np.asarray(A.diagonal()) * (1 + rng.random(40))))
        x, its, hist = gmres(A, b, M_inv=D, tol=1e-6)
        assert np.linalg.norm(b - A @ x) <= 1e-6 * np.linalg.norm(b)

    def test_monotone_history(self):
        rng = np.random.default_rng(12)
        A = random_dd_matrix(rng, n=60)
        b = rng.normal(size=60)
        _, _, hist = gmres(A, b, tol=1e-10)
        assert all(h2 <= h1 + 1e-14 for h1, h2 in zip(hist, hist[1:]))

    def test_max_it_error_carries_best(self):
        rng = np.random.default_rng(3)
        n = 50
        A = sp.diags(np.linspace(1, 1e4, n)).tocsr()
        b = rng.normal(size=n)
        with pytest.raises(GmresError) as err:
            gmres(A, b, tol=1e-12, max_it=3)
        assert err.value.best_x is not None
        assert len(err.value.history) >= 3

    def test_zero_rhs(self):
        A = sp.eye(4).tocsr()
        x, its, _ = gmres(A, np.zeros(4))
        assert its == 0 and np.all(x == 0)

    def test_invalid_tolerance(self):
        with pytest.raises(GmresError):
            gmres(sp.eye(2).tocsr(), np.ones(2), tol=1.5)
