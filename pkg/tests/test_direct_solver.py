import numpy as np
import pytest
import scipy.linalg

from ductflow.assembly import SparseCSR, apply_dirichlet, assemble_global
from ductflow.direct_solver import (
    SingularMatrixError,
    analyze,
    backward_error,
    factorize,
    memory_report,
    solve,
    solve_system,
)
from ductflow.fem import FlowParams
from ductflow.mesh import ChannelGeometry, Formulation, build_channel_mesh_2d, build_dof_map
from ductflow.ordering import OrderingMethod, symmetrize_pattern

GEOM2 = ChannelGeometry(length=10.0, height=1.0)


def csr_from_dense(dense):
    n = dense.shape[0]
    rows, cols = np.nonzero(dense)
    return SparseCSR.from_triplets(n, rows, cols, dense[rows, cols])


def random_sparse_dd(n, density, seed):
    """Random sparse matrix made diagonally dominant (well conditioned)."""
    rng = np.random.default_rng(seed)
    m = max(n, int(density * n * n))
    rows = rng.integers(0, n, m)
    cols = rng.integers(0, n, m)
    vals = rng.standard_normal(m)
    dense = np.zeros((n, n))
    np.add.at(dense, (rows, cols), vals)
    dense += np.diag(np.abs(dense).sum(axis=1) + 1.0)
    return csr_from_dense(dense)


def assembled_fem_system(nx, ny, seed=0, reynolds=50.0):
    mesh = build_channel_mesh_2d(nx, ny, GEOM2)
    dm = build_dof_map(mesh, Formulation.MIXED_2D)
    state = np.random.default_rng(seed).standard_normal(dm.n_dofs) * 0.1
    params = FlowParams(reynolds=reynolds)
    system = assemble_global(mesh, dm, state, params)
    bc = apply_dirichlet(system, mesh, dm, Formulation.MIXED_2D)
    coords = None
    return bc.matrix, mesh, dm


def reconstruct_lu_product(factor):
    """Dense L @ U from the stored front blocks, plus the row positions."""
    sym = factor.symbolic
    n = sym.n
    L = np.eye(n)
    U = np.zeros((n, n))
    pos_of_row = np.empty(n, dtype=np.int64)
    for f in range(sym.n_fronts):
        first = sym.front_first[f]
        s = sym.front_last[f] - first + 1
        for jj in range(s):
            pos_of_row[factor.rowids[f][jj]] = first + jj
    for f in range(sym.n_fronts):
        first = sym.front_first[f]
        s = sym.front_last[f] - first + 1
        ids = factor.rowids[f]
        colids = sym.front_ids[f]
        lu11 = factor.lu11[f]
        for jj in range(s):
            U[first + jj, colids[jj:s]] = lu11[jj, jj:]
            if len(colids) > s:
                U[first + jj, colids[s:]] = factor.u12[f][jj]
            for ii in range(jj + 1, s):
                L[pos_of_row[ids[ii]], first + jj] = lu11[ii, jj]
        for bi, row in enumerate(ids[s:]):
            L[pos_of_row[row], first:first + s] = factor.l21[f][bi]
    return L @ U, pos_of_row


def permuted_dense(matrix, perm):
    dense = matrix.to_dense()
    n = matrix.n
    out = np.zeros_like(dense)
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n)
    return dense[np.ix_(inv, inv)]


class TestAnalyze:
    def test_tridiagonal_fronts_are_2x2_chains(self):
        n = 5
        dense = np.eye(n) + np.eye(n, k=1) + np.eye(n, k=-1)
        pattern = symmetrize_pattern(csr_from_dense(dense))
        sym = analyze(pattern, OrderingMethod.NATURAL)
        assert sym.nnz_factors == 3 * n - 2 == 13
        assert all(sym.front_order(f) == 2 for f in range(sym.n_fronts))

    def test_dense_4x4_single_front(self):
        dense = np.arange(1, 17, dtype=float).reshape(4, 4) + 10 * np.eye(4)
        pattern = symmetrize_pattern(csr_from_dense(dense))
        sym = analyze(pattern, OrderingMethod.NATURAL)
        assert sym.n_fronts == 1
        assert sym.front_order(0) == 4

    def test_fem_pattern_matches_boolean_oracle(self):
        matrix, _, _ = assembled_fem_system(2, 2)
        pattern = symmetrize_pattern(matrix)
        sym = analyze(pattern, OrderingMethod.NATURAL)
        # independent boolean elimination on the dense pattern
        n = pattern.n
        dense = np.zeros((n, n), dtype=bool)
        for i in range(n):
            dense[i, pattern.neighbors(i)] = True
        np.fill_diagonal(dense, True)
        for k in range(n):
            dense[k + 1:, k + 1:] |= np.outer(dense[k + 1:, k], dense[k, k + 1:])
        assert sym.nnz_factors == int(dense.sum())

    def test_every_column_in_exactly_one_front(self):
        matrix, _, _ = assembled_fem_system(2, 2)
        sym = analyze(symmetrize_pattern(matrix), OrderingMethod.MIN_DEGREE)
        seen = np.zeros(sym.n, dtype=int)
        for f in range(sym.n_fronts):
            seen[sym.front_first[f]:sym.front_last[f] + 1] += 1
        assert np.all(seen == 1)


class TestFactorize:
    def test_identity(self):
        eye = csr_from_dense(np.eye(6))
        sym = analyze(symmetrize_pattern(eye), OrderingMethod.NATURAL)
        factor = factorize(sym, eye)
        assert factor.perturbations == []
        x, report = solve(factor, np.arange(6.0))
        assert np.array_equal(x, np.arange(6.0))
        assert report.backward_error <= 1e-15

    def test_antidiagonal_2x2_pivots(self):
        mat = csr_from_dense(np.array([[0.0, 1.0], [1.0, 0.0]]))
        sym = analyze(symmetrize_pattern(mat), OrderingMethod.NATURAL)
        factor = factorize(sym, mat)
        x, _ = solve(factor, np.array([1.0, 2.0]))
        assert np.allclose(x, [2.0, 1.0], atol=1e-14)

    @pytest.mark.parametrize("method", list(OrderingMethod))
    def test_lu_reconstruction_30x30(self, method):
        mat = random_sparse_dd(30, 0.08, 21)
        sym = analyze(symmetrize_pattern(mat), method)
        factor = factorize(sym, mat)
        assert factor.perturbations == []
        lu, pos = reconstruct_lu_product(factor)
        B = permuted_dense(mat, sym.perm.perm)
        anorm = np.abs(mat.vals).max()
        # rows of B arranged by pivot position
        row_order = np.empty(30, dtype=np.int64)
        row_order[pos] = np.arange(30)
        assert np.abs(lu - B[row_order]).max() <= 1e-12 * anorm

    def test_structurally_singular_column(self):
        dense = np.eye(4)
        dense[:, 2] = 0.0
        dense[2, 2] = 0.0
        dense[2, 3] = 1.0
        mat = csr_from_dense(dense)
        sym = analyze(symmetrize_pattern(mat), OrderingMethod.NATURAL)
        with pytest.raises(SingularMatrixError, match="column"):
            factorize(sym, mat)

    def test_small_pivot_perturbation_logged_and_recovered(self):
        dense = np.array([
            [1e-30, 0.0, 1.0],
            [0.0, 1.0, 1.0],
            [1.0, 1.0, 1.0],
        ])
        mat = csr_from_dense(dense)
        sym = analyze(symmetrize_pattern(mat), OrderingMethod.NATURAL)
        factor = factorize(sym, mat)
        assert len(factor.perturbations) >= 1
        rhs = np.array([1.0, 2.0, 3.0])
        x, report = solve(factor, rhs, refine=5)
        x_ref = scipy.linalg.solve(dense, rhs)
        assert np.allclose(x, x_ref, rtol=1e-8)
        assert report.backward_error <= 1e-10


class TestSolve:
    def test_zero_rhs_gives_exact_zero(self):
        mat = random_sparse_dd(25, 0.1, 3)
        x, report, _ = solve_system(mat, np.zeros(25))
        assert np.array_equal(x, np.zeros(25))
        assert report.backward_error == 0.0

    def test_rejects_bad_rhs(self):
        mat = random_sparse_dd(10, 0.2, 4)
        sym = analyze(symmetrize_pattern(mat), OrderingMethod.MIN_DEGREE)
        factor = factorize(sym, mat)
        with pytest.raises(ValueError):
            solve(factor, np.ones(9))
        with pytest.raises(ValueError):
            solve(factor, np.array([np.nan] + [0.0] * 9))

    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("method", list(OrderingMethod))
    def test_random_systems_match_dense_oracle(self, seed, method):
        rng = np.random.default_rng(900 + seed)
        n = int(rng.integers(10, 200))
        mat = random_sparse_dd(n, 0.03, seed)
        rhs = rng.standard_normal(n)
        sym = analyze(symmetrize_pattern(mat), method)
        factor = factorize(sym, mat)
        x, report = solve(factor, rhs)
        x_ref = scipy.linalg.solve(mat.to_dense(), rhs)
        assert np.linalg.norm(x - x_ref) <= 1e-8 * np.linalg.norm(x_ref)
        assert report.backward_error <= 1e-10

    def test_fem_stokes_like_system_vs_dense(self):
        matrix, mesh, dm = assembled_fem_system(2, 2, seed=5, reynolds=1.0)
        rhs = np.random.default_rng(6).standard_normal(dm.n_dofs)
        x, report, _ = solve_system(matrix, rhs, OrderingMethod.MIN_DEGREE)
        x_ref = scipy.linalg.solve(matrix.to_dense(), rhs)
        assert np.linalg.norm(x - x_ref) <= 1e-10 * max(1.0, np.linalg.norm(x_ref))
        assert report.backward_error <= 1e-10

    def test_factor_reuse_is_bitwise_and_immutable(self):
        mat = random_sparse_dd(40, 0.08, 8)
        sym = analyze(symmetrize_pattern(mat), OrderingMethod.MIN_DEGREE)
        factor = factorize(sym, mat)
        lu_before = [b.copy() for b in factor.lu11]
        rng = np.random.default_rng(9)
        rhss = [rng.standard_normal(40) for _ in range(4)]
        first = [solve(factor, b)[0] for b in rhss]
        second = [solve(factor, b)[0] for b in rhss]
        for a, b in zip(first, second):
            assert np.array_equal(a, b)
        for before, after in zip(lu_before, factor.lu11):
            assert np.array_equal(before, after)

    def test_phase_composability_bitwise(self):
        mat = random_sparse_dd(35, 0.1, 10)
        rhs = np.random.default_rng(11).standard_normal(35)
        x1, r1, _ = solve_system(mat, rhs, OrderingMethod.RCM)
        pattern = symmetrize_pattern(mat)
        sym = analyze(pattern, OrderingMethod.RCM)
        factor = factorize(sym, mat)
        x2, r2 = solve(factor, rhs)
        assert np.array_equal(x1, x2)
        assert r1.backward_error == r2.backward_error

    def test_amalgamation_changes_fronts_not_solutions(self):
        mat = random_sparse_dd(50, 0.06, 12)
        rhs = np.random.default_rng(13).standard_normal(50)
        pattern = symmetrize_pattern(mat)
        base = analyze(pattern, OrderingMethod.MIN_DEGREE)
        relaxed = analyze(pattern, OrderingMethod.MIN_DEGREE,
                          amalg_new_rows=2, amalg_small_front=16)
        assert relaxed.n_fronts <= base.n_fronts
        x1, _ = solve(factorize(base, mat), rhs)
        x2, _ = solve(factorize(relaxed, mat), rhs)
        assert np.allclose(x1, x2, rtol=1e-12, atol=1e-14)


class TestMemoryReport:
    def test_tridiagonal_n100(self):
        n = 100
        dense = 2 * np.eye(n) + np.eye(n, k=1) + np.eye(n, k=-1)
        mat = csr_from_dense(dense)
        sym = analyze(symmetrize_pattern(mat), OrderingMethod.NATURAL)
        stats = memory_report(sym, factorize(sym, mat))
        assert stats.nnz_factors == 3 * n - 2 == 298

    def test_dense_n10(self):
        rng = np.random.default_rng(14)
        dense = rng.standard_normal((10, 10)) + 20 * np.eye(10)
        mat = csr_from_dense(dense)
        sym = analyze(symmetrize_pattern(mat), OrderingMethod.NATURAL)
        stats = memory_report(sym, factorize(sym, mat))
        assert stats.nnz_factors == 100
        assert stats.peak_front == 10

    def test_nd_beats_natural_on_mesh_system(self):
        matrix, mesh, dm = assembled_fem_system(12, 12, seed=15)
        pattern = symmetrize_pattern(matrix)
        reports = {}
        for method in (OrderingMethod.NATURAL, OrderingMethod.NESTED_DISSECTION):
            sym = analyze(pattern, method)
            reports[method] = memory_report(sym, factorize(sym, matrix))
        assert (
            reports[OrderingMethod.NESTED_DISSECTION].estimated_bytes
            < reports[OrderingMethod.NATURAL].estimated_bytes
        )


def test_backward_error_zero_residual():
    mat = random_sparse_dd(5, 0.3, 16)
    x = np.zeros(5)
    assert backward_error(mat, x, np.zeros(5)) == 0.0
