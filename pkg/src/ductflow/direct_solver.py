"""Multifrontal sparse LU with separate analyze / factorize / solve phases.

The analysis permutes the symmetrized pattern with a fill-reducing
ordering, builds the elimination tree, groups columns into exact
(zero-padding) supernodes and fixes a postorder schedule.  Optional
relaxed amalgamation can merge consecutive supernodes at the price of
stored zeros; it is off by default so factor storage equals the
mathematical fill.

Factorization eliminates each front with partial pivoting restricted to
the fully summed rows.  Pivots smaller than eps_pivot times the front's
max entry are perturbed and logged instead of delayed, keeping front
sizes static; iterative refinement in the solve phase recovers the lost
accuracy.  Contribution blocks flow to parent fronts through extend-add
in a fixed postorder, so factorizations are bitwise reproducible.

The numeric factor is immutable after creation: any number of solves can
reuse it, which is what makes the frozen-Jacobian Newton variant cheap.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .assembly import SparseCSR
from .ordering import (
    OrderingMethod,
    Permutation,
    SparsityPattern,
    _symbolic_elimination,
    compute_ordering,
    permute_pattern,
)

EPS_PIVOT = 1e-12


class SingularMatrixError(ValueError):
    """Structurally singular input (an empty pivot column)."""


def structural_matching(matrix: SparseCSR) -> np.ndarray:
    """Row permutation giving a zero-free diagonal (maximum transversal).

    Static pivoting needs a structural pivot candidate in every fully
    summed block; mixed-formulation Jacobians have an empty pressure
    diagonal, so their rows are matched to coupled momentum rows first.
    Diagonal entries are seeded before augmenting, which makes the result
    the identity whenever the diagonal is already zero-free.  Returns
    rowperm with A[rowperm[j], j] structurally nonzero; raises if no
    perfect matching exists.
    """
    n = matrix.n
    # assembled systems store explicit zeros and cancellation residues;
    # a pivot candidate must carry real weight relative to its column
    absv = np.abs(matrix.vals)
    colmax = np.zeros(n)
    np.maximum.at(colmax, matrix.col_idx, absv)
    keep = absv >= 1e-10 * colmax[matrix.col_idx]
    rows = matrix.row_indices()[keep]
    cols = matrix.col_idx[keep]
    vals = absv[keep]
    # candidates scanned largest first so matches carry numeric weight
    order = np.lexsort((rows, -vals, cols))
    crows = rows[order]
    cvals = vals[order]
    cptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(cptr, cols + 1, 1)
    np.cumsum(cptr, out=cptr)

    row_of_col = np.full(n, -1, dtype=np.int64)
    col_of_row = np.full(n, -1, dtype=np.int64)
    has_diag = np.zeros(n, dtype=bool)
    has_diag[cols[rows == cols]] = True
    diag_cols = np.flatnonzero(has_diag)
    row_of_col[diag_cols] = diag_cols
    col_of_row[diag_cols] = diag_cols

    # local two-cycles: a diagonal-free column j trades rows with a
    # mutually coupled, self-matched partner r, keeping the displacement
    # local and the permuted pattern close to symmetric
    rord = np.lexsort((cols, rows))
    rrows_cols = cols[rord]
    rrows_vals = vals[rord]
    rptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(rptr, rows + 1, 1)
    np.cumsum(rptr, out=rptr)
    for j in range(n):
        if row_of_col[j] >= 0 or col_of_row[j] >= 0:
            continue
        row_j_cols = rrows_cols[rptr[j]:rptr[j + 1]]
        row_j_vals = rrows_vals[rptr[j]:rptr[j + 1]]
        best_w, best_r = -1.0, -1
        for idx in range(cptr[j], cptr[j + 1]):
            r = int(crows[idx])
            if col_of_row[r] != r:
                continue
            k = np.searchsorted(row_j_cols, r)
            if k < len(row_j_cols) and row_j_cols[k] == r:
                w = min(cvals[idx], row_j_vals[k])
                if w > best_w or (w == best_w and r < best_r):
                    best_w, best_r = w, r
        if best_r >= 0:
            row_of_col[j] = best_r
            col_of_row[best_r] = j
            row_of_col[best_r] = j
            col_of_row[j] = best_r

    # two-pointer augmenting search: a cheap scan for free rows runs ahead
    # of the depth-first dive, which keeps augmenting paths short and the
    # displaced rows local
    look = cptr[:-1].copy()
    pos = np.empty(n, dtype=np.int64)
    stamp = np.full(n, -1, dtype=np.int64)
    pred_row = np.empty(n, dtype=np.int64)
    pred_col = np.empty(n, dtype=np.int64)
    for j0 in range(n):
        if row_of_col[j0] >= 0:
            continue
        stack = [j0]
        pos[j0] = cptr[j0]
        stamp[j0] = j0
        found = False
        while stack and not found:
            c = stack[-1]
            free_row = -1
            while look[c] < cptr[c + 1]:
                r = int(crows[look[c]])
                look[c] += 1
                if col_of_row[r] < 0:
                    free_row = r
                    break
            if free_row >= 0:
                cc, rr = c, free_row
                while True:
                    row_of_col[cc] = rr
                    col_of_row[rr] = cc
                    if cc == j0:
                        break
                    rr = int(pred_row[cc])
                    cc = int(pred_col[cc])
                found = True
                break
            progressed = False
            while pos[c] < cptr[c + 1]:
                r = int(crows[pos[c]])
                pos[c] += 1
                owner = int(col_of_row[r])
                if owner >= 0 and stamp[owner] != j0:
                    stamp[owner] = j0
                    pred_row[owner] = r
                    pred_col[owner] = c
                    pos[owner] = cptr[owner]
                    stack.append(owner)
                    progressed = True
                    break
            if not progressed:
                stack.pop()
        if not found:
            raise SingularMatrixError(
                f"structurally singular: no row match for column {j0}"
            )
    return row_of_col


@dataclass
class SymbolicFactorization:
    """Ordering, assembly tree and per-front structure; value independent."""

    n: int
    perm: Permutation
    col_parent: np.ndarray
    front_first: np.ndarray
    front_last: np.ndarray
    front_border: list
    front_ids: list
    front_parent: np.ndarray
    front_children: list
    postorder: np.ndarray
    front_of_col: np.ndarray
    cb_positions: list
    nnz_factors: int
    peak_front: int
    _asm_cache: tuple | None = None

    @property
    def n_fronts(self) -> int:
        return len(self.front_first)

    def front_order(self, f: int) -> int:
        return int(self.front_last[f] - self.front_first[f] + 1 + len(self.front_border[f]))


@dataclass
class NumericFactor:
    """Per-front LU blocks; reusable for arbitrarily many solves."""

    symbolic: SymbolicFactorization
    matrix: SparseCSR
    lu11: list
    l21: list
    u12: list
    rowids: list
    perturbations: list

    @property
    def n(self) -> int:
        return self.symbolic.n


@dataclass
class SolveReport:
    """Refinement steps used and the final normwise backward error."""

    refinement_iterations: int
    backward_error: float


@dataclass
class MemoryStats:
    nnz_factors: int
    peak_front: int
    estimated_bytes: int


def analyze(
    pattern: SparsityPattern,
    method: OrderingMethod = OrderingMethod.MIN_DEGREE,
    amalg_new_rows: int = 0,
    amalg_small_front: int = 0,
) -> SymbolicFactorization:
    """Ordering plus symbolic factorization of the pattern.

    The relaxed amalgamation thresholds merge a supernode into its
    consecutive parent when the padding stays within `amalg_new_rows`
    rows or the merged front order is at most `amalg_small_front`.  The
    defaults disable both, so fronts are the exact supernodes.
    """
    perm = compute_ordering(pattern, method)
    n = pattern.n
    ptr, idx = permute_pattern(pattern, perm.perm)
    col_parent, _, nnz_factors, peak, supernodes = _symbolic_elimination(
        ptr, idx, n, want_fronts=True
    )
    if n == 0:
        supernodes = []

    if amalg_new_rows > 0 or amalg_small_front > 0:
        supernodes = _relax_amalgamation(supernodes, amalg_new_rows, amalg_small_front)

    n_fronts = len(supernodes)
    front_first = np.array([s[0] for s in supernodes], dtype=np.int64)
    front_last = np.array([s[1] for s in supernodes], dtype=np.int64)
    front_border = [np.asarray(s[2], dtype=np.int64) for s in supernodes]
    front_ids = [
        np.concatenate([np.arange(f0, f1 + 1, dtype=np.int64), b])
        for f0, f1, b in zip(front_first, front_last, front_border)
    ]
    front_of_col = np.empty(n, dtype=np.int64)
    for f in range(n_fronts):
        front_of_col[front_first[f]:front_last[f] + 1] = f

    front_parent = np.full(n_fronts, -1, dtype=np.int64)
    front_children: list[list[int]] = [[] for _ in range(n_fronts)]
    for f in range(n_fronts):
        if len(front_border[f]):
            par = int(front_of_col[front_border[f][0]])
            front_parent[f] = par
            front_children[par].append(f)

    # extend-add target positions of each child's border inside its parent
    cb_positions: list = [None] * n_fronts
    for f in range(n_fronts):
        par = front_parent[f]
        if par >= 0:
            cb_positions[f] = np.searchsorted(front_ids[par], front_border[f])

    # explicit DFS postorder over the front forest, children ascending
    postorder = []
    roots = [f for f in range(n_fronts) if front_parent[f] < 0]
    for root in roots:
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                postorder.append(node)
                continue
            stack.append((node, True))
            for ch in reversed(front_children[node]):
                stack.append((ch, False))

    peak_front = max((len(ids) for ids in front_ids), default=0)
    return SymbolicFactorization(
        n=n,
        perm=perm,
        col_parent=col_parent,
        front_first=front_first,
        front_last=front_last,
        front_border=front_border,
        front_ids=front_ids,
        front_parent=front_parent,
        front_children=front_children,
        postorder=np.array(postorder, dtype=np.int64),
        front_of_col=front_of_col,
        cb_positions=cb_positions,
        nnz_factors=nnz_factors,
        peak_front=max(peak_front, peak),
    )


def _relax_amalgamation(supernodes, new_rows_cap, small_front_cap):
    """Merge consecutive (child, parent) supernode pairs within thresholds."""
    merged = []
    for sn in supernodes:
        if merged:
            f0, f1, border = merged[-1]
            g0, g1, gborder = sn
            consecutive = f1 + 1 == g0
            is_parent = len(border) > 0 and g0 <= border[0] <= g1
            if consecutive and is_parent:
                s_g = g1 - g0 + 1
                padding = (s_g + len(gborder)) - len(border)
                merged_order = (g1 - f0 + 1) + len(gborder)
                if padding <= new_rows_cap or merged_order <= small_front_cap:
                    merged[-1] = (f0, g1, gborder)
                    continue
        merged.append(sn)
    return merged


def _build_assembly_maps(symbolic: SymbolicFactorization, matrix: SparseCSR):
    """Map every stored entry of the matrix into (front, local row, col)."""
    perm = symbolic.perm.perm
    pi = perm[matrix.row_indices()]
    pj = perm[matrix.col_idx]
    fronts = symbolic.front_of_col[np.minimum(pi, pj)]
    order = np.argsort(fronts, kind="stable")
    fronts_sorted = fronts[order]
    boundaries = np.searchsorted(
        fronts_sorted, np.arange(symbolic.n_fronts + 1)
    )
    maps = [None] * symbolic.n_fronts
    for f in range(symbolic.n_fronts):
        lo, hi = boundaries[f], boundaries[f + 1]
        if lo == hi:
            maps[f] = None
            continue
        sel = order[lo:hi]
        ids = symbolic.front_ids[f]
        rloc = np.searchsorted(ids, pi[sel])
        cloc = np.searchsorted(ids, pj[sel])
        maps[f] = (sel, rloc, cloc)
    return maps


def _assembly_maps(symbolic: SymbolicFactorization, matrix: SparseCSR):
    cache = symbolic._asm_cache
    if cache is not None:
        ptr, cidx, maps = cache
        if np.array_equal(ptr, matrix.row_ptr) and np.array_equal(cidx, matrix.col_idx):
            return maps
    maps = _build_assembly_maps(symbolic, matrix)
    symbolic._asm_cache = (matrix.row_ptr.copy(), matrix.col_idx.copy(), maps)
    return maps


def factorize(symbolic: SymbolicFactorization, matrix: SparseCSR) -> NumericFactor:
    """Numeric LU through the front tree with static pivot perturbation."""
    n = symbolic.n
    if matrix.n != n:
        raise ValueError("matrix order does not match the analysis")
    col_counts = np.bincount(matrix.col_idx, minlength=n)
    if np.any(col_counts == 0):
        j = int(np.flatnonzero(col_counts == 0)[0])
        raise SingularMatrixError(f"structurally singular: column {j} is empty")

    maps = _assembly_maps(symbolic, matrix)
    anorm = float(np.abs(matrix.vals).max()) if matrix.nnz else 0.0
    if anorm == 0.0:
        raise SingularMatrixError("matrix has no nonzero values")

    nf = symbolic.n_fronts
    lu11: list = [None] * nf
    l21: list = [None] * nf
    u12: list = [None] * nf
    rowids: list = [None] * nf
    perturbations = []
    cb_store: dict[int, np.ndarray] = {}

    for f in symbolic.postorder:
        f = int(f)
        ids = symbolic.front_ids[f]
        s = int(symbolic.front_last[f] - symbolic.front_first[f] + 1)
        fsz = len(ids)
        W = np.zeros((fsz, fsz))
        m = maps[f]
        if m is not None:
            sel, rloc, cloc = m
            W[rloc, cloc] = matrix.vals[sel]
        for ch in symbolic.front_children[f]:
            cb = cb_store.pop(ch)
            pos = symbolic.cb_positions[ch]
            W[np.ix_(pos, pos)] += cb

        front_scale = np.abs(W).max()
        if front_scale == 0.0:
            front_scale = anorm
        ids_piv = ids.copy()
        for jj in range(s):
            rel = int(np.argmax(np.abs(W[jj:s, jj])))
            r = jj + rel
            if r != jj:
                W[[jj, r]] = W[[r, jj]]
                ids_piv[[jj, r]] = ids_piv[[r, jj]]
            piv = W[jj, jj]
            if abs(piv) < EPS_PIVOT * front_scale:
                new_piv = EPS_PIVOT * front_scale * (1.0 if piv >= 0 else -1.0)
                perturbations.append((f, int(symbolic.front_first[f] + jj), float(piv), float(new_piv)))
                W[jj, jj] = new_piv
                piv = new_piv
            if jj + 1 < fsz:
                W[jj + 1:, jj] /= piv
                if jj + 1 < s:
                    W[jj + 1:, jj + 1:s] -= np.outer(W[jj + 1:, jj], W[jj, jj + 1:s])

        if fsz > s:
            U12 = solve_triangular(
                W[:s, :s], W[:s, s:], lower=True, unit_diagonal=True, check_finite=False
            )
            CB = W[s:, s:] - W[s:, :s] @ U12
            cb_store[f] = CB
            u12[f] = U12
            l21[f] = W[s:, :s].copy()
        else:
            u12[f] = np.zeros((s, 0))
            l21[f] = np.zeros((0, s))
        lu11[f] = W[:s, :s].copy()
        rowids[f] = ids_piv

    return NumericFactor(
        symbolic=symbolic,
        matrix=matrix,
        lu11=lu11,
        l21=l21,
        u12=u12,
        rowids=rowids,
        perturbations=perturbations,
    )


def _triangular_solve(factor: NumericFactor, b: np.ndarray) -> np.ndarray:
    """One forward/backward pass through the front tree."""
    sym = factor.symbolic
    perm = sym.perm.perm
    w = np.empty_like(b)
    w[perm] = b

    for f in sym.postorder:
        f = int(f)
        ids = factor.rowids[f]
        s = int(sym.front_last[f] - sym.front_first[f] + 1)
        v = w[ids]
        y = solve_triangular(
            factor.lu11[f], v[:s], lower=True, unit_diagonal=True, check_finite=False
        )
        w[ids[:s]] = y
        if len(ids) > s:
            w[ids[s:]] = v[s:] - factor.l21[f] @ y

    for f in sym.postorder[::-1]:
        f = int(f)
        ids = factor.rowids[f]
        colids = sym.front_ids[f]
        s = int(sym.front_last[f] - sym.front_first[f] + 1)
        y = w[ids[:s]]
        if len(colids) > s:
            y = y - factor.u12[f] @ w[colids[s:]]
        x = solve_triangular(factor.lu11[f], y, lower=False, check_finite=False)
        w[colids[:s]] = x

    return w[perm]


def backward_error(matrix: SparseCSR, x: np.ndarray, b: np.ndarray, resid=None) -> float:
    """Normwise backward error |Ax-b|_inf / (|A|_inf |x|_inf + |b|_inf)."""
    if resid is None:
        resid = matrix.matvec(x) - b
    rnorm = float(np.abs(resid).max()) if len(resid) else 0.0
    if rnorm == 0.0:
        return 0.0
    denom = matrix.norm_inf() * float(np.abs(x).max()) + float(np.abs(b).max())
    if denom == 0.0:
        return np.inf
    return rnorm / denom


def solve(factor: NumericFactor, rhs: np.ndarray, refine: int = 2):
    """Solve with the stored factors plus iterative refinement.

    Refinement recomputes the residual with the original matrix and stops
    at backward error 1e-12 or after `refine` corrections.
    """
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (factor.n,):
        raise ValueError("right-hand side length mismatch")
    if not np.all(np.isfinite(rhs)):
        raise ValueError("right-hand side contains non-finite entries")

    x = _triangular_solve(factor, rhs)
    matrix = factor.matrix
    resid = rhs - matrix.matvec(x)
    berr = backward_error(matrix, x, rhs, resid=-resid)
    iters = 0
    while berr > 1e-12 and iters < refine:
        dx = _triangular_solve(factor, resid)
        x = x + dx
        resid = rhs - matrix.matvec(x)
        berr = backward_error(matrix, x, rhs, resid=-resid)
        iters += 1
    return x, SolveReport(refinement_iterations=iters, backward_error=berr)


def prepare(
    matrix: SparseCSR,
    method: OrderingMethod = OrderingMethod.MIN_DEGREE,
    coords: np.ndarray | None = None,
    match_rows: bool = True,
    amalg_new_rows: int = 0,
    amalg_small_front: int = 0,
):
    """Row matching plus analysis for a matrix; returns (rowperm, symbolic).

    rowperm is None when matching is disabled or resolves to the
    identity.  Reuse the pair across factorizations of matrices with the
    same pattern (Newton iterations): apply `rowperm` to the matrix rows
    and the right-hand side, then factorize and solve as usual.
    """
    from .ordering import symmetrize_pattern

    rowperm = None
    if match_rows:
        perm = structural_matching(matrix)
        if not np.array_equal(perm, np.arange(matrix.n)):
            rowperm = perm
            matrix = matrix.permute_rows(rowperm)
    pattern = symmetrize_pattern(matrix, coords)
    symbolic = analyze(pattern, method, amalg_new_rows, amalg_small_front)
    return rowperm, symbolic


def solve_system(
    matrix: SparseCSR,
    rhs: np.ndarray,
    method: OrderingMethod = OrderingMethod.MIN_DEGREE,
    coords: np.ndarray | None = None,
    refine: int = 2,
    match_rows: bool = True,
):
    """Convenience one-shot: match + analyze + factorize + solve."""
    rowperm, symbolic = prepare(matrix, method, coords, match_rows)
    if rowperm is not None:
        matrix = matrix.permute_rows(rowperm)
        rhs = np.asarray(rhs, dtype=float)[rowperm]
    factor = factorize(symbolic, matrix)
    x, report = solve(factor, rhs, refine=refine)
    return x, report, factor


def memory_report(symbolic: SymbolicFactorization, factor: NumericFactor) -> MemoryStats:
    """Factor-size proxy: 8 bytes per factor entry plus front bookkeeping."""
    bookkeeping = 8 * sum(len(ids) for ids in symbolic.front_ids) + 64 * symbolic.n_fronts
    return MemoryStats(
        nnz_factors=symbolic.nnz_factors,
        peak_front=symbolic.peak_front,
        estimated_bytes=8 * symbolic.nnz_factors + bookkeeping,
    )
