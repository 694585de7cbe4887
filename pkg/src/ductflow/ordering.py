"""Fill-reducing orderings and symbolic fill prediction.

Four ordering archetypes stand in for the usual external packages:
identity (natural), reverse Cuthill-McKee from a pseudo-peripheral start,
a quotient-graph minimum-degree with approximate external degrees,
supervariable merging and element absorption, and nested dissection by
recursive geometric bisection (BFS level separators when no coordinates
are attached).  All tie-breaking is by lowest node index, so every
ordering is a deterministic function of its input.

Symbolic elimination works on the symmetrized pattern: column borders are
merged bottom-up along the elimination tree, which yields the exact fill
count, the tree itself, and the per-front structures the multifrontal
factorization consumes.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .assembly import SparseCSR


class OrderingMethod(str, Enum):
    NATURAL = "natural"
    RCM = "rcm"
    MIN_DEGREE = "amd"
    NESTED_DISSECTION = "nd"


@dataclass
class SparsityPattern:
    """Symmetric adjacency (structure of A + A^T, no self loops stored).

    Node coordinates are optional; when present they enable geometric
    bisection in the nested-dissection ordering.
    """

    n: int
    adj_ptr: np.ndarray
    adj_idx: np.ndarray
    coords: np.ndarray | None = None

    @property
    def nnz_offdiag(self) -> int:
        return len(self.adj_idx)

    def neighbors(self, i: int) -> np.ndarray:
        return self.adj_idx[self.adj_ptr[i]:self.adj_ptr[i + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.adj_ptr)


@dataclass
class Permutation:
    """Old-to-new index map produced by one ordering method."""

    perm: np.ndarray
    method: OrderingMethod

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(len(self.perm))
        return inv


@dataclass
class FillStats:
    """Predicted factor size under a permutation.

    nnz_factors counts both triangles of L+U plus the diagonal; etree is
    the parent array of the elimination tree in permuted labels;
    peak_front is the largest front order.
    """

    nnz_factors: int
    etree: np.ndarray
    peak_front: int


def symmetrize_pattern(matrix: SparseCSR, coords: np.ndarray | None = None) -> SparsityPattern:
    """Adjacency of the off-diagonal structure of A + A^T."""
    if matrix.row_ptr.shape[0] != matrix.n + 1:
        raise ValueError("matrix must be square CSR")
    rows = matrix.row_indices()
    cols = matrix.col_idx
    off = rows != cols
    r = np.concatenate([rows[off], cols[off]])
    c = np.concatenate([cols[off], rows[off]])
    return _pattern_from_edges(matrix.n, r, c, coords)


def _pattern_from_edges(n, r, c, coords=None) -> SparsityPattern:
    """Deduplicated adjacency CSR from directed edge lists."""
    if len(r) == 0:
        return SparsityPattern(n, np.zeros(n + 1, dtype=np.int64),
                               np.empty(0, dtype=np.int64), coords)
    order = np.lexsort((c, r))
    r, c = r[order], c[order]
    keep = np.empty(len(r), dtype=bool)
    keep[0] = True
    keep[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
    r, c = r[keep], c[keep]
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(ptr, r + 1, 1)
    np.cumsum(ptr, out=ptr)
    return SparsityPattern(n, ptr, c.astype(np.int64), coords)


# ---------------------------------------------------------------------------
# reverse Cuthill-McKee


def _bfs_levels(ptr, idx, root, n, allowed=None):
    """Level array (-1 for unreached); restricted to `allowed` if given."""
    level = np.full(n, -1, dtype=np.int64)
    level[root] = 0
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in idx[ptr[u]:ptr[u + 1]]:
            if level[v] < 0 and (allowed is None or allowed[v]):
                level[v] = level[u] + 1
                queue.append(v)
    return level


def _pseudo_peripheral(ptr, idx, start, n, deg, allowed=None):
    """Far node of small degree; classic eccentricity-growing iteration."""
    level = _bfs_levels(ptr, idx, start, n, allowed)
    ecc = level.max()
    while True:
        last = np.flatnonzero(level == ecc)
        y = int(last[np.argsort(deg[last], kind="stable")[0]])
        level_y = _bfs_levels(ptr, idx, y, n, allowed)
        ecc_y = level_y.max()
        if ecc_y > ecc:
            ecc, level = ecc_y, level_y
        else:
            return y, level_y


def _rcm_order(ptr, idx, n):
    deg = np.diff(ptr)
    visited = np.zeros(n, dtype=bool)
    seq = []
    for comp_start in range(n):
        if visited[comp_start]:
            continue
        root, _ = _pseudo_peripheral(ptr, idx, comp_start, n, deg)
        visited[root] = True
        queue = deque([root])
        while queue:
            u = queue.popleft()
            seq.append(u)
            nbrs = idx[ptr[u]:ptr[u + 1]]
            fresh = nbrs[~visited[nbrs]]
            if len(fresh):
                fresh = fresh[np.argsort(deg[fresh], kind="stable")]
                visited[fresh] = True
                queue.extend(int(v) for v in fresh)
    return np.array(seq[::-1], dtype=np.int64)


# ---------------------------------------------------------------------------
# minimum degree on the quotient graph


def _min_degree_order(ptr, idx, n):
    """Elimination sequence by approximate external minimum degree.

    Quotient-graph bookkeeping keeps element sizes exact: every element
    adjacent to the pivot is absorbed into the pivot's new element, and
    supervariable merges conserve summed weights.  Ties break on the
    lowest original index through the (degree, index) heap order.
    """
    if n == 0:
        return np.empty(0, dtype=np.int64)
    vlist = [list(map(int, idx[ptr[i]:ptr[i + 1]])) for i in range(n)]
    elist: list[list[int]] = [[] for _ in range(n)]
    emembers: dict[int, list[int]] = {}
    esize: dict[int, int] = {}
    nv = [1] * n
    members = [[i] for i in range(n)]
    degree = [len(vlist[i]) for i in range(n)]
    heap = [(degree[i], i) for i in range(n)]
    heapq.heapify(heap)
    mark = [0] * n
    stamp = 0
    order_reps = []
    k = 0

    while k < n:
        d, p = heapq.heappop(heap)
        if nv[p] <= 0 or degree[p] != d:
            continue

        # gather the pivot's front: variable neighbors plus element members
        stamp += 1
        mark[p] = stamp
        front = []
        for v in vlist[p]:
            if nv[v] > 0 and mark[v] != stamp:
                mark[v] = stamp
                front.append(v)
        for e in elist[p]:
            mem = emembers.pop(e, None)  # every element of p is absorbed
            if mem is None:
                continue
            esize.pop(e, None)
            for v in mem:
                if nv[v] > 0 and mark[v] != stamp:
                    mark[v] = stamp
                    front.append(v)

        order_reps.append(p)
        k += nv[p]
        nv[p] = 0
        if not front:
            continue

        ep = p
        emembers[ep] = front
        front_weight = sum(nv[v] for v in front)
        esize[ep] = front_weight

        # w[e] = |Le \ front| for alive elements touching the front
        w = {}
        for v in front:
            for e in elist[v]:
                if e == ep or e not in emembers:
                    continue
                if e not in w:
                    w[e] = esize[e]
                w[e] -= nv[v]

        buckets: dict[int, list[int]] = {}
        for v in front:
            new_vl = [u for u in vlist[v] if nv[u] > 0 and mark[u] != stamp]
            vlist[v] = new_vl
            new_el = [ep]
            outer = 0
            for e in elist[v]:
                if e == ep or e not in emembers:
                    continue
                we = w[e]
                if we == 0:
                    # aggressive absorption: Le is contained in the new front
                    del emembers[e]
                    del esize[e]
                    continue
                new_el.append(e)
                outer += we
            elist[v] = new_el
            a_deg = sum(nv[u] for u in new_vl)
            ext = front_weight - nv[v]
            degree[v] = min(n - k, degree[v] + ext, a_deg + ext + outer)
            key = (sum(new_vl) + sum(new_el)) % 1000003
            buckets.setdefault(key, []).append(v)

        # supervariables: merge front members with identical adjacency
        for bucket in buckets.values():
            if len(bucket) < 2:
                continue
            for a_pos in range(len(bucket) - 1):
                v = bucket[a_pos]
                if nv[v] <= 0:
                    continue
                sv = se = None
                for b_pos in range(a_pos + 1, len(bucket)):
                    u = bucket[b_pos]
                    if nv[u] <= 0:
                        continue
                    if len(vlist[u]) != len(vlist[v]) or len(elist[u]) != len(elist[v]):
                        continue
                    if sv is None:
                        sv, se = set(vlist[v]), set(elist[v])
                    if sv == set(vlist[u]) and se == set(elist[u]):
                        keep, drop = (v, u) if v < u else (u, v)
                        merged_deg = degree[v] - nv[drop]
                        nv[keep] = nv[v] + nv[u]
                        nv[drop] = 0
                        members[keep].extend(members[drop])
                        degree[keep] = merged_deg
                        v = keep

        for v in front:
            if nv[v] > 0:
                heapq.heappush(heap, (degree[v], v))

    seq = []
    for rep in order_reps:
        seq.extend(sorted(members[rep]))
    return np.array(seq, dtype=np.int64)


# ---------------------------------------------------------------------------
# nested dissection


def _subgraph(ptr, idx, nodes):
    """Relabelled adjacency restricted to `nodes` (sorted ascending)."""
    local = {int(node): i for i, node in enumerate(nodes)}
    sub_ptr = np.zeros(len(nodes) + 1, dtype=np.int64)
    cols = []
    for i, node in enumerate(nodes):
        row = sorted(local[v] for v in map(int, idx[ptr[node]:ptr[node + 1]]) if v in local)
        cols.extend(row)
        sub_ptr[i + 1] = len(cols)
    return sub_ptr, np.array(cols, dtype=np.int64)


def _neighbor_counts_in(ptr, idx, nodes, mask):
    """Per node of `nodes`: how many of its neighbors have mask True."""
    starts = ptr[nodes]
    lens = ptr[nodes + 1] - starts
    total = int(lens.sum())
    if total == 0:
        return np.zeros(len(nodes), dtype=np.int64)
    flat = np.arange(total) - np.repeat(np.cumsum(lens) - lens, lens) + np.repeat(starts, lens)
    hits = mask[idx[flat]].astype(np.int64)
    seg_ids = np.repeat(np.arange(len(nodes)), lens)
    return np.bincount(seg_ids, weights=hits, minlength=len(nodes)).astype(np.int64)


def _neighbor_min_coord(ptr, idx, nodes, coord, in_sub):
    """Per node of `nodes`: min coordinate over its in-subgraph neighbors."""
    starts = ptr[nodes]
    lens = ptr[nodes + 1] - starts
    total = int(lens.sum())
    out = np.full(len(nodes), np.inf)
    if total == 0:
        return out
    flat = np.arange(total) - np.repeat(np.cumsum(lens) - lens, lens) + np.repeat(starts, lens)
    nbrs = idx[flat]
    vals = np.where(in_sub[nbrs], coord[nbrs], np.inf)
    seg_ids = np.repeat(np.arange(len(nodes)), lens)
    np.minimum.at(out, seg_ids, vals)
    return out


def _nd_order(ptr, idx, n, coords, leaf_size=32, max_candidates=33):
    seq = []
    deg = np.diff(ptr)
    in_a = np.zeros(n, dtype=bool)
    in_sub = np.zeros(n, dtype=bool)

    def order_leaf(nodes):
        sub_ptr, sub_idx = _subgraph(ptr, idx, nodes)
        local = _min_degree_order(sub_ptr, sub_idx, len(nodes))
        seq.extend(int(nodes[i]) for i in local)

    def recurse(nodes):
        if len(nodes) <= leaf_size:
            order_leaf(nodes)
            return
        if coords is not None:
            m = len(nodes)
            # candidate cuts: distinct-coordinate boundaries near the median
            # on every axis; the smallest separator wins (ties: balance,
            # then axis and position), which snaps planes onto element
            # interfaces and alternates axes by cost rather than extent
            in_sub[nodes] = True
            best = None
            for axis in range(coords.shape[1]):
                cv = coords[nodes, axis]
                key = np.lexsort((nodes, cv))
                sv = cv[key]
                lo, hi = max(1, int(0.25 * m)), min(m, int(0.75 * m) + 1)
                cand = np.flatnonzero(sv[lo:hi] != sv[lo - 1:hi - 1]) + lo
                if len(cand) == 0:
                    continue
                if len(cand) > max_candidates:
                    sel = np.linspace(0, len(cand) - 1, max_candidates).astype(int)
                    cand = cand[np.unique(sel)]
                nbr_min = _neighbor_min_coord(
                    ptr, idx, nodes[key], coords[:, axis], in_sub
                )
                for i in cand:
                    s = sv[i]
                    nsep = int(np.count_nonzero((sv >= s) & (nbr_min < s)))
                    score = (nsep, abs(m - 2 * int(i)), axis, int(i))
                    if best is None or score < best[0]:
                        best = (score, axis, int(i), key)
            in_sub[nodes] = False
            if best is None:
                order_leaf(np.sort(nodes))
                return
            _, axis, i, key = best
            sorted_nodes = nodes[key]
            a_nodes = np.sort(sorted_nodes[:i])
            b_nodes = np.sort(sorted_nodes[i:])
            # separator: B-side nodes with at least one A-side neighbor
            in_a[a_nodes] = True
            counts = _neighbor_counts_in(ptr, idx, b_nodes, in_a)
            in_a[a_nodes] = False
            sep = b_nodes[counts > 0]
            b_rest = b_nodes[counts == 0]
            recurse(a_nodes)
            recurse(b_rest)
            seq.extend(int(s) for s in sep)
        else:
            allowed = np.zeros(n, dtype=bool)
            allowed[nodes] = True
            start = int(nodes[np.argmin(deg[nodes])])
            _, level = _pseudo_peripheral(ptr, idx, start, n, deg, allowed)
            lev = level[nodes]
            nlev = int(lev.max())
            if nlev < 2:
                order_leaf(nodes)
                return
            mid = (nlev + 1) // 2
            a_nodes = nodes[(lev >= 0) & (lev < mid)]
            b_nodes = nodes[(lev > mid) | (lev < 0)]
            sep = nodes[lev == mid]
            recurse(a_nodes)
            recurse(b_nodes)
            seq.extend(int(s) for s in sep)

    recurse(np.arange(n, dtype=np.int64))
    return np.array(seq, dtype=np.int64)


# ---------------------------------------------------------------------------
# public ordering API


def compute_ordering(pattern: SparsityPattern, method: OrderingMethod) -> Permutation:
    """Permutation (old to new) for the requested method."""
    method = OrderingMethod(method)
    n = pattern.n
    if method == OrderingMethod.NATURAL:
        return Permutation(np.arange(n, dtype=np.int64), method)
    if method == OrderingMethod.RCM:
        seq = _rcm_order(pattern.adj_ptr, pattern.adj_idx, n)
    elif method == OrderingMethod.MIN_DEGREE:
        seq = _min_degree_order(pattern.adj_ptr, pattern.adj_idx, n)
    else:
        seq = _nd_order(pattern.adj_ptr, pattern.adj_idx, n, pattern.coords)
    perm = np.empty(n, dtype=np.int64)
    perm[seq] = np.arange(n, dtype=np.int64)
    return Permutation(perm, method)


def permute_pattern(pattern: SparsityPattern, perm: np.ndarray):
    """Adjacency CSR of the symmetrically permuted pattern."""
    n = pattern.n
    rows = np.repeat(np.arange(n), np.diff(pattern.adj_ptr))
    pr = perm[rows]
    pc = perm[pattern.adj_idx]
    order = np.lexsort((pc, pr))
    pr, pc = pr[order], pc[order]
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(ptr, pr + 1, 1)
    np.cumsum(ptr, out=ptr)
    return ptr, pc


def _symbolic_elimination(ptr, idx, n, want_fronts=False):
    """Bottom-up border merge along the elimination tree.

    Returns (parent, border_sizes, nnz_factors, peak_front, supernodes).
    `supernodes` is None unless requested; otherwise a list of
    (first_col, last_col, border) tuples where the pivot runs are maximal
    under the exact (zero-padding) supernode criterion and `border` holds
    the rows below the pivot block.
    """
    parent = np.full(n, -1, dtype=np.int64)
    kids: list[list | None] = [[] for _ in range(n)]
    sizes = np.zeros(n, dtype=np.int64)
    total = 0
    peak = 1 if n else 0
    supernodes = [] if want_fronts else None
    run_start = 0
    prev_border = None

    for j in range(n):
        nb = idx[ptr[j]:ptr[j + 1]]
        lo = np.searchsorted(nb, j + 1)
        parts = kids[j]
        if parts:
            parts.append(nb[lo:])
            border = np.unique(np.concatenate(parts))
        else:
            border = nb[lo:].astype(np.int64, copy=True)
        kids[j] = None
        size = len(border)
        sizes[j] = size
        total += size
        if size + 1 > peak:
            peak = size + 1
        if size:
            par = int(border[0])
            parent[j] = par
            kids[par].append(border[1:])

        if want_fronts:
            if j > 0:
                joined = parent[j - 1] == j and sizes[j] == sizes[j - 1] - 1
                if not joined:
                    supernodes.append((run_start, j - 1, prev_border))
                    run_start = j
            prev_border = border

    if want_fronts and n:
        supernodes.append((run_start, n - 1, prev_border))
    nnz_factors = int(n + 2 * total)
    return parent, sizes, nnz_factors, peak, supernodes


def symbolic_fill(pattern: SparsityPattern, perm) -> FillStats:
    """Exact LU fill on the permuted symmetric pattern."""
    p = perm.perm if isinstance(perm, Permutation) else np.asarray(perm)
    if not np.array_equal(np.sort(p), np.arange(pattern.n)):
        raise ValueError("perm is not a bijection on the pattern order")
    ptr, idx = permute_pattern(pattern, p)
    parent, _, nnz, peak, _ = _symbolic_elimination(ptr, idx, pattern.n)
    return FillStats(nnz_factors=nnz, etree=parent, peak_front=peak)
