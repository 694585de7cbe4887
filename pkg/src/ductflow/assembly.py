"""Partitioned element assembly into coordinate triplets and merged CSR.

Elements are distributed to workers in contiguous, balanced blocks of the
lexicographic element order.  Each worker emits the dense element systems
of its elements as coordinate triplets (duplicates included); the merge
sums duplicates in (worker id, emission order), which makes the assembled
system bitwise reproducible for a fixed worker count.  Dirichlet rows are
replaced by identity rows with zero right-hand side, the correction form
of the boundary conditions: the iterate itself carries the boundary
values, so its correction there is zero.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fem import (
    DegenerateElementError,
    batch_residual_2d,
    batch_residual_3d,
    batch_system_2d,
    batch_system_3d,
    FlowParams,
)
from .mesh import DofMap, Formulation, Mesh, NodeTag, element_dof_table


@dataclass(frozen=True)
class Partition:
    """Element ownership map; loads differ by at most one element."""

    p: int
    owner: np.ndarray

    def load(self, worker_id: int) -> int:
        return int(np.sum(self.owner == worker_id))


@dataclass
class TripletBatch:
    """Coordinate-format contributions of one worker.

    rows/cols/vals hold every element-matrix entry (duplicates included);
    rhs_idx/rhs_vals hold the right-hand-side contributions -R_e.
    """

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    rhs_idx: np.ndarray
    rhs_vals: np.ndarray

    def __len__(self):
        return len(self.vals)


@dataclass
class SparseCSR:
    """Compressed sparse rows with strictly increasing columns per row."""

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    vals: np.ndarray

    @property
    def nnz(self) -> int:
        return len(self.vals)

    def row_indices(self) -> np.ndarray:
        """Expanded row index per stored entry."""
        return np.repeat(np.arange(self.n), np.diff(self.row_ptr))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        contrib = self.vals * x[self.col_idx]
        return np.bincount(self.row_indices(), weights=contrib, minlength=self.n)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n, self.n))
        dense[self.row_indices(), self.col_idx] = self.vals
        return dense

    def norm_inf(self) -> float:
        """Matrix infinity norm (max absolute row sum)."""
        if self.nnz == 0:
            return 0.0
        sums = np.bincount(self.row_indices(), weights=np.abs(self.vals), minlength=self.n)
        return float(sums.max())

    def permute_rows(self, rowperm: np.ndarray) -> "SparseCSR":
        """CSR with row i taken from row rowperm[i]; columns untouched."""
        lens = np.diff(self.row_ptr)[rowperm]
        total = int(lens.sum())
        new_ptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(lens, out=new_ptr[1:])
        starts = self.row_ptr[rowperm]
        flat = np.arange(total) - np.repeat(new_ptr[:-1], lens) + np.repeat(starts, lens)
        return SparseCSR(self.n, new_ptr, self.col_idx[flat], self.vals[flat])

    @staticmethod
    def from_triplets(n: int, rows, cols, vals) -> "SparseCSR":
        """Sort by (row, col) and sum duplicates.

        The sort is stable, so duplicate entries are accumulated in their
        emission order and the result is deterministic for a fixed input.
        """
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if len(rows) and (rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= n):
            raise IndexError("triplet index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows) == 0:
            return SparseCSR(n, np.zeros(n + 1, dtype=np.int64), rows, vals)
        new_group = np.empty(len(rows), dtype=bool)
        new_group[0] = True
        new_group[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        starts = np.flatnonzero(new_group)
        out_vals = np.add.reduceat(vals, starts)
        out_rows = rows[starts]
        out_cols = cols[starts]
        row_ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(row_ptr, out_rows + 1, 1)
        np.cumsum(row_ptr, out=row_ptr)
        return SparseCSR(n, row_ptr, out_cols, out_vals)


@dataclass
class LinearSystem:
    """Assembled Newton system J * dx = -R with Dirichlet bookkeeping."""

    matrix: SparseCSR
    rhs: np.ndarray
    dirichlet_mask: np.ndarray


def partition_elements(mesh: Mesh, p: int) -> Partition:
    """Contiguous balanced blocks over the lexicographic element order."""
    n_el = mesh.n_elements
    if p < 1 or p > n_el:
        raise ValueError(f"worker count {p} out of range 1..{n_el}")
    base, extra = divmod(n_el, p)
    owner = np.empty(n_el, dtype=np.int64)
    start = 0
    for w in range(p):
        size = base + (1 if w < extra else 0)
        owner[start:start + size] = w
        start += size
    return Partition(p=p, owner=owner)


def _element_inputs(mesh: Mesh, dof_map: DofMap, state: np.ndarray, owned: np.ndarray):
    table = element_dof_table(mesh, dof_map)[owned]
    coords = mesh.node_coords[mesh.elements[owned]]
    return table, coords, state[table]


def assemble_partition(
    mesh: Mesh,
    dof_map: DofMap,
    partition: Partition,
    worker_id: int,
    state: np.ndarray,
    params: FlowParams,
) -> TripletBatch:
    """Element systems of the worker's elements, in ascending element order."""
    if worker_id >= partition.p:
        raise ValueError(f"worker {worker_id} >= partition size {partition.p}")
    owned = np.flatnonzero(partition.owner == worker_id)
    table, coords, states = _element_inputs(mesh, dof_map, state, owned)
    try:
        if mesh.dim == 2:
            R, J = batch_system_2d(coords, states, params.reynolds)
        else:
            R, J = batch_system_3d(coords, states, params.reynolds, params.penalty)
    except DegenerateElementError as exc:
        raise DegenerateElementError(f"{exc} (worker {worker_id}, global ids {owned})") from exc
    d = table.shape[1]
    rows = np.broadcast_to(table[:, :, None], (len(owned), d, d)).ravel()
    cols = np.broadcast_to(table[:, None, :], (len(owned), d, d)).ravel()
    return TripletBatch(
        rows=rows.copy(),
        cols=cols.copy(),
        vals=J.ravel(),
        rhs_idx=table.ravel().copy(),
        rhs_vals=(-R).ravel(),
    )


def assemble_partition_rhs(
    mesh: Mesh,
    dof_map: DofMap,
    partition: Partition,
    worker_id: int,
    state: np.ndarray,
    params: FlowParams,
):
    """Right-hand-side contributions only (no Jacobian work)."""
    if worker_id >= partition.p:
        raise ValueError(f"worker {worker_id} >= partition size {partition.p}")
    owned = np.flatnonzero(partition.owner == worker_id)
    table, coords, states = _element_inputs(mesh, dof_map, state, owned)
    if mesh.dim == 2:
        R = batch_residual_2d(coords, states, params.reynolds)
    else:
        R = batch_residual_3d(coords, states, params.reynolds, params.penalty)
    return table.ravel().copy(), (-R).ravel()


def merge_triplets(batches: list[TripletBatch], n_dofs: int) -> LinearSystem:
    """Sum duplicates into CSR; batches are concatenated in worker order."""
    rows = np.concatenate([b.rows for b in batches])
    cols = np.concatenate([b.cols for b in batches])
    vals = np.concatenate([b.vals for b in batches])
    matrix = SparseCSR.from_triplets(n_dofs, rows, cols, vals)
    rhs_idx = np.concatenate([b.rhs_idx for b in batches])
    rhs_vals = np.concatenate([b.rhs_vals for b in batches])
    if len(rhs_idx) and (rhs_idx.min() < 0 or rhs_idx.max() >= n_dofs):
        raise IndexError("rhs index out of range")
    rhs = np.zeros(n_dofs)
    np.add.at(rhs, rhs_idx, rhs_vals)
    return LinearSystem(matrix=matrix, rhs=rhs, dirichlet_mask=np.zeros(n_dofs, dtype=bool))


def merge_rhs(parts, n_dofs: int, dirichlet_mask: np.ndarray | None = None) -> np.ndarray:
    """Accumulate (index, value) rhs contributions; zero Dirichlet rows."""
    rhs = np.zeros(n_dofs)
    idx = np.concatenate([p[0] for p in parts])
    vals = np.concatenate([p[1] for p in parts])
    np.add.at(rhs, idx, vals)
    if dirichlet_mask is not None:
        rhs[dirichlet_mask] = 0.0
    return rhs


def pressure_pin_dof(mesh: Mesh, dof_map: DofMap) -> int:
    """Pressure DOF at the exit-plane node nearest the channel centerline."""
    L, H = mesh.geometry.length, mesh.geometry.height
    pcoords = mesh.node_coords[mesh.pressure_nodes]
    on_exit = np.flatnonzero(np.isclose(pcoords[:, 0], L))
    pick = on_exit[np.argmin(np.abs(pcoords[on_exit, 1] - 0.5 * H))]
    return int(dof_map.p_dof_by_pnode[pick])


def constrained_dofs(mesh: Mesh, dof_map: DofMap) -> np.ndarray:
    """Sorted Dirichlet DOF list: inlet and wall velocities, plus the 2D
    pressure datum."""
    tags = mesh.boundary_tags
    fixed_nodes = np.flatnonzero((tags == NodeTag.INLET) | (tags == NodeTag.WALL))
    dofs = [dof_map.u_dof[fixed_nodes], dof_map.v_dof[fixed_nodes]]
    if dof_map.w_dof is not None:
        dofs.append(dof_map.w_dof[fixed_nodes])
    if dof_map.formulation == Formulation.MIXED_2D:
        dofs.append(np.array([pressure_pin_dof(mesh, dof_map)], dtype=np.int64))
    return np.sort(np.concatenate(dofs))


def apply_dirichlet(
    system: LinearSystem, mesh: Mesh, dof_map: DofMap, formulation: Formulation
) -> LinearSystem:
    """Replace constrained rows by identity rows with zero rhs.

    Columns are left untouched; the pattern therefore stays fixed across
    Newton iterations and variants.
    """
    if formulation != dof_map.formulation:
        raise ValueError("formulation does not match the DOF map")
    fixed = constrained_dofs(mesh, dof_map)
    mask = np.zeros(dof_map.n_dofs, dtype=bool)
    mask[fixed] = True

    mat = system.matrix
    entry_rows = mat.row_indices()
    keep = ~mask[entry_rows]
    rows = np.concatenate([entry_rows[keep], fixed])
    cols = np.concatenate([mat.col_idx[keep], fixed])
    vals = np.concatenate([mat.vals[keep], np.ones(len(fixed))])
    matrix = SparseCSR.from_triplets(mat.n, rows, cols, vals)
    rhs = system.rhs.copy()
    rhs[mask] = 0.0
    return LinearSystem(matrix=matrix, rhs=rhs, dirichlet_mask=mask)


def assemble_global(
    mesh: Mesh,
    dof_map: DofMap,
    state: np.ndarray,
    params: FlowParams,
    p: int = 1,
    pool: ThreadPoolExecutor | None = None,
) -> LinearSystem:
    """Assemble the merged pre-BC system with p partition workers."""
    partition = partition_elements(mesh, p)
    args = [(mesh, dof_map, partition, w, state, params) for w in range(p)]
    if pool is not None and p > 1:
        batches = list(pool.map(lambda a: assemble_partition(*a), args))
    else:
        batches = [assemble_partition(*a) for a in args]
    return merge_triplets(batches, dof_map.n_dofs)


def assemble_rhs_global(
    mesh: Mesh,
    dof_map: DofMap,
    state: np.ndarray,
    params: FlowParams,
    p: int = 1,
    pool: ThreadPoolExecutor | None = None,
    dirichlet_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Assemble -R only, with Dirichlet rows zeroed when a mask is given."""
    partition = partition_elements(mesh, p)
    args = [(mesh, dof_map, partition, w, state, params) for w in range(p)]
    if pool is not None and p > 1:
        parts = list(pool.map(lambda a: assemble_partition_rhs(*a), args))
    else:
        parts = [assemble_partition_rhs(*a) for a in args]
    return merge_rhs(parts, dof_map.n_dofs, dirichlet_mask)


def write_matrix_market(system: LinearSystem, path) -> None:
    """Dump the matrix in 1-based coordinate Matrix Market format.

    The right-hand side goes next to it as `<path>.rhs` in array format.
    """
    mat = system.matrix
    rows = mat.row_indices()
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{mat.n} {mat.n} {mat.nnz}\n")
        for r, c, v in zip(rows, mat.col_idx, mat.vals):
            fh.write(f"{r + 1} {c + 1} {v:.17g}\n")
    with open(f"{path}.rhs", "w") as fh:
        fh.write("%%MatrixMarket matrix array real general\n")
        fh.write(f"{mat.n} 1\n")
        for v in system.rhs:
            fh.write(f"{v:.17g}\n")
