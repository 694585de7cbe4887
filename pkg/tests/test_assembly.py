import numpy as np
import pytest

from ductflow.assembly import (
    LinearSystem,
    SparseCSR,
    TripletBatch,
    apply_dirichlet,
    assemble_global,
    assemble_partition,
    assemble_rhs_global,
    constrained_dofs,
    merge_triplets,
    partition_elements,
    pressure_pin_dof,
    write_matrix_market,
)
from ductflow.fem import FlowParams, element_system_2d
from ductflow.mesh import (
    ChannelGeometry,
    Formulation,
    NodeTag,
    build_channel_mesh_2d,
    build_channel_mesh_3d,
    build_dof_map,
    element_dof_table,
)

GEOM2 = ChannelGeometry(length=10.0, height=1.0)
PARAMS2 = FlowParams(reynolds=100.0, formulation=Formulation.MIXED_2D)


def random_state(n, seed=0):
    return np.random.default_rng(seed).standard_normal(n)


class TestPartition:
    def test_even_split(self):
        mesh = build_channel_mesh_2d(2, 2, GEOM2)
        part = partition_elements(mesh, 2)
        assert [part.load(w) for w in range(2)] == [2, 2]

    def test_balanced_remainder(self):
        mesh = build_channel_mesh_2d(5, 2, GEOM2)
        part = partition_elements(mesh, 4)
        assert [part.load(w) for w in range(4)] == [3, 3, 2, 2]

    def test_300x300_on_12(self):
        mesh = build_channel_mesh_2d(300, 300, GEOM2)
        part = partition_elements(mesh, 12)
        loads = np.bincount(part.owner, minlength=12)
        assert np.all(loads == 7500)

    def test_contiguous_blocks(self):
        mesh = build_channel_mesh_2d(4, 3, GEOM2)
        part = partition_elements(mesh, 3)
        assert np.all(np.diff(part.owner) >= 0)

    def test_out_of_range(self):
        mesh = build_channel_mesh_2d(2, 2, GEOM2)
        with pytest.raises(ValueError):
            partition_elements(mesh, 0)
        with pytest.raises(ValueError):
            partition_elements(mesh, 5)


class TestMerge:
    def test_duplicate_sum(self):
        batch = TripletBatch(
            rows=np.array([0, 0]),
            cols=np.array([0, 0]),
            vals=np.array([1.0, 2.0]),
            rhs_idx=np.array([], dtype=np.int64),
            rhs_vals=np.array([]),
        )
        system = merge_triplets([batch], 2)
        assert system.matrix.nnz == 1
        assert system.matrix.vals[0] == 3.0

    def test_no_duplicates_keeps_count(self):
        batch = TripletBatch(
            rows=np.array([0, 1, 2]),
            cols=np.array([1, 2, 0]),
            vals=np.array([1.0, 2.0, 3.0]),
            rhs_idx=np.array([0]),
            rhs_vals=np.array([5.0]),
        )
        system = merge_triplets([batch], 3)
        assert system.matrix.nnz == 3
        assert system.rhs[0] == 5.0

    def test_index_out_of_range(self):
        batch = TripletBatch(
            rows=np.array([9]),
            cols=np.array([0]),
            vals=np.array([1.0]),
            rhs_idx=np.array([], dtype=np.int64),
            rhs_vals=np.array([]),
        )
        with pytest.raises(IndexError):
            merge_triplets([batch], 3)


class TestAssembly:
    def test_single_element_triplet_count(self):
        mesh = build_channel_mesh_2d(1, 1, GEOM2)
        dm = build_dof_map(mesh, Formulation.MIXED_2D)
        part = partition_elements(mesh, 1)
        state = random_state(dm.n_dofs, 1)
        batch = assemble_partition(mesh, dm, part, 0, state, PARAMS2)
        assert len(batch) == 22 * 22 == 484

    @pytest.mark.parametrize("p", [1, 2, 3, 4])
    def test_partition_count_invariance_2x2(self, p):
        mesh = build_channel_mesh_2d(2, 2, GEOM2)
        dm = build_dof_map(mesh, Formulation.MIXED_2D)
        state = random_state(dm.n_dofs, 2)
        ref = assemble_global(mesh, dm, state, PARAMS2, p=1)
        sys_p = assemble_global(mesh, dm, state, PARAMS2, p=p)
        assert np.array_equal(ref.matrix.row_ptr, sys_p.matrix.row_ptr)
        assert np.array_equal(ref.matrix.col_idx, sys_p.matrix.col_idx)
        assert np.allclose(ref.matrix.vals, sys_p.matrix.vals, atol=1e-12, rtol=1e-12)
        assert np.allclose(ref.rhs, sys_p.rhs, atol=1e-12, rtol=1e-12)

    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_partition_invariance_3x3(self, p):
        mesh = build_channel_mesh_2d(3, 3, GEOM2)
        dm = build_dof_map(mesh, Formulation.MIXED_2D)
        state = random_state(dm.n_dofs, 3)
        ref = assemble_global(mesh, dm, state, PARAMS2, p=1)
        sys_p = assemble_global(mesh, dm, state, PARAMS2, p=p)
        assert np.array_equal(ref.matrix.col_idx, sys_p.matrix.col_idx)
        assert np.allclose(ref.matrix.vals, sys_p.matrix.vals, atol=1e-12, rtol=1e-12)

    def test_assembly_deterministic(self):
        mesh = build_channel_mesh_2d(3, 2, GEOM2)
        dm = build_dof_map(mesh, Formulation.MIXED_2D)
        state = random_state(dm.n_dofs, 4)
        a = assemble_global(mesh, dm, state, PARAMS2, p=2)
        b = assemble_global(mesh, dm, state, PARAMS2, p=2)
        assert np.array_equal(a.matrix.vals, b.matrix.vals)
        assert np.array_equal(a.rhs, b.rhs)

    def test_pattern_independent_of_state(self):
        mesh = build_channel_mesh_2d(2, 2, GEOM2)
        dm = build_dof_map(mesh, Formulation.MIXED_2D)
        a = assemble_global(mesh, dm, random_state(dm.n_dofs, 5), PARAMS2)
        b = assemble_global(mesh, dm, random_state(dm.n_dofs, 6), PARAMS2)
        assert np.array_equal(a.matrix.row_ptr, b.matrix.row_ptr)
        assert np.array_equal(a.matrix.col_idx, b.matrix.col_idx)

    def test_dense_scatter_oracle(self):
        # brute force: scatter-add per-element dense systems
        mesh = build_channel_mesh_2d(2, 2, GEOM2)
        dm = build_dof_map(mesh, Formulation.MIXED_2D)
        state = random_state(dm.n_dofs, 7)
        table = element_dof_table(mesh, dm)
        dense = np.zeros((dm.n_dofs, dm.n_dofs))
        coords_all = mesh.node_coords[mesh.elements]
        for e in range(mesh.n_elements):
            sys_e = element_system_2d(coords_all[e], state[table[e]], PARAMS2)
            dense[np.ix_(table[e], table[e])] += sys_e.jacobian
        system = assemble_global(mesh, dm, state, PARAMS2)
        assert np.allclose(system.matrix.to_dense(), dense, atol=1e-13)

    def test_rhs_matches_full_assembly(self):
        mesh = build_channel_mesh_2d(3, 2, GEOM2)
        dm = build_dof_map(mesh, Formulation.MIXED_2D)
        state = random_state(dm.n_dofs, 8)
        full = assemble_global(mesh, dm, state, PARAMS2, p=2)
        rhs_only = assemble_rhs_global(mesh, dm, state, PARAMS2, p=2)
        assert np.array_equal(full.rhs, rhs_only)

    def test_3d_assembly_smoke(self):
        geom = ChannelGeometry(length=3.0, height=1.0, depth=1.0)
        mesh = build_channel_mesh_3d(3, 2, 2, geom)
        dm = build_dof_map(mesh, Formulation.PENALTY_3D)
        params = FlowParams(reynolds=50.0, formulation=Formulation.PENALTY_3D, penalty=1e7)
        state = random_state(dm.n_dofs, 9)
        system = assemble_global(mesh, dm, state, params, p=3)
        assert system.matrix.n == dm.n_dofs
        assert system.matrix.nnz > 0


class TestDirichlet:
    def test_wall_row_becomes_identity(self):
        mesh = build_channel_mesh_2d(2, 2, GEOM2)
        dm = build_dof_map(mesh, Formulation.MIXED_2D)
        state = random_state(dm.n_dofs, 10)
        system = assemble_global(mesh, dm, state, PARAMS2)
        bc = apply_dirichlet(system, mesh, dm, Formulation.MIXED_2D)
        wall_nodes = np.flatnonzero(mesh.boundary_tags == NodeTag.WALL)
        dense = bc.matrix.to_dense()
        for node in wall_nodes[:3]:
            i = dm.u_dof[node]
            expected = np.zeros(dm.n_dofs)
            expected[i] = 1.0
            assert np.array_equal(dense[i], expected)
            assert bc.rhs[i] == 0.0

    def test_constrained_count_matches_perimeter_enumeration(self):
        mesh = build_channel_mesh_2d(2, 2, GEOM2)
        dm = build_dof_map(mesh, Formulation.MIXED_2D)
        fixed = constrained_dofs(mesh, dm)
        # brute force on coordinates: all boundary velocity nodes except the
        # exit column (natural outflow) carry two Dirichlet components
        L, H = GEOM2.length, GEOM2.height
        x, y = mesh.node_coords.T
        eps = 1e-12
        wall = (np.abs(y) < eps) | (np.abs(y - H) < eps)
        inlet = (np.abs(x) < eps) & ~wall
        n_vel_nodes = int(wall.sum() + inlet.sum())
        assert len(fixed) == 2 * n_vel_nodes + 1

    def test_pressure_pin_on_exit_centerline(self):
        mesh = build_channel_mesh_2d(4, 4, GEOM2)
        dm = build_dof_map(mesh, Formulation.MIXED_2D)
        pin = pressure_pin_dof(mesh, dm)
        pnode = int(np.flatnonzero(dm.p_dof_by_pnode == pin)[0])
        coord = mesh.node_coords[mesh.pressure_nodes[pnode]]
        assert coord[0] == pytest.approx(GEOM2.length)
        assert coord[1] == pytest.approx(GEOM2.height / 2)

    def test_dirichlet_mask_and_columns_untouched(self):
        mesh = build_channel_mesh_2d(2, 2, GEOM2)
        dm = build_dof_map(mesh, Formulation.MIXED_2D)
        state = random_state(dm.n_dofs, 11)
        system = assemble_global(mesh, dm, state, PARAMS2)
        bc = apply_dirichlet(system, mesh, dm, Formulation.MIXED_2D)
        fixed = constrained_dofs(mesh, dm)
        assert np.all(bc.dirichlet_mask[fixed])
        # free rows keep their original entries, including Dirichlet columns
        dense_pre = system.matrix.to_dense()
        dense_post = bc.matrix.to_dense()
        free = ~bc.dirichlet_mask
        assert np.array_equal(dense_pre[free], dense_post[free])


class TestSparseCSR:
    def test_matvec_matches_dense(self):
        rng = np.random.default_rng(12)
        n = 20
        rows = rng.integers(0, n, 80)
        cols = rng.integers(0, n, 80)
        vals = rng.standard_normal(80)
        mat = SparseCSR.from_triplets(n, rows, cols, vals)
        x = rng.standard_normal(n)
        assert np.allclose(mat.matvec(x), mat.to_dense() @ x, atol=1e-13)

    def test_columns_sorted_within_rows(self):
        rng = np.random.default_rng(13)
        mat = SparseCSR.from_triplets(
            10, rng.integers(0, 10, 50), rng.integers(0, 10, 50),
            rng.standard_normal(50),
        )
        for i in range(10):
            cols = mat.col_idx[mat.row_ptr[i]:mat.row_ptr[i + 1]]
            assert np.all(np.diff(cols) > 0)


def test_matrix_market_dump(tmp_path):
    mesh = build_channel_mesh_2d(1, 1, GEOM2)
    dm = build_dof_map(mesh, Formulation.MIXED_2D)
    state = random_state(dm.n_dofs, 14)
    system = apply_dirichlet(
        assemble_global(mesh, dm, state, PARAMS2), mesh, dm, Formulation.MIXED_2D
    )
    path = tmp_path / "system.mtx"
    write_matrix_market(system, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "%%MatrixMarket matrix coordinate real general"
    n, m, nnz = map(int, lines[1].split())
    assert n == m == dm.n_dofs
    assert nnz == system.matrix.nnz
    # spot-check a parsed entry against the matrix (1-based indices)
    r, c, v = lines[2].split()
    dense = system.matrix.to_dense()
    assert float(v) == dense[int(r) - 1, int(c) - 1]
    rhs_lines = (tmp_path / "system.mtx.rhs").read_text().splitlines()
    assert len(rhs_lines) == 2 + dm.n_dofs
