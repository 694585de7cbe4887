"""Structured channel meshes, boundary tagging and DOF maps.

2D meshes carry a biquadratic (9-node) velocity grid with a bilinear
pressure subgrid on the element corners; 3D meshes are trilinear hex
grids with velocity unknowns only.  Nodes are numbered lexicographically
(x fastest, then y, then z), elements likewise.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class NodeTag(IntEnum):
    """Boundary classification of a mesh node.

    Wall dominates at corners so no-slip is never overridden.
    """

    INTERIOR = 0
    INLET = 1
    EXIT = 2
    WALL = 3


class Formulation(IntEnum):
    MIXED_2D = 2
    PENALTY_3D = 3


@dataclass(frozen=True)
class ChannelGeometry:
    """Non-dimensional channel extents (depth is 3D only)."""

    length: float
    height: float
    depth: float | None = None

    def __post_init__(self):
        if self.length <= 0 or self.height <= 0:
            raise ValueError("channel extents must be positive")
        if self.depth is not None and self.depth <= 0:
            raise ValueError("channel depth must be positive")


@dataclass
class Mesh:
    """Structured channel mesh.

    Attributes
    ----------
    dim : 2 or 3
    node_coords : (n_nodes, dim) float array, velocity-node positions.
    elements : (n_elements, 9) int array in 2D (biquadratic velocity
        connectivity) or (n_elements, 8) in 3D (hex corners).  Local node
        order is lexicographic over the element's reference grid.
    boundary_tags : (n_nodes,) NodeTag values.
    pressure_nodes : 2D only; (n_pressure_nodes,) velocity-node index of
        each pressure node (element corners), in pressure-grid order.
    elements_p : 2D only; (n_elements, 4) pressure connectivity in
        pressure-grid numbering.
    """

    dim: int
    geometry: ChannelGeometry
    counts: tuple[int, ...]
    node_coords: np.ndarray
    elements: np.ndarray
    boundary_tags: np.ndarray
    pressure_nodes: np.ndarray | None = None
    elements_p: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return self.node_coords.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_pressure_nodes(self) -> int:
        return 0 if self.pressure_nodes is None else len(self.pressure_nodes)

    def tag_counts(self) -> dict[NodeTag, int]:
        return {tag: int(np.sum(self.boundary_tags == tag)) for tag in NodeTag}


@dataclass
class DofMap:
    """Global unknown numbering for one formulation.

    Fields are interleaved per node, nodes in lexicographic grid order:
    a 2D velocity node contributes (u, v) and, if it also carries a
    pressure unknown, (u, v, p); a 3D node contributes (u, v, w).
    """

    formulation: Formulation
    n_dofs: int
    u_dof: np.ndarray
    v_dof: np.ndarray
    w_dof: np.ndarray | None = None
    p_dof: np.ndarray | None = None  # per velocity node, -1 where absent
    p_dof_by_pnode: np.ndarray | None = None  # per pressure-grid node

    def all_dofs_sorted(self) -> np.ndarray:
        """Every emitted DOF index, sorted; bijection check helper."""
        parts = [self.u_dof, self.v_dof]
        if self.w_dof is not None:
            parts.append(self.w_dof)
        if self.p_dof_by_pnode is not None:
            parts.append(self.p_dof_by_pnode)
        return np.sort(np.concatenate(parts))


def _check_counts(*counts):
    for c in counts:
        if int(c) != c or c < 1:
            raise ValueError(f"element counts must be positive integers, got {counts}")


def build_channel_mesh_2d(nx: int, ny: int, geom: ChannelGeometry) -> Mesh:
    """Uniform nx-by-ny quad mesh of the channel [0,L] x [0,H].

    Velocity nodes live on the (2nx+1) x (2ny+1) grid, pressure nodes on
    the (nx+1) x (ny+1) corner subgrid.  x=0 nodes are Inlet, x=L Exit,
    y=0 and y=H Wall; Wall wins at corners.
    """
    _check_counts(nx, ny)
    nvx, nvy = 2 * nx + 1, 2 * ny + 1
    xs = np.linspace(0.0, geom.length, nvx)
    ys = np.linspace(0.0, geom.height, nvy)
    X, Y = np.meshgrid(xs, ys, indexing="xy")  # row = y, col = x
    coords = np.column_stack([X.ravel(), Y.ravel()])

    ix = np.tile(np.arange(nvx), nvy)
    iy = np.repeat(np.arange(nvy), nvx)
    tags = np.full(nvx * nvy, NodeTag.INTERIOR, dtype=np.int8)
    tags[ix == nvx - 1] = NodeTag.EXIT
    tags[ix == 0] = NodeTag.INLET
    tags[(iy == 0) | (iy == nvy - 1)] = NodeTag.WALL

    ex, ey = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    ex = ex.ravel()
    ey = ey.ravel()
    # local node (dy*3 + dx) sits at grid offset (2ex+dx, 2ey+dy)
    offs = [(dx, dy) for dy in range(3) for dx in range(3)]
    elements = np.empty((nx * ny, 9), dtype=np.int64)
    for k, (dx, dy) in enumerate(offs):
        elements[:, k] = (2 * ey + dy) * nvx + (2 * ex + dx)

    # pressure subgrid: velocity nodes with even (ix, iy)
    px = np.tile(np.arange(nx + 1), ny + 1)
    py = np.repeat(np.arange(ny + 1), nx + 1)
    pressure_nodes = (2 * py) * nvx + (2 * px)
    elements_p = np.empty((nx * ny, 4), dtype=np.int64)
    for k, (dx, dy) in enumerate([(0, 0), (1, 0), (0, 1), (1, 1)]):
        elements_p[:, k] = (ey + dy) * (nx + 1) + (ex + dx)

    return Mesh(
        dim=2,
        geometry=geom,
        counts=(nx, ny),
        node_coords=coords,
        elements=elements,
        boundary_tags=tags,
        pressure_nodes=pressure_nodes,
        elements_p=elements_p,
    )


def build_channel_mesh_3d(nx: int, ny: int, nz: int, geom: ChannelGeometry) -> Mesh:
    """Uniform hex mesh of the duct [0,L] x [0,H] x [0,D].

    Trilinear velocity nodes only.  x=0 is Inlet, x=L Exit; the four
    lateral faces (y and z extremes) are Wall, dominating at edges.
    """
    _check_counts(nx, ny, nz)
    if geom.depth is None:
        raise ValueError("3D mesh requires geometry with a depth")
    nvx, nvy, nvz = nx + 1, ny + 1, nz + 1
    xs = np.linspace(0.0, geom.length, nvx)
    ys = np.linspace(0.0, geom.height, nvy)
    zs = np.linspace(0.0, geom.depth, nvz)
    ix = np.tile(np.arange(nvx), nvy * nvz)
    iy = np.tile(np.repeat(np.arange(nvy), nvx), nvz)
    iz = np.repeat(np.arange(nvz), nvx * nvy)
    coords = np.column_stack([xs[ix], ys[iy], zs[iz]])

    tags = np.full(nvx * nvy * nvz, NodeTag.INTERIOR, dtype=np.int8)
    tags[ix == nvx - 1] = NodeTag.EXIT
    tags[ix == 0] = NodeTag.INLET
    wall = (iy == 0) | (iy == nvy - 1) | (iz == 0) | (iz == nvz - 1)
    tags[wall] = NodeTag.WALL

    ex = np.tile(np.arange(nx), ny * nz)
    ey = np.tile(np.repeat(np.arange(ny), nx), nz)
    ez = np.repeat(np.arange(nz), nx * ny)
    elements = np.empty((nx * ny * nz, 8), dtype=np.int64)
    offs = [(dx, dy, dz) for dz in range(2) for dy in range(2) for dx in range(2)]
    for k, (dx, dy, dz) in enumerate(offs):
        elements[:, k] = ((ez + dz) * nvy + (ey + dy)) * nvx + (ex + dx)

    return Mesh(
        dim=3,
        geometry=geom,
        counts=(nx, ny, nz),
        node_coords=coords,
        elements=elements,
        boundary_tags=tags,
    )


def build_dof_map(mesh: Mesh, formulation: Formulation) -> DofMap:
    """Number the unknowns of `mesh` for `formulation`.

    Numbering is field-interleaved per node with nodes in lexicographic
    order, giving a deterministic bijection onto 0..n_dofs-1.
    """
    if formulation == Formulation.MIXED_2D:
        if mesh.dim != 2:
            raise ValueError("Mixed2D formulation requires a 2D mesh")
        n = mesh.n_nodes
        has_p = np.zeros(n, dtype=bool)
        has_p[mesh.pressure_nodes] = True
        per_node = np.where(has_p, 3, 2)
        offsets = np.concatenate([[0], np.cumsum(per_node)[:-1]])
        u_dof = offsets
        v_dof = offsets + 1
        p_dof = np.where(has_p, offsets + 2, -1)
        return DofMap(
            formulation=formulation,
            n_dofs=int(per_node.sum()),
            u_dof=u_dof.astype(np.int64),
            v_dof=v_dof.astype(np.int64),
            p_dof=p_dof.astype(np.int64),
            p_dof_by_pnode=p_dof[mesh.pressure_nodes].astype(np.int64),
        )
    if formulation == Formulation.PENALTY_3D:
        if mesh.dim != 3:
            raise ValueError("Penalty3D formulation requires a 3D mesh")
        n = mesh.n_nodes
        base = 3 * np.arange(n, dtype=np.int64)
        return DofMap(
            formulation=formulation,
            n_dofs=3 * n,
            u_dof=base,
            v_dof=base + 1,
            w_dof=base + 2,
        )
    raise ValueError(f"unknown formulation {formulation!r}")


def element_dof_table(mesh: Mesh, dof_map: DofMap) -> np.ndarray:
    """Per-element global DOF lists, (n_elements, 22) in 2D or (.., 24) in 3D.

    2D local order is [u0, v0, ..., u8, v8, p0..p3]; 3D is [u0, v0, w0, ...].
    """
    if dof_map.formulation == Formulation.MIXED_2D:
        table = np.empty((mesh.n_elements, 22), dtype=np.int64)
        table[:, 0:18:2] = dof_map.u_dof[mesh.elements]
        table[:, 1:18:2] = dof_map.v_dof[mesh.elements]
        table[:, 18:22] = dof_map.p_dof_by_pnode[mesh.elements_p]
        return table
    table = np.empty((mesh.n_elements, 24), dtype=np.int64)
    table[:, 0:24:3] = dof_map.u_dof[mesh.elements]
    table[:, 1:24:3] = dof_map.v_dof[mesh.elements]
    table[:, 2:24:3] = dof_map.w_dof[mesh.elements]
    return table


def dof_coordinates(mesh: Mesh, dof_map: DofMap) -> np.ndarray:
    """Node position of every DOF, (n_dofs, dim); used by geometric orderings."""
    coords = np.empty((dof_map.n_dofs, mesh.dim))
    coords[dof_map.u_dof] = mesh.node_coords
    coords[dof_map.v_dof] = mesh.node_coords
    if dof_map.w_dof is not None:
        coords[dof_map.w_dof] = mesh.node_coords
    if dof_map.p_dof_by_pnode is not None:
        coords[dof_map.p_dof_by_pnode] = mesh.node_coords[mesh.pressure_nodes]
    return coords


def dump_mesh(mesh: Mesh, path) -> None:
    """Plain-text node/element listing for debugging (not a stable format)."""
    with open(path, "w") as fh:
        fh.write(f"# dim={mesh.dim} counts={mesh.counts}\n")
        fh.write(f"# nodes {mesh.n_nodes}\n")
        for i in range(mesh.n_nodes):
            coords = " ".join(f"{c:.9g}" for c in mesh.node_coords[i])
            fh.write(f"{i} {coords} {NodeTag(mesh.boundary_tags[i]).name}\n")
        fh.write(f"# elements {mesh.n_elements}\n")
        for e in range(mesh.n_elements):
            fh.write(f"{e} " + " ".join(str(k) for k in mesh.elements[e]) + "\n")
