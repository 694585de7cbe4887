"""Per-element residuals and analytic Jacobians for steady duct flow.

Two formulations:

* 2D mixed: biquadratic velocities with bilinear pressure on the element
  corners (22 unknowns per element, layout [u0, v0, ..., u8, v8, p0..p3]).
  Momentum uses the conservative convection form and the stress-divergence
  viscous form with coefficients 2/Re on the diagonal strains and 1/Re on
  the shear strain; continuity is weighted by the pressure basis.  The
  weak-form boundary integral is dropped, which makes zero traction at the
  exit the natural condition.

* 3D penalty: trilinear velocities only (24 unknowns, [u0, v0, w0, ...]).
  The pressure is eliminated by the grad-div penalty term, which is
  integrated with the 1-point rule (full integration locks the trilinear
  element) while every other term uses the 2x2x2 rule.

All kernels are batched over elements; the `element_system_*` wrappers
evaluate a single element.  Residuals are quadratic in the state, so the
analytic Jacobians are exact linearizations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..mesh import Formulation, Mesh
from .quadrature import gauss_rule
from .shapes import q1_shapes_2d, q1_shapes_3d, q2_shapes


class DegenerateElementError(ValueError):
    """Raised when an element has a non-positive mapping Jacobian."""


@dataclass(frozen=True)
class FlowParams:
    """Flow parameters: Reynolds number and, for 3D, the penalty factor."""

    reynolds: float
    formulation: Formulation = Formulation.MIXED_2D
    penalty: float | None = None

    def __post_init__(self):
        if self.reynolds <= 0:
            raise ValueError("Reynolds number must be positive")
        if self.formulation == Formulation.PENALTY_3D:
            if self.penalty is None or self.penalty <= 0:
                raise ValueError("3D penalty formulation needs penalty > 0")


@dataclass
class ElementSystem:
    """One element's residual vector, Jacobian matrix and DOF scatter list."""

    residual: np.ndarray
    jacobian: np.ndarray
    global_dofs: np.ndarray


# local DOF slices
U2 = np.arange(0, 18, 2)
V2 = np.arange(1, 18, 2)
P2 = np.arange(18, 22)
U3 = np.arange(0, 24, 3)
V3 = np.arange(1, 24, 3)
W3 = np.arange(2, 24, 3)

# reference-element tables, evaluated once
_RULE2 = gauss_rule(2, 3)
_N2, _G2REF = q2_shapes(_RULE2.points)          # (q,9), (q,9,2)
_PSI2 = q1_shapes_2d(_RULE2.points)             # (q,4)
_RULE3 = gauss_rule(3, 2)
_N3, _G3REF = q1_shapes_3d(_RULE3.points)       # (q,8), (q,8,3)
_RULE3P = gauss_rule(3, 1)
_N3P, _G3PREF = q1_shapes_3d(_RULE3P.points)    # (1,8), (1,8,3)


def _mapping_2d(coords, gradref):
    """detJ (E,q) and physical shape gradients gx, gy (E,q,a)."""
    # G[e,q,i,j] = d x_i / d xi_j
    G = np.einsum("qaj,eai->eqij", gradref, coords)
    det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
    if np.any(det <= 0):
        bad = int(np.argwhere(np.any(det <= 0, axis=1))[0, 0])
        raise DegenerateElementError(f"non-positive Jacobian in element {bad}")
    inv = np.empty_like(G)
    inv[..., 0, 0] = G[..., 1, 1]
    inv[..., 0, 1] = -G[..., 0, 1]
    inv[..., 1, 0] = -G[..., 1, 0]
    inv[..., 1, 1] = G[..., 0, 0]
    inv /= det[..., None, None]
    # dN/dx_i = dN/dxi_j * (G^-1)[j,i]
    phys = np.einsum("qaj,eqji->eqai", gradref, inv)
    return det, phys[..., 0], phys[..., 1]


def _mapping_3d(coords, gradref):
    G = np.einsum("qaj,eai->eqij", gradref, coords)
    det = np.linalg.det(G)
    if np.any(det <= 0):
        bad = int(np.argwhere(np.any(det <= 0, axis=1))[0, 0])
        raise DegenerateElementError(f"non-positive Jacobian in element {bad}")
    inv = np.linalg.inv(G)
    phys = np.einsum("qaj,eqji->eqai", gradref, inv)
    return det, phys[..., 0], phys[..., 1], phys[..., 2]


def _bop(test, trial):
    """Sum over quadrature points: (E,q,i),(E,q,j) -> (E,i,j)."""
    return np.matmul(test.transpose(0, 2, 1), trial)


def _fields_2d(coords, states):
    det, gx, gy = _mapping_2d(coords, _G2REF)
    U, V, P = states[:, U2], states[:, V2], states[:, P2]
    u = U @ _N2.T
    v = V @ _N2.T
    ux = np.einsum("eqa,ea->eq", gx, U)
    uy = np.einsum("eqa,ea->eq", gy, U)
    vx = np.einsum("eqa,ea->eq", gx, V)
    vy = np.einsum("eqa,ea->eq", gy, V)
    p = P @ _PSI2.T
    w = _RULE2.weights[None, :] * det
    return w, gx, gy, u, v, ux, uy, vx, vy, p


def batch_residual_2d(coords, states, reynolds):
    """Residuals (E, 22) of the 2D mixed weak form."""
    w, gx, gy, u, v, ux, uy, vx, vy, p = _fields_2d(coords, states)
    nu = 1.0 / reynolds
    conv_u = 2.0 * u * ux + v * uy + u * vy
    conv_v = v * ux + u * vx + 2.0 * v * vy
    shear = uy + vx

    R = np.zeros((coords.shape[0], 22))
    R[:, U2] = (
        (w * conv_u) @ _N2
        + np.einsum("eq,eqa->ea", w * (2.0 * nu * ux - p), gx)
        + np.einsum("eq,eqa->ea", w * nu * shear, gy)
    )
    R[:, V2] = (
        (w * conv_v) @ _N2
        + np.einsum("eq,eqa->ea", w * nu * shear, gx)
        + np.einsum("eq,eqa->ea", w * (2.0 * nu * vy - p), gy)
    )
    R[:, P2] = (w * (ux + vy)) @ _PSI2
    return R


def batch_system_2d(coords, states, reynolds):
    """Residuals (E, 22) and exact Jacobians (E, 22, 22), 2D mixed form."""
    w, gx, gy, u, v, ux, uy, vx, vy, p = _fields_2d(coords, states)
    E, q = w.shape
    nu = 1.0 / reynolds
    conv_u = 2.0 * u * ux + v * uy + u * vy
    conv_v = v * ux + u * vx + 2.0 * v * vy
    shear = uy + vx

    R = np.zeros((E, 22))
    R[:, U2] = (
        (w * conv_u) @ _N2
        + np.einsum("eq,eqa->ea", w * (2.0 * nu * ux - p), gx)
        + np.einsum("eq,eqa->ea", w * nu * shear, gy)
    )
    R[:, V2] = (
        (w * conv_v) @ _N2
        + np.einsum("eq,eqa->ea", w * nu * shear, gx)
        + np.einsum("eq,eqa->ea", w * (2.0 * nu * vy - p), gy)
    )
    R[:, P2] = (w * (ux + vy)) @ _PSI2

    Nb = np.broadcast_to(_N2, (E, q, 9))
    PSIb = np.broadcast_to(_PSI2, (E, q, 4))
    wN = w[..., None] * Nb
    wgx = w[..., None] * gx
    wgy = w[..., None] * gy
    wPSI = w[..., None] * PSIb

    # convection derivatives (trial side)
    du_conv_u = (2.0 * ux + vy)[..., None] * Nb + 2.0 * u[..., None] * gx + v[..., None] * gy
    dv_conv_u = uy[..., None] * Nb + u[..., None] * gy
    du_conv_v = vx[..., None] * Nb + v[..., None] * gx
    dv_conv_v = (ux + 2.0 * vy)[..., None] * Nb + u[..., None] * gx + 2.0 * v[..., None] * gy

    J = np.zeros((E, 22, 22))
    J[:, U2[:, None], U2[None, :]] = (
        _bop(wN, du_conv_u) + 2.0 * nu * _bop(wgx, gx) + nu * _bop(wgy, gy)
    )
    J[:, U2[:, None], V2[None, :]] = _bop(wN, dv_conv_u) + nu * _bop(wgy, gx)
    J[:, U2[:, None], P2[None, :]] = -_bop(wgx, PSIb)
    J[:, V2[:, None], U2[None, :]] = _bop(wN, du_conv_v) + nu * _bop(wgx, gy)
    J[:, V2[:, None], V2[None, :]] = (
        _bop(wN, dv_conv_v) + nu * _bop(wgx, gx) + 2.0 * nu * _bop(wgy, gy)
    )
    J[:, V2[:, None], P2[None, :]] = -_bop(wgy, PSIb)
    J[:, P2[:, None], U2[None, :]] = _bop(wPSI, gx)
    J[:, P2[:, None], V2[None, :]] = _bop(wPSI, gy)
    return R, J


def _fields_3d(coords, states):
    det, gx, gy, gz = _mapping_3d(coords, _G3REF)
    U, V, W = states[:, U3], states[:, V3], states[:, W3]
    u, v, wvel = U @ _N3.T, V @ _N3.T, W @ _N3.T
    grads = {}
    for name, g in (("x", gx), ("y", gy), ("z", gz)):
        grads["u" + name] = np.einsum("eqa,ea->eq", g, U)
        grads["v" + name] = np.einsum("eqa,ea->eq", g, V)
        grads["w" + name] = np.einsum("eqa,ea->eq", g, W)
    wq = _RULE3.weights[None, :] * det
    return wq, gx, gy, gz, u, v, wvel, grads


def _penalty_geometry(coords, states):
    """Centroid (1-point rule) divergence data for the penalty term."""
    det, gx, gy, gz = _mapping_3d(coords, _G3PREF)
    U, V, W = states[:, U3], states[:, V3], states[:, W3]
    div = (
        np.einsum("eqa,ea->eq", gx, U)
        + np.einsum("eqa,ea->eq", gy, V)
        + np.einsum("eqa,ea->eq", gz, W)
    )
    w1 = _RULE3P.weights[None, :] * det  # (E,1)
    return w1, gx, gy, gz, div


def batch_residual_3d(coords, states, reynolds, penalty):
    """Residuals (E, 24) of the 3D penalty weak form."""
    wq, gx, gy, gz, u, v, wvel, g = _fields_3d(coords, states)
    nu = 1.0 / reynolds
    conv_u = 2.0 * u * g["ux"] + v * g["uy"] + u * g["vy"] + wvel * g["uz"] + u * g["wz"]
    conv_v = g["ux"] * v + u * g["vx"] + 2.0 * v * g["vy"] + g["vz"] * wvel + v * g["wz"]
    conv_w = g["ux"] * wvel + u * g["wx"] + g["vy"] * wvel + v * g["wy"] + 2.0 * wvel * g["wz"]
    sxy = g["uy"] + g["vx"]
    sxz = g["uz"] + g["wx"]
    syz = g["vz"] + g["wy"]

    R = np.zeros((coords.shape[0], 24))
    R[:, U3] = (
        (wq * conv_u) @ _N3
        + np.einsum("eq,eqa->ea", wq * 2.0 * nu * g["ux"], gx)
        + np.einsum("eq,eqa->ea", wq * nu * sxy, gy)
        + np.einsum("eq,eqa->ea", wq * nu * sxz, gz)
    )
    R[:, V3] = (
        (wq * conv_v) @ _N3
        + np.einsum("eq,eqa->ea", wq * nu * sxy, gx)
        + np.einsum("eq,eqa->ea", wq * 2.0 * nu * g["vy"], gy)
        + np.einsum("eq,eqa->ea", wq * nu * syz, gz)
    )
    R[:, W3] = (
        (wq * conv_w) @ _N3
        + np.einsum("eq,eqa->ea", wq * nu * sxz, gx)
        + np.einsum("eq,eqa->ea", wq * nu * syz, gy)
        + np.einsum("eq,eqa->ea", wq * 2.0 * nu * g["wz"], gz)
    )

    w1, px, py, pz, div = _penalty_geometry(coords, states)
    R[:, U3] += penalty * np.einsum("eq,eqa->ea", w1 * div, px)
    R[:, V3] += penalty * np.einsum("eq,eqa->ea", w1 * div, py)
    R[:, W3] += penalty * np.einsum("eq,eqa->ea", w1 * div, pz)
    return R


def batch_system_3d(coords, states, reynolds, penalty):
    """Residuals (E, 24) and exact Jacobians (E, 24, 24), 3D penalty form."""
    R = batch_residual_3d(coords, states, reynolds, penalty)
    wq, gx, gy, gz, u, v, wvel, g = _fields_3d(coords, states)
    E, q = wq.shape
    nu = 1.0 / reynolds

    Nb = np.broadcast_to(_N3, (E, q, 8))
    wN = wq[..., None] * Nb
    wgx = wq[..., None] * gx
    wgy = wq[..., None] * gy
    wgz = wq[..., None] * gz

    du_cu = (2.0 * g["ux"] + g["vy"] + g["wz"])[..., None] * Nb \
        + 2.0 * u[..., None] * gx + v[..., None] * gy + wvel[..., None] * gz
    dv_cu = g["uy"][..., None] * Nb + u[..., None] * gy
    dw_cu = g["uz"][..., None] * Nb + u[..., None] * gz
    du_cv = g["vx"][..., None] * Nb + v[..., None] * gx
    dv_cv = (g["ux"] + 2.0 * g["vy"] + g["wz"])[..., None] * Nb \
        + u[..., None] * gx + 2.0 * v[..., None] * gy + wvel[..., None] * gz
    dw_cv = g["vz"][..., None] * Nb + v[..., None] * gz
    du_cw = g["wx"][..., None] * Nb + wvel[..., None] * gx
    dv_cw = g["wy"][..., None] * Nb + wvel[..., None] * gy
    dw_cw = (g["ux"] + g["vy"] + 2.0 * g["wz"])[..., None] * Nb \
        + u[..., None] * gx + v[..., None] * gy + 2.0 * wvel[..., None] * gz

    J = np.zeros((E, 24, 24))
    J[:, U3[:, None], U3[None, :]] = (
        _bop(wN, du_cu) + 2.0 * nu * _bop(wgx, gx) + nu * _bop(wgy, gy) + nu * _bop(wgz, gz)
    )
    J[:, U3[:, None], V3[None, :]] = _bop(wN, dv_cu) + nu * _bop(wgy, gx)
    J[:, U3[:, None], W3[None, :]] = _bop(wN, dw_cu) + nu * _bop(wgz, gx)
    J[:, V3[:, None], U3[None, :]] = _bop(wN, du_cv) + nu * _bop(wgx, gy)
    J[:, V3[:, None], V3[None, :]] = (
        _bop(wN, dv_cv) + nu * _bop(wgx, gx) + 2.0 * nu * _bop(wgy, gy) + nu * _bop(wgz, gz)
    )
    J[:, V3[:, None], W3[None, :]] = _bop(wN, dw_cv) + nu * _bop(wgz, gy)
    J[:, W3[:, None], U3[None, :]] = _bop(wN, du_cw) + nu * _bop(wgx, gz)
    J[:, W3[:, None], V3[None, :]] = _bop(wN, dv_cw) + nu * _bop(wgy, gz)
    J[:, W3[:, None], W3[None, :]] = (
        _bop(wN, dw_cw) + nu * _bop(wgx, gx) + nu * _bop(wgy, gy) + 2.0 * nu * _bop(wgz, gz)
    )

    # penalty block: rank-1 grad-div coupling at the centroid
    w1, px, py, pz, _ = _penalty_geometry(coords, states)
    pw = penalty * w1[..., None]
    for rows, gr in ((U3, px), (V3, py), (W3, pz)):
        for cols, gc in ((U3, px), (V3, py), (W3, pz)):
            J[:, rows[:, None], cols[None, :]] += _bop(pw * gr, gc)
    return R, J


def element_system_2d(coords, local_state, params: FlowParams) -> ElementSystem:
    """Residual and Jacobian of one 2D mixed element.

    `coords` is (9, 2) node positions, `local_state` the 22 local unknowns.
    The scatter list defaults to local indices; assembly substitutes the
    global ones.
    """
    coords = np.asarray(coords, dtype=float).reshape(1, 9, 2)
    state = np.asarray(local_state, dtype=float).reshape(1, 22)
    R, J = batch_system_2d(coords, state, params.reynolds)
    return ElementSystem(R[0], J[0], np.arange(22))


def element_system_3d(coords, local_state, params: FlowParams) -> ElementSystem:
    """Residual and Jacobian of one 3D penalty element (8 nodes, 24 DOFs)."""
    if params.penalty is None:
        raise ValueError("3D element needs params.penalty")
    coords = np.asarray(coords, dtype=float).reshape(1, 8, 3)
    state = np.asarray(local_state, dtype=float).reshape(1, 24)
    R, J = batch_system_3d(coords, state, params.reynolds, params.penalty)
    return ElementSystem(R[0], J[0], np.arange(24))


def recover_pressure_3d(mesh: Mesh, state: np.ndarray, params: FlowParams) -> np.ndarray:
    """Per-element pressures -penalty * div(u) at element centroids."""
    if mesh.dim != 3:
        raise ValueError("pressure recovery applies to 3D meshes")
    if params.penalty is None:
        raise ValueError("pressure recovery needs params.penalty")
    from ..mesh import build_dof_map, element_dof_table

    dof_map = build_dof_map(mesh, Formulation.PENALTY_3D)
    table = element_dof_table(mesh, dof_map)
    coords = mesh.node_coords[mesh.elements]
    states = state[table]
    _, px, py, pz, div = _penalty_geometry(coords, states)
    return -params.penalty * div[:, 0]
