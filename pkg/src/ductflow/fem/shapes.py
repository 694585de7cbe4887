"""Lagrange shape functions on reference quads and hexes.

Local node numbering is lexicographic over the reference grid
(x index fastest), matching the mesh element connectivity.
"""

from __future__ import annotations

import numpy as np


def _lag2(t):
    """1D quadratic Lagrange basis at nodes -1, 0, +1: values (m, 3)."""
    t = np.asarray(t, dtype=float)
    return np.stack([0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0)], axis=-1)


def _dlag2(t):
    t = np.asarray(t, dtype=float)
    return np.stack([t - 0.5, -2.0 * t, t + 0.5], axis=-1)


def _lag1(t):
    """1D linear Lagrange basis at nodes -1, +1: values (m, 2)."""
    t = np.asarray(t, dtype=float)
    return np.stack([0.5 * (1.0 - t), 0.5 * (1.0 + t)], axis=-1)


def _dlag1(t):
    t = np.asarray(t, dtype=float)
    half = np.full_like(t, 0.5)
    return np.stack([-half, half], axis=-1)


def q2_shapes(points: np.ndarray):
    """Biquadratic quad basis: values (m, 9) and reference grads (m, 9, 2)."""
    xi, eta = points[:, 0], points[:, 1]
    lx, ly = _lag2(xi), _lag2(eta)
    dlx, dly = _dlag2(xi), _dlag2(eta)
    m = len(xi)
    vals = np.empty((m, 9))
    grads = np.empty((m, 9, 2))
    for jy in range(3):
        for jx in range(3):
            a = jy * 3 + jx
            vals[:, a] = lx[:, jx] * ly[:, jy]
            grads[:, a, 0] = dlx[:, jx] * ly[:, jy]
            grads[:, a, 1] = lx[:, jx] * dly[:, jy]
    return vals, grads


def q1_shapes_2d(points: np.ndarray):
    """Bilinear quad basis values (m, 4); corner nodes, x fastest."""
    xi, eta = points[:, 0], points[:, 1]
    lx, ly = _lag1(xi), _lag1(eta)
    m = len(xi)
    vals = np.empty((m, 4))
    for jy in range(2):
        for jx in range(2):
            vals[:, jy * 2 + jx] = lx[:, jx] * ly[:, jy]
    return vals


def q1_shapes_3d(points: np.ndarray):
    """Trilinear hex basis: values (m, 8) and reference grads (m, 8, 3)."""
    xi, eta, zeta = points[:, 0], points[:, 1], points[:, 2]
    lx, ly, lz = _lag1(xi), _lag1(eta), _lag1(zeta)
    dlx, dly, dlz = _dlag1(xi), _dlag1(eta), _dlag1(zeta)
    m = len(xi)
    vals = np.empty((m, 8))
    grads = np.empty((m, 8, 3))
    for jz in range(2):
        for jy in range(2):
            for jx in range(2):
                a = (jz * 2 + jy) * 2 + jx
                vals[:, a] = lx[:, jx] * ly[:, jy] * lz[:, jz]
                grads[:, a, 0] = dlx[:, jx] * ly[:, jy] * lz[:, jz]
                grads[:, a, 1] = lx[:, jx] * dly[:, jy] * lz[:, jz]
                grads[:, a, 2] = lx[:, jx] * ly[:, jy] * dlz[:, jz]
    return vals, grads
