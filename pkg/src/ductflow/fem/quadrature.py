"""Tensor-product Gauss-Legendre rules on the reference element [-1,1]^d."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature points (m, dim) and positive weights (m,)."""

    points: np.ndarray
    weights: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.weights)


def gauss_rule(dim: int, points_per_axis: int) -> QuadratureRule:
    """Gauss-Legendre rule exact for degree 2*points_per_axis - 1 per axis.

    Supports dim in {1, 2, 3} and 1 to 3 points per axis.
    """
    if dim not in (1, 2, 3):
        raise ValueError(f"unsupported dimension {dim}")
    if points_per_axis not in (1, 2, 3):
        raise ValueError(f"unsupported quadrature order {points_per_axis}")
    pts1, wts1 = np.polynomial.legendre.leggauss(points_per_axis)
    if dim == 1:
        return QuadratureRule(pts1.reshape(-1, 1), wts1.copy())
    grids = np.meshgrid(*([pts1] * dim), indexing="ij")
    pts = np.column_stack([g.ravel() for g in grids])
    wgrids = np.meshgrid(*([wts1] * dim), indexing="ij")
    wts = np.ones(pts.shape[0])
    for wg in wgrids:
        wts = wts * wg.ravel()
    return QuadratureRule(pts, wts)
