"""Element-level Galerkin machinery: quadrature, shapes, residuals, Jacobians."""

from .quadrature import QuadratureRule, gauss_rule
from .elements import (
    DegenerateElementError,
    ElementSystem,
    FlowParams,
    batch_residual_2d,
    batch_residual_3d,
    batch_system_2d,
    batch_system_3d,
    element_system_2d,
    element_system_3d,
    recover_pressure_3d,
)

__all__ = [
    "QuadratureRule",
    "gauss_rule",
    "DegenerateElementError",
    "ElementSystem",
    "FlowParams",
    "batch_residual_2d",
    "batch_residual_3d",
    "batch_system_2d",
    "batch_system_3d",
    "element_system_2d",
    "element_system_3d",
    "recover_pressure_3d",
]
