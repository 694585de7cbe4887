"""Steady incompressible channel-flow FEM solver on a multifrontal sparse LU.

The package is organized around the stages of a nonlinear finite element
solve:

* :mod:`ductflow.mesh` - structured 2D/3D channel meshes, boundary tags,
  degree-of-freedom maps.
* :mod:`ductflow.fem` - quadrature, element residuals and analytic
  Jacobians for the 2D mixed and 3D penalty formulations.
* :mod:`ductflow.assembly` - partitioned triplet assembly, duplicate
  summation into CSR, Dirichlet handling.
* :mod:`ductflow.ordering` - fill-reducing orderings and symbolic fill
  prediction.
* :mod:`ductflow.direct_solver` - multifrontal LU with separate analyze /
  factorize / solve phases and factor reuse.
* :mod:`ductflow.newton` - full and modified (frozen-Jacobian) Newton
  drivers.
* :mod:`ductflow.bench_cli` - benchmark harness and command line entry
  point.
"""

__version__ = "0.1.0"

from .mesh import (
    ChannelGeometry,
    DofMap,
    Formulation,
    Mesh,
    NodeTag,
    build_channel_mesh_2d,
    build_channel_mesh_3d,
    build_dof_map,
)
from .fem import FlowParams, gauss_rule, element_system_2d, element_system_3d

__all__ = [
    "ChannelGeometry",
    "DofMap",
    "Formulation",
    "Mesh",
    "NodeTag",
    "build_channel_mesh_2d",
    "build_channel_mesh_3d",
    "build_dof_map",
    "FlowParams",
    "gauss_rule",
    "element_system_2d",
    "element_system_3d",
]
