"""Full and modified (frozen-Jacobian) Newton drivers.

Each iteration solves J dx = -R and updates X <- X + alpha dx, stopping
when the infinity norm of the correction drops below the tolerance.  The
full variant rebuilds and refactorizes the Jacobian every iteration but
analyzes the pattern only once (assembly keeps it stationary).  The
modified variant assembles the Jacobian and factorizes once, then
reassembles only the right-hand side and reuses the factors, trading a
slower convergence rate for much cheaper iterations.

A step whose correction norm exceeds ten times its predecessor's applied
step is damped by halving alpha for that iteration, at most four times.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .assembly import (
    apply_dirichlet,
    assemble_global,
    assemble_partition_rhs,
    assemble_rhs_global,
    constrained_dofs,
    merge_rhs,
    Partition,
)
from .direct_solver import factorize, memory_report, prepare, solve
from .fem import FlowParams
from .mesh import (
    DofMap,
    Formulation,
    Mesh,
    NodeTag,
    build_dof_map,
    dof_coordinates,
)
from .ordering import OrderingMethod


class NewtonVariant(str, Enum):
    FULL = "full"
    MODIFIED = "modified"


class NewtonDivergenceError(RuntimeError):
    """Nonlinear iteration blew up; carries the partial history."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class NewtonConfig:
    variant: NewtonVariant = NewtonVariant.FULL
    alpha: float = 1.0
    tol: float = 1e-6
    max_iters: int = 100
    workers: int = 1
    ordering: OrderingMethod = OrderingMethod.NESTED_DISSECTION
    refine: int = 2
    refactor_every: int = 0  # modified-variant escape hatch, 0 disables

    def __post_init__(self):
        self.variant = NewtonVariant(self.variant)
        self.ordering = OrderingMethod(self.ordering)
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class IterationRecord:
    k: int
    dx_norm: float
    res_norm: float
    t_assemble: float
    t_analyze: float
    t_factorize: float
    t_solve: float
    analyzed: bool
    factorized: bool
    alpha_used: float


@dataclass
class ConvergenceHistory:
    variant: NewtonVariant
    records: list = field(default_factory=list)
    converged: bool = False
    memory: object = None  # MemoryStats of the factorization, set by the driver

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def analyze_count(self) -> int:
        return sum(1 for r in self.records if r.analyzed)

    @property
    def factorize_count(self) -> int:
        return sum(1 for r in self.records if r.factorized)

    def dx_norms(self) -> np.ndarray:
        return np.array([r.dx_norm for r in self.records])

    def phase_totals(self) -> dict:
        return {
            "assemble": sum(r.t_assemble for r in self.records),
            "analyze": sum(r.t_analyze for r in self.records),
            "factorize": sum(r.t_factorize for r in self.records),
            "solve": sum(r.t_solve for r in self.records),
        }


def initial_state(mesh: Mesh, dof_map: DofMap, formulation: Formulation) -> np.ndarray:
    """Plug flow satisfying every Dirichlet value exactly.

    u = 1 everywhere except walls (u = 0); v = w = 0; p = 0.
    """
    if formulation != dof_map.formulation:
        raise ValueError("formulation does not match the DOF map")
    state = np.zeros(dof_map.n_dofs)
    state[dof_map.u_dof] = 1.0
    wall = mesh.boundary_tags == NodeTag.WALL
    state[dof_map.u_dof[wall]] = 0.0
    return state


def newton_step(state: np.ndarray, delta: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """X + alpha * dx; rejects non-finite corrections."""
    if not np.all(np.isfinite(delta)):
        bad = int(np.flatnonzero(~np.isfinite(delta))[0])
        raise NewtonDivergenceError(f"non-finite correction at dof {bad}", None)
    return state + alpha * delta


def residual_only_assembly(
    mesh: Mesh,
    dof_map: DofMap,
    partition: Partition,
    state: np.ndarray,
    params: FlowParams,
    dirichlet_mask: np.ndarray | None = None,
) -> np.ndarray:
    """-R assembled over all workers of `partition`, Dirichlet rows zeroed.

    Bitwise identical to the rhs of a full assembly at the same state and
    worker count: contributions accumulate in the same order.
    """
    parts = [
        assemble_partition_rhs(mesh, dof_map, partition, w, state, params)
        for w in range(partition.p)
    ]
    return merge_rhs(parts, dof_map.n_dofs, dirichlet_mask)


def solve_nonlinear(
    mesh: Mesh,
    params: FlowParams,
    config: NewtonConfig,
    initial: np.ndarray | None = None,
):
    """Drive the nonlinear solve; returns (state, ConvergenceHistory).

    Divergence (correction norm above 1e6 or non-finite) raises
    NewtonDivergenceError with the partial history attached; running out
    of iterations returns a non-converged history instead.
    """
    formulation = params.formulation
    dof_map = build_dof_map(mesh, formulation)
    state = initial_state(mesh, dof_map, formulation) if initial is None else initial.copy()
    history = ConvergenceHistory(variant=config.variant)
    mask = np.zeros(dof_map.n_dofs, dtype=bool)
    mask[constrained_dofs(mesh, dof_map)] = True
    coords = dof_coordinates(mesh, dof_map)

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    symbolic = None
    rowperm = None
    factor = None
    prev_step_norm = None
    try:
        for k in range(1, config.max_iters + 1):
            refactor = (
                config.variant == NewtonVariant.FULL
                or factor is None
                or (config.refactor_every > 0 and (k - 1) % config.refactor_every == 0)
            )
            t_analyze = 0.0
            t_factorize = 0.0
            analyzed = False
            factorized = False

            t0 = time.perf_counter()
            if refactor:
                system = assemble_global(
                    mesh, dof_map, state, params, p=config.workers, pool=pool
                )
                system = apply_dirichlet(system, mesh, dof_map, formulation)
                rhs = system.rhs
                t_assemble = time.perf_counter() - t0

                if symbolic is None:
                    t1 = time.perf_counter()
                    rowperm, symbolic = prepare(
                        system.matrix, config.ordering, coords
                    )
                    t_analyze = time.perf_counter() - t1
                    analyzed = True
                matrix = system.matrix
                if rowperm is not None:
                    matrix = matrix.permute_rows(rowperm)
                t1 = time.perf_counter()
                factor = factorize(symbolic, matrix)
                t_factorize = time.perf_counter() - t1
                factorized = True
                if history.memory is None:
                    history.memory = memory_report(symbolic, factor)
            else:
                rhs = assemble_rhs_global(
                    mesh, dof_map, state, params,
                    p=config.workers, pool=pool, dirichlet_mask=mask,
                )
                t_assemble = time.perf_counter() - t0

            t1 = time.perf_counter()
            delta, _ = solve(factor, rhs if rowperm is None else rhs[rowperm],
                             refine=config.refine)
            t_solve = time.perf_counter() - t1
            delta[mask] = 0.0  # Dirichlet corrections are exactly zero

            dx_norm = float(np.abs(delta).max())
            res_norm = float(np.abs(rhs).max())
            if not np.isfinite(dx_norm) or dx_norm > 1e6:
                history.records.append(IterationRecord(
                    k, dx_norm, res_norm, t_assemble, t_analyze, t_factorize,
                    t_solve, analyzed, factorized, config.alpha,
                ))
                raise NewtonDivergenceError(
                    f"correction norm {dx_norm:.3e} at iteration {k}", history
                )

            alpha_eff = config.alpha
            if prev_step_norm is not None:
                halvings = 0
                while alpha_eff * dx_norm > 10.0 * prev_step_norm and halvings < 4:
                    alpha_eff *= 0.5
                    halvings += 1
            state = newton_step(state, delta, alpha_eff)
            prev_step_norm = alpha_eff * dx_norm

            history.records.append(IterationRecord(
                k, dx_norm, res_norm, t_assemble, t_analyze, t_factorize,
                t_solve, analyzed, factorized, alpha_eff,
            ))
            if dx_norm <= config.tol:
                history.converged = True
                break
    except NewtonDivergenceError as exc:
        if exc.history is None:
            exc.history = history
        raise
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    return state, history
