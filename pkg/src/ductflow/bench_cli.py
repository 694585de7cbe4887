"""Benchmark harness: case runner, ordering / Newton-variant sweeps, physics
validation and machine-readable reports.

Reports embed their full configuration so every number is reproducible.
Wall-clock fields are measured per phase with a monotonic clock and are
excluded from determinism comparisons; everything else is a deterministic
function of the configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import simpson

from .assembly import apply_dirichlet, assemble_global, write_matrix_market
from .fem import FlowParams, recover_pressure_3d
from .direct_solver import factorize, prepare, solve as ds_solve
from .mesh import (
    ChannelGeometry,
    Formulation,
    Mesh,
    build_channel_mesh_2d,
    build_channel_mesh_3d,
    build_dof_map,
    dof_coordinates,
)
from .newton import (
    ConvergenceHistory,
    NewtonConfig,
    NewtonDivergenceError,
    NewtonVariant,
    initial_state,
    solve_nonlinear,
)
from .ordering import OrderingMethod, compute_ordering, symbolic_fill, symmetrize_pattern

# warm-start ladder used when the target Reynolds number diverges directly
CONTINUATION_RE = (10.0, 50.0)


@dataclass
class CaseConfig:
    """One benchmark case; every report embeds a copy of this."""

    formulation: str = "2d"
    nx: int = 40
    ny: int = 20
    nz: int | None = None
    length: float = 10.0
    height: float = 1.0
    depth: float | None = None
    reynolds: float = 100.0
    penalty: float = 1e7
    ordering: str = "nd"
    newton: str = "full"
    alpha: float = 1.0
    tol: float = 1e-6
    max_iters: int = 100
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.formulation not in ("2d", "3d"):
            raise ValueError("formulation must be '2d' or '3d'")
        if self.formulation == "3d":
            if self.nz is None:
                raise ValueError("3D case needs nz")
            if self.depth is None:
                self.depth = 1.0
            if self.length == 10.0 and self.height == 1.0 and self.depth == 1.0:
                self.length = 5.0  # default duct is shorter than the channel
        OrderingMethod(self.ordering)
        NewtonVariant(self.newton)

    def geometry(self) -> ChannelGeometry:
        if self.formulation == "2d":
            return ChannelGeometry(length=self.length, height=self.height)
        return ChannelGeometry(length=self.length, height=self.height, depth=self.depth)

    def build_mesh(self) -> Mesh:
        if self.formulation == "2d":
            return build_channel_mesh_2d(self.nx, self.ny, self.geometry())
        return build_channel_mesh_3d(self.nx, self.ny, self.nz, self.geometry())

    def flow_params(self) -> FlowParams:
        if self.formulation == "2d":
            return FlowParams(reynolds=self.reynolds, formulation=Formulation.MIXED_2D)
        return FlowParams(
            reynolds=self.reynolds,
            formulation=Formulation.PENALTY_3D,
            penalty=self.penalty,
        )

    def newton_config(self) -> NewtonConfig:
        return NewtonConfig(
            variant=NewtonVariant(self.newton),
            alpha=self.alpha,
            tol=self.tol,
            max_iters=self.max_iters,
            workers=self.workers,
            ordering=OrderingMethod(self.ordering),
        )


@dataclass
class CaseReport:
    """Self-describing outcome of one case."""

    config: dict
    converged: bool
    iterations: int
    factorize_count: int
    analyze_count: int
    correction_norms: list
    residual_norms: list
    phase_seconds: dict
    total_seconds: float
    memory: dict
    validation: dict
    continuation_stages: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


class BenchError(RuntimeError):
    """Case failed; carries the partial report when one exists."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def square_duct_peak_ratio(terms: int = 51) -> float:
    """Developed laminar square-duct peak-to-mean velocity ratio.

    Series solution of -lap(u) = const on the unit square with no-slip
    walls, evaluated at the center and integrated term by term.
    """
    center = 0.0
    mean = 0.0
    for n in range(1, terms + 1, 2):
        lam = n * math.pi
        amp = 4.0 / lam**3
        center += amp * math.sin(lam / 2.0) * (1.0 - 1.0 / math.cosh(lam / 2.0))
        mean += amp * (2.0 / lam) * (1.0 - (2.0 / lam) * math.tanh(lam / 2.0))
    return center / mean


def _station_flux(mesh, dof_map, state, x_station):
    x, y = mesh.node_coords.T
    col = np.isclose(x, x_station)
    ys = y[col]
    us = state[dof_map.u_dof[col]]
    order = np.argsort(ys)
    return float(simpson(us[order], x=ys[order])), ys[order], us[order]


def validate_poiseuille(state, mesh, dof_map) -> dict:
    """Developed-profile and mass-conservation checks for a 2D solution.

    Samples u on the node column nearest x = 0.9 L and compares with the
    unit-mean parabola 6 y/H (1 - y/H).  The conservation defect compares
    the station flux against the discrete inlet flux; the inlet datum
    itself carries |flux - 1| = h/3 because no-slip wins at the inlet
    corners, which is reported separately as the absolute defect.
    """
    geom = mesh.geometry
    if geom.length < 10.0 * geom.height:
        raise ValueError("profile validation expects length >= 10 x height")
    xs = mesh.node_coords[:, 0]
    station = xs[np.argmin(np.abs(xs - 0.9 * geom.length))]
    flux, ys, us = _station_flux(mesh, dof_map, state, station)
    inlet_flux, _, _ = _station_flux(mesh, dof_map, state, 0.0)
    ybar = ys / geom.height
    exact = 6.0 * ybar * (1.0 - ybar)
    err_abs = float(np.abs(us - exact).max())
    return {
        "station_x": float(station),
        "profile_error_abs": err_abs,
        "profile_error_rel": err_abs / 1.5,
        "mass_flux": flux,
        "mass_flux_defect": abs(flux - inlet_flux),
        "mass_flux_defect_absolute": abs(flux - 1.0),
    }


def validate_duct(state, mesh, dof_map, params) -> dict:
    """Developed-flow and pressure-drop checks for a 3D solution.

    The mid-duct peak-to-mean velocity ratio near the exit is compared
    with the analytic developed square-duct value; recovered pressures
    must fall monotonically along the core.
    """
    nx, ny, nz = mesh.counts
    geom = mesh.geometry
    u = state[dof_map.u_dof].reshape(nz + 1, ny + 1, nx + 1)
    wy = np.ones(ny + 1)
    wy[0] = wy[-1] = 0.5
    wz = np.ones(nz + 1)
    wz[0] = wz[-1] = 0.5
    weights = np.outer(wz, wy) / (ny * nz)
    ix = int(round(0.9 * nx))
    section = u[:, :, ix]
    mean = float((section * weights).sum())
    peak = float(section.max())
    ratio = peak / mean
    developed = square_duct_peak_ratio()
    pressures = recover_pressure_3d(mesh, state, params).reshape(nz, ny, nx)
    core = pressures[nz // 2, ny // 2, :]
    return {
        "station_x": float(ix * geom.length / nx),
        "peak_velocity": peak,
        "peak_mean_ratio": ratio,
        "developed_ratio": developed,
        "ratio_error_rel": abs(ratio - developed) / developed,
        "pressure_core": [float(p) for p in core],
        "pressure_monotone": bool(np.all(np.diff(core) < 0.0)),
    }


def run_case(config: CaseConfig, dump_system: str | None = None) -> CaseReport:
    """Execute one case end to end, with Reynolds continuation on divergence."""
    mesh = config.build_mesh()
    params = config.flow_params()
    newton_cfg = config.newton_config()
    dof_map = build_dof_map(mesh, params.formulation)

    if dump_system is not None:
        state0 = initial_state(mesh, dof_map, params.formulation)
        system = apply_dirichlet(
            assemble_global(mesh, dof_map, state0, params, p=config.workers),
            mesh, dof_map, params.formulation,
        )
        write_matrix_market(system, dump_system)

    stages = []
    t0 = time.perf_counter()
    try:
        state, history = solve_nonlinear(mesh, params, newton_cfg)
    except NewtonDivergenceError:
        # warm-start ladder from gentler Reynolds numbers
        ladder = [r for r in CONTINUATION_RE if r < config.reynolds]
        ladder.append(config.reynolds)
        state = None
        history = None
        try:
            for re_stage in ladder:
                stages.append(re_stage)
                stage_params = FlowParams(
                    reynolds=re_stage,
                    formulation=params.formulation,
                    penalty=params.penalty,
                )
                state, history = solve_nonlinear(
                    mesh, stage_params, newton_cfg, initial=state
                )
        except NewtonDivergenceError as exc:
            partial = _build_report(
                config, exc.history, None, time.perf_counter() - t0, stages, {}
            )
            raise BenchError(f"case diverged: {exc}", report=partial) from exc
    total = time.perf_counter() - t0

    validation = {}
    if history.converged:
        if config.formulation == "2d":
            validation = validate_poiseuille(state, mesh, dof_map)
        else:
            validation = validate_duct(state, mesh, dof_map, params)
    return _build_report(config, history, state, total, stages, validation)


def _build_report(config, history, state, total, stages, validation) -> CaseReport:
    memory = {}
    if history is not None and history.memory is not None:
        memory = asdict(history.memory)
    records = history.records if history is not None else []
    return CaseReport(
        config=asdict(config),
        converged=bool(history.converged) if history else False,
        iterations=len(records),
        factorize_count=history.factorize_count if history else 0,
        analyze_count=history.analyze_count if history else 0,
        correction_norms=[r.dx_norm for r in records],
        residual_norms=[r.res_norm for r in records],
        phase_seconds=history.phase_totals() if history else {},
        total_seconds=total,
        memory=memory,
        validation=validation,
        continuation_stages=stages,
    )


def _assembled_system(base: CaseConfig):
    mesh = base.build_mesh()
    params = base.flow_params()
    dof_map = build_dof_map(mesh, params.formulation)
    state = initial_state(mesh, dof_map, params.formulation)
    coords = dof_coordinates(mesh, dof_map)
    t0 = time.perf_counter()
    system = apply_dirichlet(
        assemble_global(mesh, dof_map, state, params, p=base.workers),
        mesh, dof_map, params.formulation,
    )
    return system, coords, time.perf_counter() - t0


def ordering_fill_table(base: CaseConfig, methods=None) -> list:
    """Fill prediction per ordering on the case's assembled system.

    Pure symbolic work: one row per method with the exact factor size and
    peak front of the system's own pattern.
    """
    if methods is None:
        methods = [m.value for m in OrderingMethod]
    system, coords, _ = _assembled_system(base)
    pattern = symmetrize_pattern(system.matrix, coords)
    rows = []
    for method in methods:
        method = OrderingMethod(method)
        stats = symbolic_fill(pattern, compute_ordering(pattern, method))
        rows.append({
            "method": method.value,
            "nnz_factors": stats.nnz_factors,
            "peak_front": stats.peak_front,
            "estimated_bytes": 8 * stats.nnz_factors + 16 * pattern.n,
        })
    return rows


def compare_orderings(base: CaseConfig, methods=None, repeats: int = 3) -> list:
    """One row per ordering: first-iteration cost plus fill prediction.

    The per-iteration time covers assembly, factorization and solve of
    the first Newton system through the solver pipeline (analysis is
    one-off and excluded); the median over `repeats` runs is reported.
    Fill statistics are the symbolic prediction on the system's pattern.
    """
    if methods is None:
        methods = [m.value for m in OrderingMethod]
    if len(methods) < 2:
        raise ValueError("need at least two methods to compare")
    fill_rows = {r["method"]: r for r in ordering_fill_table(base, methods)}
    system, coords, t_assemble = _assembled_system(base)

    rows = []
    for method in methods:
        method = OrderingMethod(method)
        rowperm, symbolic = prepare(system.matrix, method, coords)
        matrix = system.matrix
        rhs = system.rhs
        if rowperm is not None:
            matrix = matrix.permute_rows(rowperm)
            rhs = rhs[rowperm]
        times = []
        for _ in range(repeats):
            t1 = time.perf_counter()
            factorize_out = factorize(symbolic, matrix)
            ds_solve(factorize_out, rhs)
            times.append(t_assemble + (time.perf_counter() - t1))
        row = dict(fill_rows[method.value])
        row["cpu_time_per_iter"] = float(np.median(times))
        rows.append(row)
    return rows


def compare_newton_variants(base: CaseConfig, worker_counts=(1,), repeats: int = 1) -> list:
    """Full vs modified Newton at each worker count; one row per count."""
    if any(p < 1 for p in worker_counts):
        raise ValueError("worker counts must be >= 1")
    rows = []
    for p in worker_counts:
        results = {}
        for variant in ("full", "modified"):
            cfg = CaseConfig(**{**asdict(base), "newton": variant, "workers": int(p)})
            times = []
            report = None
            for _ in range(repeats):
                report = run_case(cfg)
                times.append(report.total_seconds)
            results[variant] = (float(np.median(times)), report)
        full_t, full_r = results["full"]
        mod_t, mod_r = results["modified"]
        flags = []
        if mod_r.iterations < full_r.iterations:
            flags.append("modified_converged_in_fewer_iterations")
        rows.append({
            "p": int(p),
            "full_time": full_t,
            "modified_time": mod_t,
            "full_iters": full_r.iterations,
            "modified_iters": mod_r.iterations,
            "full_converged": full_r.converged,
            "modified_converged": mod_r.converged,
            "nnz_factors": full_r.memory.get("nnz_factors"),
            "estimated_bytes": full_r.memory.get("estimated_bytes"),
            "flags": ";".join(flags),
        })
    return rows


TIMING_KEYS = ("time", "seconds", "cpu_time")


def strip_timings(obj):
    """Deterministic projection of a report: drop wall-clock fields."""
    if isinstance(obj, dict):
        return {
            k: strip_timings(v)
            for k, v in obj.items()
            if not any(t in k for t in TIMING_KEYS)
        }
    if isinstance(obj, list):
        return [strip_timings(v) for v in obj]
    return obj


def emit_report(report, fmt: str, path) -> None:
    """Write a CaseReport or a list of sweep rows as json or csv."""
    if fmt not in ("csv", "json"):
        raise ValueError("format must be 'csv' or 'json'")
    data = report.to_dict() if isinstance(report, CaseReport) else report
    if fmt == "json":
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return
    rows = [_flatten(r) for r in data] if isinstance(data, list) else [_flatten(data)]
    fieldnames = sorted({k for r in rows for k in r})
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, prefix=f"{key}."))
        elif isinstance(v, list):
            out[key] = ";".join(str(x) for x in v)
        else:
            out[key] = v
    return out


def load_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# command line


def _add_case_flags(p: argparse.ArgumentParser):
    p.add_argument("--formulation", choices=["2d", "3d"], default="2d")
    p.add_argument("--mesh", type=int, nargs="+", metavar="N",
                   help="NX NY [NZ] element counts")
    p.add_argument("--re", type=float, default=None, help="Reynolds number")
    p.add_argument("--penalty", type=float, default=1e7)
    p.add_argument("--ordering", choices=[m.value for m in OrderingMethod],
                   default="nd")
    p.add_argument("--newton", choices=["full", "modified"], default="full")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--length", type=float, default=None)
    p.add_argument("--height", type=float, default=1.0)
    p.add_argument("--depth", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="report file path")
    p.add_argument("--format", choices=["csv", "json"], default="json")
    p.add_argument("--dump-system", default=None, metavar="FILE.mtx",
                   help="write the first assembled system in Matrix Market form")


def _config_from_args(args) -> CaseConfig:
    form = args.formulation
    mesh = args.mesh
    if mesh is None:
        mesh = [40, 20] if form == "2d" else [20, 8, 8]
    if form == "2d" and len(mesh) != 2:
        raise ValueError("--mesh takes NX NY for 2d")
    if form == "3d" and len(mesh) != 3:
        raise ValueError("--mesh takes NX NY NZ for 3d")
    re = args.re if args.re is not None else (100.0 if form == "2d" else 50.0)
    length = args.length if args.length is not None else (10.0 if form == "2d" else 5.0)
    return CaseConfig(
        formulation=form,
        nx=mesh[0],
        ny=mesh[1],
        nz=mesh[2] if form == "3d" else None,
        length=length,
        height=args.height,
        depth=(args.depth if args.depth is not None else (1.0 if form == "3d" else None)),
        reynolds=re,
        penalty=args.penalty,
        ordering=args.ordering,
        newton=args.newton,
        alpha=args.alpha,
        tol=args.tol,
        max_iters=args.max_iters,
        workers=args.workers,
        seed=args.seed,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ductflow-bench",
        description="Channel-flow solver benchmarks: cases, ordering and "
                    "Newton-variant comparisons.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one case and report it")
    _add_case_flags(p_run)

    p_ord = sub.add_parser("compare-orderings",
                           help="per-ordering cost and factor-size table")
    _add_case_flags(p_ord)
    p_ord.add_argument("--methods", default="natural,rcm,amd,nd")
    p_ord.add_argument("--repeats", type=int, default=3)

    p_var = sub.add_parser("compare-variants",
                           help="full vs modified Newton across worker counts")
    _add_case_flags(p_var)
    p_var.add_argument("--sweep-workers", default="1",
                       help="comma-separated worker counts")
    p_var.add_argument("--repeats", type=int, default=3)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _config_from_args(args)
        if args.command == "run":
            report = run_case(config, dump_system=args.dump_system)
            payload = report
            converged = report.converged
        elif args.command == "compare-orderings":
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
            payload = compare_orderings(config, methods, repeats=args.repeats)
            converged = True
        else:
            counts = [int(x) for x in args.sweep_workers.split(",") if x.strip()]
            payload = compare_newton_variants(config, counts, repeats=args.repeats)
            converged = all(r["full_converged"] and r["modified_converged"]
                            for r in payload)
    except BenchError as exc:
        if args.out and exc.report is not None:
            emit_report(exc.report, args.format, args.out)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if args.out:
        emit_report(payload, args.format, args.out)
    else:
        data = payload.to_dict() if isinstance(payload, CaseReport) else payload
        json.dump(data, sys.stdout, indent=2, sort_keys=True)
        print()
    return 0 if converged else 2


if __name__ == "__main__":
    sys.exit(main())
