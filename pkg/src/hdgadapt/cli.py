"""Batch driver: run one adaptation study and write its artifacts.

A run takes a flat key=value config file and/or command-line flags
(flags win) and produces, in the output directory:

- ``study.csv``      one row per cycle, fixed column order
- ``mesh_<k>.txt``   the cycle-k mesh in the plain-text format
- ``solution_<k>.vtk`` / ``adjoint_<k>.vtk``  legacy ASCII VTK with a
  per-cell mean and a vertex-interpolated field

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

import argparse
import csv
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import mesh as meshmod
from .adapt import AdaptConfig, Case, adapt_loop
from .law import AdvectionDiffusionLaw, BoundaryFluxFunctional, \
    exact_functional
from .solver import NewtonConfig, SolverError

__all__ = ["CaseConfig", "run_case", "write_csv", "write_vtk", "main"]

CSV_COLUMNS = ("cycle,n_e,n_dof_lambda,n_dof_total,J_h,eta,J_corrected,"
               "err,err_corrected,newton_iters,linear_iters,seconds").split(",")


class ConfigError(Exception):
    pass


@dataclass
class CaseConfig:
    """Everything needed to run one study."""

    case: str = "conv-diff"
    eps: float = 0.01
    p: int = 2
    mesh: str = "unit-square:8"
    strategy: str = "adjoint"
    theta: float = 0.15
    cycles: int = 10
    tol: float = 0.0
    dof_cap: int = 0
    out: str = "out"
    adjoint_bookkeeping: bool = True
    seed: int = 0

    def validate(self):
        if self.case != "conv-diff":
            raise ConfigError("unknown case %r" % self.case)
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if not 1 <= self.p <= 6:
            raise ConfigError("p must be in 1..6")
        if self.strategy == "adjoint" and not self.adjoint_bookkeeping:
            raise ConfigError(
                "adjoint strategy requires adjoint bookkeeping")


def load_mesh(source):
    """A mesh from `unit-square:N` or a mesh file path."""
    if source.startswith("unit-square:"):
        try:
            n = int(source.split(":", 1)[1])
        except ValueError:
            raise ConfigError("bad mesh source %r" % source)
        if n < 1:
            raise ConfigError("unit-square:N needs N >= 1")
        return meshmod.unit_square_mesh(n)
    if not os.path.exists(source):
        raise ConfigError("mesh file %r does not exist" % source)
    return meshmod.read_mesh(source)


def write_csv(record, path):
    """StudyRecord rows as CSV in the fixed column order."""
    if not record.rows:
        raise ValueError("empty study record")
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(CSV_COLUMNS)
        for r in record.rows:
            out.writerow([
                r.cycle, r.n_e, r.n_dof_lambda, r.n_dof_total,
                "%.17g" % r.j_h, "%.17g" % r.eta, "%.17g" % r.j_corrected,
                "%.17g" % r.err, "%.17g" % r.err_corrected,
                r.newton_iters, r.linear_iters, "%.6f" % r.seconds])


def _cell_and_vertex_values(coeffs_w, space):
    """Per-cell means and vertex-interpolated values of component 0."""
    dm = space.dofmap
    ne = dm.n_elements
    ws = coeffs_w.reshape(ne, dm.m, dm.n_p) * space.scale[:, None, None]
    wq = space.quad.weights[None, :] * space.det[:, None]
    vals = np.einsum("ecn,gn->egc", ws, space.phi)[:, :, 0]
    cell = np.einsum("eg,eg->e", wq, vals) / space.area
    # vertex values: average the limits from all elements sharing a vertex
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    # keep evaluation off the collapsed coordinate singularity at y=1
    shrink = 1e-10
    pts = corners * (1.0 - 3.0 * shrink) + shrink
    phi_v = space.basis.eval_element(pts)                    # (3, n_p)
    at_corners = np.einsum("ecn,vn->evc", ws, phi_v)[:, :, 0]
    nv = len(space.mesh.vertices)
    vertex = np.zeros(nv)
    count = np.zeros(nv)
    np.add.at(vertex, space.mesh.elements.ravel(), at_corners.ravel())
    np.add.at(count, space.mesh.elements.ravel(), 1.0)
    vertex /= np.maximum(count, 1.0)
    return cell, vertex


def write_vtk(coeffs_w, space, path, name="w"):
    """Legacy ASCII VTK: triangles, cell means, vertex-interpolated field."""
    mesh = space.mesh
    cell, vertex = _cell_and_vertex_values(coeffs_w, space)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n%s\nASCII\n" % name)
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write("POINTS %d double\n" % len(mesh.vertices))
        for x, y in mesh.vertices:
            fh.write("%.17g %.17g 0\n" % (x, y))
        fh.write("CELLS %d %d\n" % (mesh.n_elements, 4 * mesh.n_elements))
        for a, b, c in mesh.elements:
            fh.write("3 %d %d %d\n" % (a, b, c))
        fh.write("CELL_TYPES %d\n" % mesh.n_elements)
        fh.write("5\n" * mesh.n_elements)
        fh.write("CELL_DATA %d\nSCALARS %s_mean double 1\n"
                 "LOOKUP_TABLE default\n" % (mesh.n_elements, name))
        for v in cell:
            fh.write("%.17g\n" % v)
        fh.write("POINT_DATA %d\nSCALARS %s double 1\n"
                 "LOOKUP_TABLE default\n" % (len(mesh.vertices), name))
        for v in vertex:
            fh.write("%.17g\n" % v)


def run_case(config):
    """Execute a study and write its artifacts; returns the exit code."""
    try:
        config.validate()
        base_mesh = load_mesh(config.mesh)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2

    law = AdvectionDiffusionLaw(config.eps)
    functional = BoundaryFluxFunctional()
    case = Case(base_mesh, law, functional, config.p,
                NewtonConfig(cfl0=math.inf),
                exact_functional(config.eps))
    adapt_cfg = AdaptConfig(strategy=config.strategy, theta=config.theta,
                            max_cycles=config.cycles, tol=config.tol,
                            dof_cap=config.dof_cap,
                            compute_adjoint=config.adjoint_bookkeeping)
    try:
        adapt_cfg.validate()
    except ValueError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2

    os.makedirs(config.out, exist_ok=True)

    def on_cycle(cycle, mesh, space, state, adj_state, adj_space, estimate):
        meshmod.write_mesh(mesh, os.path.join(config.out,
                                              "mesh_%d.txt" % cycle))
        write_vtk(state.W, space,
                  os.path.join(config.out, "solution_%d.vtk" % cycle), "w")
        if adj_state is not None:
            write_vtk(adj_state.W, adj_space,
                      os.path.join(config.out, "adjoint_%d.vtk" % cycle),
                      "w_adj")

    try:
        record = adapt_loop(case, adapt_cfg, on_cycle=on_cycle)
    except (SolverError, RuntimeError) as exc:
        print("solver failure: %s" % exc, file=sys.stderr)
        return 3
    write_csv(record, os.path.join(config.out, "study.csv"))
    if not record.converged:
        print("solver failure: %s" % record.stop_reason, file=sys.stderr)
        return 3
    return 0


def _read_config_file(path):
    """Flat key=value lines; '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("%s:%d: expected key=value" % (path, lineno))
            key, val = line.split("=", 1)
            values[key.strip().replace("-", "_")] = val.strip()
    return values


_FIELD_TYPES = {
    "case": str, "eps": float, "p": int, "mesh": str, "strategy": str,
    "theta": float, "cycles": int, "tol": float, "dof_cap": int,
    "out": str, "seed": int, "adjoint_bookkeeping": lambda s:
        s.lower() in ("1", "true", "yes", "on"),
}


def build_config(argv=None):
    parser = argparse.ArgumentParser(
        prog="hdgadapt",
        description="Adaptive HDG convection-diffusion studies")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--case", help="case name (conv-diff)")
    parser.add_argument("--eps", type=float, help="diffusion coefficient")
    parser.add_argument("--p", type=int, help="polynomial degree")
    parser.add_argument("--strategy",
                        choices=("uniform", "residual", "adjoint"))
    parser.add_argument("--theta", type=float,
                        help="marked fraction of elements")
    parser.add_argument("--cycles", type=int, help="maximum cycles")
    parser.add_argument("--tol", type=float,
                        help="stop when |eta| drops below")
    parser.add_argument("--dof-cap", type=int, dest="dof_cap",
                        help="stop when total dofs exceed")
    parser.add_argument("--mesh", help="mesh file or unit-square:N")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="random seed")
    parser.add_argument("--no-adjoint-bookkeeping", action="store_true",
                        help="skip adjoint solves under uniform/residual")
    args = parser.parse_args(argv)

    config = CaseConfig()
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError("config file %r does not exist" % args.config)
        for key, raw in _read_config_file(args.config).items():
            if key not in _FIELD_TYPES:
                raise ConfigError("unknown config key %r" % key)
            try:
                setattr(config, key, _FIELD_TYPES[key](raw))
            except ValueError:
                raise ConfigError("bad value %r for key %r" % (raw, key))
    for key in ("case", "eps", "p", "strategy", "theta", "cycles", "tol",
                "dof_cap", "mesh", "out", "seed"):
        val = getattr(args, key)
        if val is not None:
            setattr(config, key, val)
    if args.no_adjoint_bookkeeping:
        config.adjoint_bookkeeping = False
    return config


def main(argv=None):
    try:
        config = build_config(argv)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    return run_case(config)


if __name__ == "__main__":
    sys.exit(main())
