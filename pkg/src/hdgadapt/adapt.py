"""Adaptive refinement loops: uniform, residual-driven and adjoint-driven.

One cycle solves the primal problem, optionally solves the enriched
adjoint and localizes the dual-weighted residual, records the study row,
checks the stopping criteria, marks a fixed fraction of elements and
refines by newest-vertex bisection (uniform refinement replaces marking
by a red split of every element).  The converged state is transferred
to the refined mesh as the initial Newton iterate.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import adjoint as adjmod
from . import assembly
from . import mesh as meshmod
from . import solver as solvermod
from .fespace import DiscreteSpace
from .law import functional_evaluate

__all__ = [
    "AdaptConfig",
    "Case",
    "StudyRow",
    "StudyRecord",
    "mark_fixed_fraction",
    "residual_indicator",
    "adapt_loop",
]

STRATEGIES = ("uniform", "residual", "adjoint")


@dataclass
class AdaptConfig:
    """Strategy and stopping parameters of the adaptation loop."""

    strategy: str = "adjoint"
    theta: float = 0.15
    max_cycles: int = 10
    tol: float = 0.0          # stop when |eta| drops below (0 disables)
    dof_cap: int = 0          # stop when total dofs exceed (0 disables)
    compute_adjoint: bool = True

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ValueError("unknown strategy %r (choose from %s)"
                             % (self.strategy, ", ".join(STRATEGIES)))
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must be in (0, 1]")
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be >= 1")


@dataclass
class Case:
    """A complete problem setup handed to the adaptation loop."""

    mesh: object
    law: object
    functional: object
    p: int
    newton: solvermod.NewtonConfig = field(
        default_factory=solvermod.NewtonConfig)
    exact_value: float = None


@dataclass
class StudyRow:
    cycle: int
    n_e: int
    n_dof_lambda: int
    n_dof_total: int
    j_h: float
    eta: float
    j_corrected: float
    err: float
    err_corrected: float
    newton_iters: int
    linear_iters: int
    seconds: float


@dataclass
class StudyRecord:
    rows: list = field(default_factory=list)
    converged: bool = True
    stop_reason: str = ""


def mark_fixed_fraction(indicator, theta):
    """Ids of the ceil-guarded top fraction of elements.

    Marks max(1, floor(theta * n)) elements with the largest indicator;
    ties break deterministically toward the lower element id.
    """
    indicator = np.asarray(indicator, dtype=float)
    n = indicator.size
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    k = max(1, int(np.floor(theta * n)))
    order = np.argsort(-indicator, kind="stable")
    return np.sort(order[:k])


def residual_indicator(state, mesh, space, law, enrich=1):
    """Element norms of the enriched-space residual.

    r_K = sqrt(|R_Q,K|^2 + |R_W,K|^2 + sum_e 0.5 |R_Lam,e|^2) with
    interior-edge rows split between the two neighbours.
    """
    test_space = space if enrich == 0 else \
        DiscreteSpace(mesh, space.p + enrich, m=space.m)
    r_q, r_w, r_lam = assembly.assemble_residual(state, mesh, space, law,
                                                 test_space=test_space)
    dm = test_space.dofmap
    ne = dm.n_elements
    sq = (np.sum(r_q.reshape(ne, -1) ** 2, axis=1)
          + np.sum(r_w.reshape(ne, -1) ** 2, axis=1))
    if dm.n_lam:
        edge_sq = np.sum(r_lam.reshape(dm.n_interior_edges, -1) ** 2, axis=1)
        for e, edge in enumerate(mesh.interior_edges):
            half = 0.5 * edge_sq[e]
            sq[edge.left] += half
            sq[edge.right] += half
    return np.sqrt(sq)


def adapt_loop(case, config, on_cycle=None):
    """Run the adaptation loop and return the StudyRecord.

    ``on_cycle(cycle, mesh, space, state, adj_state, adj_space,
    estimate)`` is invoked after each completed cycle (adjoint arguments
    are None when bookkeeping is off).
    """
    config.validate()
    mesh = case.mesh
    state = None
    prev_space = None
    record = StudyRecord()

    for cycle in range(config.max_cycles):
        t0 = time.perf_counter()
        space = DiscreteSpace(mesh, case.p, m=case.law.m)
        initial = None
        if state is not None:
            initial = solvermod.prolongate(state, prev_space, space)
        result = solvermod.newton_solve(mesh, space, case.law, case.newton,
                                        initial_state=initial)
        state = result.state
        if not result.converged:
            record.converged = False
            record.stop_reason = "newton did not converge"

        j_h = functional_evaluate(case.functional, state, mesh, space,
                                  case.law)
        adj_state = adj_space = estimate = None
        eta = float("nan")
        j_corr = float("nan")
        if config.compute_adjoint:
            adj_state, adj_space, _ = adjmod.solve_adjoint(
                state, mesh, space, case.law, case.functional, enrich=1)
            estimate = adjmod.estimate_error(state, adj_state, mesh, space,
                                             case.law, adj_space=adj_space)
            eta = estimate.eta
            j_corr = adjmod.correct_functional(j_h, estimate)

        dm = space.dofmap
        err = abs(case.exact_value - j_h) if case.exact_value is not None \
            else float("nan")
        err_corr = abs(case.exact_value - j_corr) \
            if case.exact_value is not None and config.compute_adjoint \
            else float("nan")
        record.rows.append(StudyRow(
            cycle, mesh.n_elements, dm.n_lam, dm.n_total, j_h, eta, j_corr,
            err, err_corr, result.iterations, result.linear_iterations,
            time.perf_counter() - t0))
        if on_cycle is not None:
            on_cycle(cycle, mesh, space, state, adj_state, adj_space,
                     estimate)

        if not record.converged:
            break
        if config.tol > 0 and config.compute_adjoint \
                and abs(eta) <= config.tol:
            record.stop_reason = "eta below tolerance"
            break
        if config.dof_cap and dm.n_total >= config.dof_cap:
            record.stop_reason = "dof cap reached"
            break
        if cycle == config.max_cycles - 1:
            record.stop_reason = "cycle budget exhausted"
            break

        if config.strategy == "uniform":
            new_mesh = meshmod.uniform_refine(mesh)
        else:
            if config.strategy == "adjoint":
                if estimate is None:
                    raise ValueError(
                        "adjoint strategy requires adjoint bookkeeping")
                indicator = estimate.eta_k
            else:
                indicator = residual_indicator(state, mesh, space, case.law)
            marked = mark_fixed_fraction(indicator, config.theta)
            new_mesh = meshmod.refine(mesh, marked)
        prev_space = space
        mesh = new_mesh

    return record
