"""Discrete adjoint solves and dual-weighted-residual error estimation.

The adjoint problem is the transpose of the linearized (undamped)
primal system with the functional derivative as right-hand side,

    [A B R]^T [Qt]   [dJ/dQ]
    [C D S]   [Wt] = [dJ/dW]
    [L M N]   [Lt]   [0     ],

condensed to the trace unknowns exactly like the primal solve.  The
trace block of the right-hand side is zero because the functional does
not see lambda_h.

For error estimation the adjoint is computed in an enriched space (same
mesh, degree p+1); the estimate is the adjoint-weighted primal residual

    eta = -N_h(x_h; z_h) = -(R_Q . Qt + R_W . Wt + R_Lam . Lt),

localized to elements by attributing element residual rows to their
element and splitting each interior-edge row evenly between the two
neighbours, so the signed indicators sum to eta exactly.
"""

from dataclasses import dataclass

import numpy as np

from . import assembly
from .fespace import DiscreteSpace
from .solver import prolongate_degree, solve_skeleton

__all__ = [
    "AdjointState",
    "ErrorEstimate",
    "solve_adjoint",
    "estimate_error",
    "correct_functional",
]


@dataclass
class AdjointState:
    """Adjoint coefficient vectors, in the layout of their space."""

    Q: np.ndarray
    W: np.ndarray
    L: np.ndarray
    p: int

    def copy(self):
        return AdjointState(self.Q.copy(), self.W.copy(), self.L.copy(),
                            self.p)


@dataclass
class ErrorEstimate:
    """Global estimate and its element localization.

    ``signed`` sums to ``eta`` exactly; ``eta_k`` are the magnitudes
    used as refinement indicators.
    """

    eta: float
    signed: np.ndarray
    eta_k: np.ndarray
    degree: int


def _functional_rhs(functional, state, mesh, space, law):
    """Per-element local right-hand sides [dJ/dQ; dJ/dW], shape (ne, n_loc)."""
    dj_dq, dj_dw = functional.linearize(state, mesh, space, law)
    dm = space.dofmap
    ne = dm.n_elements
    nq2 = dm.m * 2 * dm.n_p
    rhs = np.empty((ne, nq2 + dm.m * dm.n_p))
    rhs[:, :nq2] = dj_dq.reshape(ne, nq2)
    rhs[:, nq2:] = dj_dw.reshape(ne, -1)
    return rhs


def solve_adjoint(primal_state, mesh, space, law, functional, enrich=1,
                  linear_tol=1e-12):
    """Adjoint of the linearized system at a converged primal state.

    With ``enrich`` > 0 the primal state is injected into the degree
    p+enrich space and the Jacobian is evaluated there (the injection is
    exact for the nested modal bases).  Returns (AdjointState, space of
    the adjoint, LinearSolverStats).
    """
    if enrich < 0:
        raise ValueError("enrich must be >= 0")
    if enrich == 0:
        adj_space = space
        state = primal_state
    else:
        adj_space = DiscreteSpace(mesh, space.p + enrich, m=space.m)
        state = prolongate_degree(primal_state, space, adj_space)

    blocks = assembly.assemble_jacobian(state, mesh, adj_space, law)
    rhs_fg = _functional_rhs(functional, state, mesh, adj_space, law)
    system = assembly.condense_adjoint(blocks, rhs_fg)
    lam_t, stats = solve_skeleton(system, tol=linear_tol)
    q_t, w_t = assembly.back_substitute_adjoint(blocks, rhs_fg, lam_t)
    return AdjointState(q_t, w_t, lam_t, adj_space.p), adj_space, stats


def estimate_error(primal_state, adjoint_state, mesh, space, law,
                   adj_space=None):
    """Dual-weighted-residual estimate of the functional error.

    The primal residual is evaluated in the adjoint's space (injecting
    the primal state exactly) and contracted with the adjoint
    coefficients.
    """
    if adj_space is None:
        adj_space = space if adjoint_state.p == space.p else \
            DiscreteSpace(mesh, adjoint_state.p, m=space.m)
    r_q, r_w, r_lam = assembly.assemble_residual(primal_state, mesh, space,
                                                 law, test_space=adj_space)
    dm = adj_space.dofmap
    ne = dm.n_elements
    signed = -(np.sum(r_q.reshape(ne, -1)
                      * adjoint_state.Q.reshape(ne, -1), axis=1)
               + np.sum(r_w.reshape(ne, -1)
                        * adjoint_state.W.reshape(ne, -1), axis=1))
    if dm.n_lam:
        edge_signed = -np.sum(r_lam.reshape(dm.n_interior_edges, -1)
                              * adjoint_state.L.reshape(dm.n_interior_edges, -1),
                              axis=1)
        for e, edge in enumerate(mesh.interior_edges):
            half = 0.5 * edge_signed[e]
            signed[edge.left] += half
            signed[edge.right] += half
    eta = float(signed.sum())
    return ErrorEstimate(eta, signed, np.abs(signed), adj_space.p)


def correct_functional(j_h, estimate):
    """Error-corrected functional value J_h + eta."""
    return j_h + estimate.eta
