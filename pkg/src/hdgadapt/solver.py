"""Damped Newton iteration and linear skeleton solves.

The nonlinear HDG system is solved by Newton's method damped with a
pseudo-transient term (1/dt_K) <phi, dw> whose cell step size is

    dt_K = CFL * |K| / (lambda_c + 4 lambda_v),

with lambda_c and lambda_v convective/viscous spectral-radius proxies
built from the law's damping scales.  The CFL number follows a
switched-evolution-relaxation schedule CFL^n = CFL_0 * r_0 / r_n,
capped at CFL_max, so damping vanishes as the residual drops.

The condensed trace system is solved with restarted GMRES preconditioned
by a block ILU(0) factorization on the skeleton block sparsity; a sparse
direct solve is the deterministic fallback when GMRES stagnates.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import assembly
from .fespace import DiscreteSpace

__all__ = [
    "SolutionState",
    "NewtonConfig",
    "NewtonResult",
    "LinearSolverStats",
    "SolverError",
    "zero_state",
    "pseudo_timestep",
    "pseudo_timestep_field",
    "newton_solve",
    "solve_skeleton",
    "prolongate",
    "prolongate_degree",
    "BlockILU0",
]


class SolverError(Exception):
    """Raised when the nonlinear or linear solver fails to converge."""


@dataclass
class SolutionState:
    """Coefficient vectors of (q_h, w_h, lambda_h) at one degree."""

    Q: np.ndarray
    W: np.ndarray
    L: np.ndarray
    p: int
    generation: int = 0

    def copy(self):
        return SolutionState(self.Q.copy(), self.W.copy(), self.L.copy(),
                             self.p, self.generation)


def zero_state(space):
    dm = space.dofmap
    return SolutionState(np.zeros(dm.n_qdof), np.zeros(dm.n_w),
                         np.zeros(dm.n_lam), space.p, space.mesh.generation)


@dataclass
class NewtonConfig:
    """Newton and linear-solver parameters (absolute max-norm residual)."""

    tol: float = 1e-10
    max_iter: int = 50
    cfl0: float = 10.0
    cfl_max: float = 1e12
    linear_tol: float = 1e-12
    linear_max_iter: int = 2000
    linear_restart: int = 60


@dataclass
class LinearSolverStats:
    iterations: int = 0
    residual: float = 0.0
    seconds: float = 0.0
    used_fallback: bool = False
    converged: bool = True


@dataclass
class NewtonResult:
    state: SolutionState
    iterations: int
    linear_iterations: int
    residual_norms: list = field(default_factory=list)
    converged: bool = True


def pseudo_timestep(geometry, law, cfl):
    """Pseudo-time step of one element from its geometry."""
    if math.isinf(cfl):
        return math.inf
    perim = float(np.sum(geometry.lengths))
    c_scale, v_scale = law.damping_scales()
    lam_c = c_scale * perim
    lam_v = v_scale * perim ** 2 / geometry.area
    return cfl * geometry.area / (lam_c + 4.0 * lam_v)


def pseudo_timestep_field(space, law, cfl):
    """Vectorized dt_K over all elements of a space."""
    area = space.area
    if math.isinf(cfl):
        return np.full(area.shape, math.inf)
    perim = space.edge_len.sum(axis=1)
    c_scale, v_scale = law.damping_scales()
    lam_c = c_scale * perim
    lam_v = v_scale * perim ** 2 / area
    return cfl * area / (lam_c + 4.0 * lam_v)


class BlockILU0:
    """Incomplete block LU factorization on the skeleton block pattern.

    No fill-in: the factors live on the sparsity pattern of the block
    matrix.  Diagonal blocks are inverted densely (they are small:
    m * (p+1) rows).
    """

    def __init__(self, system):
        self.n = system.n_blocks
        self.bs = system.block_size
        self.vals = {k: v.copy() for k, v in system.blocks.items()}
        cols = [[] for _ in range(self.n)]
        for (i, j) in self.vals:
            cols[i].append(j)
        self.cols = [sorted(c) for c in cols]
        self.diag_inv = [None] * self.n
        self._factor()

    def _factor(self):
        vals = self.vals
        for i in range(self.n):
            for k in self.cols[i]:
                if k >= i:
                    break
                vals[(i, k)] = vals[(i, k)] @ self.diag_inv[k]
                lik = vals[(i, k)]
                for j in self.cols[k]:
                    if j > k and (i, j) in vals:
                        vals[(i, j)] -= lik @ vals[(k, j)]
            self.diag_inv[i] = np.linalg.inv(vals[(i, i)])

    def solve(self, b):
        bs = self.bs
        z = np.asarray(b, dtype=float).reshape(self.n, bs).copy()
        for i in range(self.n):
            for k in self.cols[i]:
                if k >= i:
                    break
                z[i] -= self.vals[(i, k)] @ z[k]
        x = np.zeros_like(z)
        for i in range(self.n - 1, -1, -1):
            acc = z[i].copy()
            for j in reversed(self.cols[i]):
                if j <= i:
                    break
                acc -= self.vals[(i, j)] @ x[j]
            x[i] = self.diag_inv[i] @ acc
        return x.reshape(-1)


def solve_skeleton(system, tol=1e-12, restart=60, max_iter=2000):
    """Solve the condensed trace system to a relative residual ``tol``.

    Returns (solution, LinearSolverStats).  GMRES with block-ILU(0)
    preconditioning; falls back to a sparse direct factorization when
    GMRES does not reach the tolerance.
    """
    t0 = time.perf_counter()
    rhs = system.rhs
    n = rhs.size
    if n == 0:
        return np.zeros(0), LinearSolverStats(seconds=time.perf_counter() - t0)
    b_norm = np.linalg.norm(rhs)
    if b_norm == 0.0:
        return np.zeros(n), LinearSolverStats(seconds=time.perf_counter() - t0)

    mat = system.to_csr()
    prec = BlockILU0(system)
    op = spla.LinearOperator((n, n), matvec=prec.solve)
    count = [0]

    def cb(_):
        count[0] += 1

    try:
        x, info = spla.gmres(mat, rhs, rtol=tol, atol=0.0, restart=restart,
                             maxiter=max(1, max_iter // max(1, restart)),
                             M=op, callback=cb, callback_type="pr_norm")
    except TypeError:  # scipy < 1.12 uses `tol`
        x, info = spla.gmres(mat, rhs, tol=tol, atol=0.0, restart=restart,
                             maxiter=max(1, max_iter // max(1, restart)),
                             M=op, callback=cb, callback_type="pr_norm")
    res = np.linalg.norm(mat @ x - rhs) / b_norm
    stats = LinearSolverStats(iterations=count[0], residual=res)
    if info != 0 or res > tol:
        x = spla.splu(mat.tocsc()).solve(rhs)
        stats.residual = np.linalg.norm(mat @ x - rhs) / b_norm
        stats.used_fallback = True
        stats.converged = stats.residual <= max(tol, 1e-10)
    stats.seconds = time.perf_counter() - t0
    return x, stats


def _residual_norm(residual):
    return max((np.abs(r).max() if r.size else 0.0) for r in residual)


def newton_solve(mesh, space, law, config=None, initial_state=None):
    """Damped Newton iteration for the steady HDG system.

    Iterates until the residual max-norm drops below ``config.tol``.
    Raises SolverError on divergence (non-finite residual) and flags
    non-convergence in the result when the iteration budget runs out.
    """
    if config is None:
        config = NewtonConfig()
    state = initial_state.copy() if initial_state is not None \
        else zero_state(space)
    residual = assembly.assemble_residual(state, mesh, space, law)
    r_norm = _residual_norm(residual)
    norms = [r_norm]
    r0 = r_norm
    lin_iters = 0
    dm = space.dofmap

    for it in range(config.max_iter):
        if r_norm <= config.tol:
            return NewtonResult(state, it, lin_iters, norms)
        if not np.isfinite(r_norm):
            raise SolverError("non-finite residual: Newton iteration diverged")
        cfl = config.cfl0
        if not math.isinf(cfl):
            cfl = min(config.cfl_max, max(config.cfl0,
                                          config.cfl0 * r0 / max(r_norm, 1e-300)))
        dt = pseudo_timestep_field(space, law, cfl)
        blocks = assembly.assemble_jacobian(state, mesh, space, law, dt)
        system = assembly.condense(blocks)
        dlam, stats = solve_skeleton(system, tol=config.linear_tol,
                                     restart=config.linear_restart,
                                     max_iter=config.linear_max_iter)
        if not stats.converged:
            raise SolverError("skeleton linear solve failed")
        lin_iters += stats.iterations
        dq, dw = assembly.back_substitute(blocks, dlam)
        state.Q += dq
        state.W += dw
        state.L += dlam
        residual = assembly.assemble_residual(state, mesh, space, law)
        r_norm = _residual_norm(residual)
        norms.append(r_norm)

    converged = r_norm <= config.tol
    return NewtonResult(state, config.max_iter, lin_iters, norms, converged)


def prolongate_degree(state, space_from, space_to):
    """Exact transfer between nested modal spaces on the same mesh.

    Enrichment pads the higher modes with zeros; restriction truncates.
    """
    fm, to = space_from.dofmap, space_to.dofmap
    if (fm.n_elements, fm.n_interior_edges, fm.m) != \
            (to.n_elements, to.n_interior_edges, to.m):
        raise ValueError("spaces live on different meshes")
    ne, nf, m = fm.n_elements, fm.n_interior_edges, fm.m
    k = min(fm.n_p, to.n_p)
    kq = min(fm.n_q, to.n_q)
    w = np.zeros((ne, m, to.n_p))
    w[:, :, :k] = state.W.reshape(ne, m, fm.n_p)[:, :, :k]
    q = np.zeros((ne, m, 2, to.n_p))
    q[:, :, :, :k] = state.Q.reshape(ne, m, 2, fm.n_p)[:, :, :, :k]
    lam = np.zeros((nf, m, to.n_q))
    lam[:, :, :kq] = state.L.reshape(nf, m, fm.n_q)[:, :, :kq]
    return SolutionState(q.reshape(-1), w.reshape(-1), lam.reshape(-1),
                         space_to.p, state.generation)


def _transfer_mesh(state, space_from, space_to):
    """L2 projection of element data onto the children of a refined mesh.

    Exact because each child's polynomial space contains the parent
    polynomial restricted to the child.  Trace coefficients on the new
    skeleton are rebuilt from the mean of the two neighbouring element
    traces of the transferred field.
    """
    mesh_to = space_to.mesh
    parents = mesh_to.parent_elements
    if parents is None:
        raise ValueError("target mesh has no refinement genealogy")
    fm, to = space_from.dofmap, space_to.dofmap
    ne, m, n_p = to.n_elements, to.m, to.n_p
    ws_par = state.W.reshape(fm.n_elements, m, fm.n_p) \
        * space_from.scale[:, None, None]
    qs_par = state.Q.reshape(fm.n_elements, m, 2, fm.n_p) \
        * space_from.scale[:, None, None, None]

    # reference coordinates of the child quadrature points in the parent
    xg = space_to.qp_phys                                    # (ne, n_g, 2)
    par = parents
    v0 = space_from.mesh.vertices[space_from.mesh.elements[par][:, 0]]
    inv = space_from.inv_jac[par]                            # (ne, 2, 2)
    xi = np.einsum("ekd,egd->egk", inv, xg - v0[:, None, :])
    vals_par = space_from.basis.eval_element(
        xi.reshape(-1, 2)).reshape(ne, -1, fm.n_p)           # (ne, n_g, n_p)

    w_at = np.einsum("ecn,egn->egc", ws_par[par], vals_par)
    q_at = np.einsum("ecdn,egn->egcd", qs_par[par], vals_par)

    wq = space_to.quad.weights[None, :] * space_to.det[:, None]
    phis = space_to.phi[None, :, :] * space_to.scale[:, None, None]
    w_new = np.einsum("eg,egi,egc->eci", wq, phis, w_at)
    q_new = np.einsum("eg,egi,egcd->ecdi", wq, phis, q_at)

    # trace unknowns: project the mean of the two neighbour traces
    ws_new = w_new * space_to.scale[:, None, None]
    lam = np.zeros((to.n_interior_edges, m, to.n_q))
    u = space_to.quad.edge_weights
    psi = space_to.psi
    counts = np.zeros(to.n_interior_edges)
    for j in range(3):
        ii = np.nonzero(~space_to.edge_is_bdry[:, j])[0]
        if ii.size == 0:
            continue
        tr = space_to.trace[j, space_to.edge_orient[ii, j]]
        w_tr = np.einsum("ecn,ern->erc", ws_new[ii], tr)
        h = space_to.edge_len[ii, j]
        contrib = np.einsum("r,rk,erc,e->eck", u, psi, w_tr, np.sqrt(h))
        np.add.at(lam, space_to.edge_id[ii, j], contrib)
        np.add.at(counts, space_to.edge_id[ii, j], 1.0)
    lam /= np.maximum(counts, 1.0)[:, None, None]

    return SolutionState(q_new.reshape(-1), w_new.reshape(-1),
                         lam.reshape(-1), space_to.p, mesh_to.generation)


def prolongate(state, space_from, space_to):
    """Transfer a state to an enriched degree or to a refined mesh."""
    if space_to.mesh is space_from.mesh:
        return prolongate_degree(state, space_from, space_to)
    if space_to.p != space_from.p:
        raise ValueError("mesh transfer requires matching degree")
    return _transfer_mesh(state, space_from, space_to)
