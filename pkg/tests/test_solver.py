import math

import numpy as np
import pytest

from hdgadapt import assembly
from hdgadapt.fespace import DiscreteSpace
from hdgadapt.law import AdvectionDiffusionLaw, ConservationLaw
from hdgadapt.mesh import element_geometry, refine, uniform_refine, \
    unit_square_mesh
from hdgadapt.solver import (BlockILU0, NewtonConfig, prolongate,
                             prolongate_degree, pseudo_timestep,
                             pseudo_timestep_field, newton_solve,
                             solve_skeleton, zero_state)


class BurgersLaw(ConservationLaw):
    """Scalar viscous Burgers-type law with a manufactured solution.

    f_c = (w^2/2, w^2/2), f_v = eps * q; the source makes
    w = a sin(pi x) sin(pi y) the exact solution (zero on the boundary).
    """

    m = 1

    def __init__(self, eps=0.1, amp=0.5):
        self.eps = eps
        self.amp = amp

    def exact(self, x, y):
        return self.amp * np.sin(np.pi * x) * np.sin(np.pi * y)

    def conv_flux(self, w):
        f = 0.5 * w[..., 0] ** 2
        return np.stack([f, f], axis=-1)[..., None, :]

    def conv_flux_jac(self, w):
        jac = np.zeros(w.shape[:-1] + (1, 2, 1))
        jac[..., 0, 0, 0] = w[..., 0]
        jac[..., 0, 1, 0] = w[..., 0]
        return jac

    def visc_flux(self, w, q):
        return self.eps * q

    def visc_flux_jac_w(self, w, q):
        return np.zeros(w.shape[:-1] + (1, 2, 1))

    def visc_flux_jac_q(self, w, q):
        jac = np.zeros(w.shape[:-1] + (1, 2, 1, 2))
        jac[..., 0, 0, 0, 0] = self.eps
        jac[..., 0, 1, 0, 1] = self.eps
        return jac

    def source(self, x, w_unused, q_unused):
        xx, yy = x[..., 0], x[..., 1]
        w = self.exact(xx, yy)
        wx = self.amp * np.pi * np.cos(np.pi * xx) * np.sin(np.pi * yy)
        wy = self.amp * np.pi * np.sin(np.pi * xx) * np.cos(np.pi * yy)
        return (w * (wx + wy) + 2.0 * np.pi ** 2 * self.eps * w)[..., None]

    def boundary_state(self, w, x, tag):
        return np.zeros_like(w)

    def stabilization(self, normal, h_edge, degree):
        alpha_c = np.full(normal.shape[:-1], 1.0 + self.amp)
        return alpha_c, np.broadcast_to(self.eps, alpha_c.shape)

    def damping_scales(self):
        return 2.0 * self.amp, self.eps


def test_pseudo_timestep_formula():
    mesh = unit_square_mesh(2)
    law = AdvectionDiffusionLaw(0.05)
    geom = element_geometry(mesh, 0)
    perim = geom.lengths.sum()
    lam_c = math.sqrt(2.0) * perim
    lam_v = 0.05 * perim ** 2 / geom.area
    expected = 10.0 * geom.area / (lam_c + 4.0 * lam_v)
    assert abs(pseudo_timestep(geom, law, 10.0) - expected) < 1e-14
    assert math.isinf(pseudo_timestep(geom, law, math.inf))

    space = DiscreteSpace(mesh, 1)
    field = pseudo_timestep_field(space, law, 10.0)
    assert abs(field[0] - expected) < 1e-14


def test_block_ilu0_exact_on_block_diagonal():
    rng = np.random.default_rng(0)
    blocks = {}
    bs, n = 3, 5
    for i in range(n):
        blocks[(i, i)] = rng.standard_normal((bs, bs)) + 4 * np.eye(bs)
    system = assembly.SkeletonSystem(n, bs, blocks,
                                     rng.standard_normal(n * bs))
    prec = BlockILU0(system)
    x = prec.solve(system.rhs)
    assert np.abs(system.to_csr() @ x - system.rhs).max() < 1e-12


def test_block_ilu0_exact_on_triangular_pattern():
    # a pattern with no fill-in makes ILU(0) an exact factorization
    rng = np.random.default_rng(1)
    bs, n = 2, 4
    blocks = {}
    for i in range(n):
        blocks[(i, i)] = rng.standard_normal((bs, bs)) + 5 * np.eye(bs)
    for i in range(1, n):
        blocks[(i, i - 1)] = rng.standard_normal((bs, bs))
        blocks[(i - 1, i)] = rng.standard_normal((bs, bs))
    system = assembly.SkeletonSystem(n, bs, blocks,
                                     rng.standard_normal(n * bs))
    prec = BlockILU0(system)
    x = prec.solve(system.rhs)
    # block-tridiagonal: ILU(0) is a complete LU factorization
    assert np.abs(system.to_csr() @ x - system.rhs).max() < 1e-10


def test_solve_skeleton_reaches_tolerance():
    mesh = unit_square_mesh(4)
    law = AdvectionDiffusionLaw(0.1)
    space = DiscreteSpace(mesh, 2)
    blocks = assembly.assemble_jacobian(zero_state(space), mesh, space, law)
    system = assembly.condense(blocks)
    x, stats = solve_skeleton(system, tol=1e-12)
    res = np.linalg.norm(system.to_csr() @ x - system.rhs)
    assert res <= 1e-12 * np.linalg.norm(system.rhs)
    assert stats.converged


def test_solve_skeleton_zero_rhs():
    mesh = unit_square_mesh(2)
    law = AdvectionDiffusionLaw(0.1)
    space = DiscreteSpace(mesh, 1)
    blocks = assembly.assemble_jacobian(zero_state(space), mesh, space, law)
    system = assembly.condense(blocks)
    system.rhs[:] = 0.0
    x, stats = solve_skeleton(system)
    assert np.all(x == 0.0)
    assert stats.iterations == 0


def test_newton_linear_law_single_step():
    mesh = unit_square_mesh(3)
    law = AdvectionDiffusionLaw(0.1)
    space = DiscreteSpace(mesh, 2)
    result = newton_solve(mesh, space, law, NewtonConfig(cfl0=math.inf))
    assert result.converged
    assert result.iterations == 1
    assert result.residual_norms[-1] <= 1e-10


def test_newton_converged_initial_state_takes_no_steps():
    mesh = unit_square_mesh(2)
    law = AdvectionDiffusionLaw(0.1)
    space = DiscreteSpace(mesh, 2)
    first = newton_solve(mesh, space, law, NewtonConfig(cfl0=math.inf))
    again = newton_solve(mesh, space, law, NewtonConfig(cfl0=math.inf),
                         initial_state=first.state)
    assert again.iterations == 0


def test_newton_finite_cfl_converges():
    mesh = unit_square_mesh(2)
    law = AdvectionDiffusionLaw(0.1)
    space = DiscreteSpace(mesh, 1)
    result = newton_solve(mesh, space, law, NewtonConfig(cfl0=10.0))
    assert result.converged
    assert result.iterations >= 2  # damping makes the linear solve inexact


def test_newton_nonlinear_quadratic_convergence():
    mesh = unit_square_mesh(4)
    law = BurgersLaw(eps=0.1)
    space = DiscreteSpace(mesh, 2)
    result = newton_solve(mesh, space, law,
                          NewtonConfig(cfl0=math.inf, tol=1e-12))
    assert result.converged
    norms = result.residual_norms
    # once the iteration enters the quadratic basin the residual drops
    # by far more than a fixed linear rate per step
    assert norms[-1] < 1e-12
    assert norms[-2] < 1e-5 * norms[-3]


def test_newton_nonlinear_solution_accuracy():
    law = BurgersLaw(eps=0.2)
    errors = []
    for n in (4, 8):
        mesh = unit_square_mesh(n)
        space = DiscreteSpace(mesh, 2)
        result = newton_solve(mesh, space, law, NewtonConfig(cfl0=math.inf))
        dm = space.dofmap
        ws = result.state.W.reshape(dm.n_elements, dm.n_p) \
            * space.scale[:, None]
        wh = ws @ space.phi.T
        wexact = law.exact(space.qp_phys[..., 0], space.qp_phys[..., 1])
        wq = space.quad.weights[None, :] * space.det[:, None]
        errors.append(np.sqrt(np.sum(wq * (wh - wexact) ** 2)))
    order = np.log2(errors[0] / errors[1])
    assert order > 2.5  # degree 2: optimal L2 order 3


def test_prolongate_degree_round_trip():
    mesh = unit_square_mesh(2)
    coarse = DiscreteSpace(mesh, 2)
    fine = DiscreteSpace(mesh, 4)
    state = zero_state(coarse)
    rng = np.random.default_rng(3)
    state.Q[:] = rng.standard_normal(state.Q.size)
    state.W[:] = rng.standard_normal(state.W.size)
    state.L[:] = rng.standard_normal(state.L.size)
    up = prolongate_degree(state, coarse, fine)
    back = prolongate_degree(up, fine, coarse)
    assert np.abs(back.W - state.W).max() == 0.0
    assert np.abs(back.Q - state.Q).max() == 0.0
    assert np.abs(back.L - state.L).max() == 0.0
    # injection preserves point values
    vals_c = (state.W.reshape(-1, coarse.dofmap.n_p)
              * coarse.scale[:, None]) @ coarse.phi.T
    # evaluate the enriched representation at the same physical points
    phi_f = fine.basis.eval_element(coarse.quad.points)
    vals_f = (up.W.reshape(-1, fine.dofmap.n_p)
              * fine.scale[:, None]) @ phi_f.T
    assert np.abs(vals_c - vals_f).max() < 1e-12


@pytest.mark.parametrize("refiner", ["uniform", "bisect"])
def test_prolongate_mesh_transfer_is_exact_for_polynomials(refiner):
    mesh = unit_square_mesh(2)
    space = DiscreteSpace(mesh, 2)
    # project the global polynomial w = 1 + 2x - y + x*y elementwise
    poly = lambda x, y: 1.0 + 2.0 * x - y + x * y
    wq = space.quad.weights[None, :] * space.det[:, None]
    phis = space.phi[None, :, :] * space.scale[:, None, None]
    w = poly(space.qp_phys[..., 0], space.qp_phys[..., 1])
    state = zero_state(space)
    state.W[:] = np.einsum("eg,egi,eg->ei", wq, phis, w).reshape(-1)

    fine_mesh = uniform_refine(mesh) if refiner == "uniform" \
        else refine(mesh, [0, 3])
    fine = DiscreteSpace(fine_mesh, 2)
    moved = prolongate(state, space, fine)
    wh = (moved.W.reshape(-1, fine.dofmap.n_p)
          * fine.scale[:, None]) @ fine.phi.T
    w_ref = poly(fine.qp_phys[..., 0], fine.qp_phys[..., 1])
    assert np.abs(wh - w_ref).max() < 1e-12

    # trace unknowns reproduce the polynomial along interior edges
    dm = fine.dofmap
    lam = moved.L.reshape(dm.n_interior_edges, dm.n_q)
    u = fine.quad.edge_points
    for gid, edge in enumerate(fine_mesh.interior_edges):
        a, b = fine_mesh.vertices[list(edge.vertices)]
        pts = a[None, :] + u[:, None] * (b - a)[None, :]
        vals = (fine.psi / np.sqrt(edge.length)) @ lam[gid]
        assert np.abs(vals - poly(pts[:, 0], pts[:, 1])).max() < 1e-12


def test_prolongate_rejects_degree_change_across_meshes():
    mesh = unit_square_mesh(2)
    space = DiscreteSpace(mesh, 2)
    fine = DiscreteSpace(uniform_refine(mesh), 3)
    with pytest.raises(ValueError):
        prolongate(zero_state(space), space, fine)
