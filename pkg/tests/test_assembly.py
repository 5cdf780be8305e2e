import numpy as np
import pytest

from hdgadapt import assembly
from hdgadapt.fespace import DiscreteSpace
from hdgadapt.law import AdvectionDiffusionLaw
from hdgadapt.mesh import build_mesh, unit_square_mesh
from hdgadapt.solver import SolutionState, zero_state


def two_element_mesh():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return build_mesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))


def random_state(space, seed=0, scale=0.2):
    state = zero_state(space)
    rng = np.random.default_rng(seed)
    state.Q[:] = scale * rng.standard_normal(state.Q.size)
    state.W[:] = scale * rng.standard_normal(state.W.size)
    state.L[:] = scale * rng.standard_normal(state.L.size)
    return state


def full_residual(state, mesh, space, law):
    r_q, r_w, r_lam = assembly.assemble_residual(state, mesh, space, law)
    return np.concatenate([r_q, r_w, r_lam])


class PolyLaw(AdvectionDiffusionLaw):
    """Advection-diffusion whose manufactured solution is the quartic
    bubble w = x(1-x) y(1-y) (zero on the boundary, inside P4)."""

    def __init__(self, eps=0.7):
        super().__init__(eps, source_fn=self._source)

    def _source(self, x, y):
        wx = (1.0 - 2.0 * x) * y * (1.0 - y)
        wy = x * (1.0 - x) * (1.0 - 2.0 * y)
        lap = -2.0 * y * (1.0 - y) - 2.0 * x * (1.0 - x)
        return wx + wy - self.eps * lap

    @staticmethod
    def exact(x, y):
        return x * (1.0 - x) * y * (1.0 - y)

    @staticmethod
    def exact_grad(x, y):
        return ((1.0 - 2.0 * x) * y * (1.0 - y),
                x * (1.0 - x) * (1.0 - 2.0 * y))


def project_exact_poly(space):
    """Exact-coefficient state of the quartic bubble (needs p >= 4)."""
    state = zero_state(space)
    dm = space.dofmap
    wq = space.quad.weights[None, :] * space.det[:, None]
    phis = space.phi[None, :, :] * space.scale[:, None, None]
    x, y = space.qp_phys[..., 0], space.qp_phys[..., 1]
    w = PolyLaw.exact(x, y)
    gx, gy = PolyLaw.exact_grad(x, y)
    state.W[:] = np.einsum("eg,egi,eg->ei", wq, phis, w).reshape(-1)
    q = np.stack([gx, gy], axis=-1)
    state.Q[:] = np.einsum("eg,egi,egd->edi", wq, phis, q).reshape(-1)
    lam = np.zeros((dm.n_interior_edges, dm.n_q))
    u = space.quad.edge_points
    uw = space.quad.edge_weights
    for gid, edge in enumerate(space.mesh.interior_edges):
        a, b = space.mesh.vertices[list(edge.vertices)]
        pts = a[None, :] + u[:, None] * (b - a)[None, :]
        vals = PolyLaw.exact(pts[:, 0], pts[:, 1])
        psi = space.psi / np.sqrt(edge.length)
        lam[gid] = edge.length * np.einsum("r,rk,r->k", uw, psi, vals)
    state.L[:] = lam.reshape(-1)
    return state


def test_monolithic_rhs_is_minus_residual():
    mesh = two_element_mesh()
    law = AdvectionDiffusionLaw(0.2)
    space = DiscreteSpace(mesh, 2)
    state = random_state(space)
    blocks = assembly.assemble_jacobian(state, mesh, space, law)
    _, rhs = assembly.monolithic_system(blocks)
    assert np.abs(rhs + full_residual(state, mesh, space, law)).max() < 1e-13


@pytest.mark.parametrize("p", [1, 2])
def test_jacobian_matches_dense_finite_differences(p):
    mesh = two_element_mesh()
    law = AdvectionDiffusionLaw(0.15)
    space = DiscreteSpace(mesh, p)
    state = random_state(space, seed=4)
    blocks = assembly.assemble_jacobian(state, mesh, space, law)
    mat, _ = assembly.monolithic_system(blocks)
    dm = space.dofmap
    x0 = np.concatenate([state.Q, state.W, state.L])

    def resid(x):
        s = SolutionState(x[:dm.n_qdof].copy(),
                          x[dm.n_qdof:dm.n_qdof + dm.n_w].copy(),
                          x[dm.n_qdof + dm.n_w:].copy(), p)
        return full_residual(s, mesh, space, law)

    h = 1e-6
    fd = np.empty_like(mat)
    for k in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[k] += h
        xm[k] -= h
        fd[:, k] = (resid(xp) - resid(xm)) / (2 * h)
    assert np.abs(mat - fd).max() < 1e-7 * max(1.0, np.abs(mat).max())


@pytest.mark.parametrize("p", [1, 2, 3])
def test_condensed_solve_matches_dense(p):
    mesh = unit_square_mesh(2)
    law = AdvectionDiffusionLaw(0.3)
    space = DiscreteSpace(mesh, p)
    state = random_state(space, seed=9)
    blocks = assembly.assemble_jacobian(state, mesh, space, law)
    mat, rhs = assembly.monolithic_system(blocks)
    dense = np.linalg.solve(mat, rhs)
    dm = space.dofmap

    system = assembly.condense(blocks)
    dlam = np.linalg.solve(system.to_csr().toarray(), system.rhs)
    dq, dw = assembly.back_substitute(blocks, dlam)
    ref = max(1.0, np.abs(dense).max())
    assert np.abs(dlam - dense[dm.n_qdof + dm.n_w:]).max() < 1e-10 * ref
    assert np.abs(dq - dense[:dm.n_qdof]).max() < 1e-10 * ref
    assert np.abs(dw - dense[dm.n_qdof:dm.n_qdof + dm.n_w]).max() < 1e-10 * ref


def test_skeleton_sparsity_bound():
    mesh = unit_square_mesh(4)
    law = AdvectionDiffusionLaw(0.1)
    space = DiscreteSpace(mesh, 2)
    blocks = assembly.assemble_jacobian(zero_state(space), mesh, space, law)
    system = assembly.condense(blocks)
    per_row = np.zeros(system.n_blocks, dtype=int)
    for (i, j) in system.blocks:
        per_row[i] += 1
    assert per_row.max() <= 5
    assert len(system.blocks) <= 5 * system.n_blocks
    # every row has its diagonal block
    assert all((i, i) in system.blocks for i in range(system.n_blocks))


def test_residual_vanishes_at_polynomial_exact_solution():
    law = PolyLaw(0.7)
    mesh = unit_square_mesh(3)
    space = DiscreteSpace(mesh, 4)
    state = project_exact_poly(space)
    res = full_residual(state, mesh, space, law)
    assert np.abs(res).max() < 1e-12


def test_enriched_residual_vanishes_at_polynomial_exact_solution():
    # injection into the p+1 space is exact, and the residual still
    # vanishes because the test space only grows
    law = PolyLaw(0.7)
    mesh = unit_square_mesh(2)
    space = DiscreteSpace(mesh, 4)
    enriched = DiscreteSpace(mesh, 5)
    state = project_exact_poly(space)
    r_q, r_w, r_lam = assembly.assemble_residual(state, mesh, space, law,
                                                 test_space=enriched)
    assert max(np.abs(r_q).max(), np.abs(r_w).max(),
               np.abs(r_lam).max()) < 1e-12


def test_enriched_residual_restricts_to_plain_residual():
    # the leading modes of the enriched residual are the plain residual
    # (polynomial source, so both quadrature orders integrate exactly)
    mesh = unit_square_mesh(2)
    law = PolyLaw(0.2)
    space = DiscreteSpace(mesh, 2)
    enriched = DiscreteSpace(mesh, 3)
    state = random_state(space, seed=21)
    r_q, r_w, r_lam = assembly.assemble_residual(state, mesh, space, law)
    R_q, R_w, R_lam = assembly.assemble_residual(state, mesh, space, law,
                                                 test_space=enriched)
    dm, DM = space.dofmap, enriched.dofmap
    ne, nf = dm.n_elements, dm.n_interior_edges
    assert np.abs(R_w.reshape(ne, DM.n_p)[:, :dm.n_p]
                  - r_w.reshape(ne, dm.n_p)).max() < 1e-13
    assert np.abs(R_q.reshape(ne, 2, DM.n_p)[:, :, :dm.n_p]
                  - r_q.reshape(ne, 2, dm.n_p)).max() < 1e-13
    assert np.abs(R_lam.reshape(nf, DM.n_q)[:, :dm.n_q]
                  - r_lam.reshape(nf, dm.n_q)).max() < 1e-13


def test_condense_rejects_mismatched_state():
    mesh = unit_square_mesh(2)
    law = AdvectionDiffusionLaw(0.1)
    space = DiscreteSpace(mesh, 2)
    other = DiscreteSpace(mesh, 3)
    with pytest.raises(ValueError):
        assembly.assemble_jacobian(zero_state(other), mesh, space, law)
