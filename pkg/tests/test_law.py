import numpy as np
import pytest

mpmath = pytest.importorskip("mpmath")

from hdgadapt.fespace import DiscreteSpace
from hdgadapt.law import (AdvectionDiffusionLaw, BoundaryFluxFunctional,
                          exact_functional, exact_solution,
                          manufactured_source)
from hdgadapt.mesh import unit_square_mesh
from hdgadapt.solver import zero_state


def mp_solution(x, y, eps):
    """Extended-precision manufactured solution."""
    with mpmath.workdps(50):
        def layer(t):
            t = mpmath.mpf(t)
            return t + (mpmath.e ** (t / eps) - 1) / (1 - mpmath.e ** (1 / eps))
        return float(layer(x) * layer(y))


@pytest.mark.parametrize("eps", [0.5, 0.1, 0.01])
def test_exact_solution_matches_extended_precision(eps):
    rng = np.random.default_rng(3)
    for _ in range(20):
        x, y = rng.uniform(0, 1, 2)
        ref = mp_solution(x, y, eps)
        assert abs(exact_solution(x, y, eps) - ref) < 1e-13


def test_exact_solution_stable_for_small_eps():
    # the naive formula overflows; the rescaled one must not
    vals = exact_solution(np.linspace(0, 1, 11), 0.5, 1e-4)
    assert np.all(np.isfinite(vals))
    assert abs(exact_solution(0.0, 0.7, 1e-4)) < 1e-12
    assert abs(exact_solution(1.0, 0.7, 1e-4)) < 1e-12


def test_exact_solution_vanishes_on_boundary():
    t = np.linspace(0.0, 1.0, 13)
    for eps in (0.1, 0.01):
        assert np.abs(exact_solution(t, 0.0 * t, eps)).max() < 1e-14
        assert np.abs(exact_solution(0.0 * t, t, eps)).max() < 1e-14
        assert np.abs(exact_solution(t, 0.0 * t + 1.0, eps)).max() < 1e-13
        assert np.abs(exact_solution(0.0 * t + 1.0, t, eps)).max() < 1e-13


@pytest.mark.parametrize("eps", [0.5, 0.05])
def test_manufactured_source_matches_operator(eps):
    # central differences of div(w, w) - eps*Lap(w) reproduce s at O(h^2)
    rng = np.random.default_rng(11)
    pts = rng.uniform(0.2, 0.8, (12, 2))
    errors = []
    for h in (1e-3, 5e-4):
        err = 0.0
        for x, y in pts:
            wx = (exact_solution(x + h, y, eps)
                  - exact_solution(x - h, y, eps)) / (2 * h)
            wy = (exact_solution(x, y + h, eps)
                  - exact_solution(x, y - h, eps)) / (2 * h)
            lap = (exact_solution(x + h, y, eps)
                   + exact_solution(x - h, y, eps)
                   + exact_solution(x, y + h, eps)
                   + exact_solution(x, y - h, eps)
                   - 4 * exact_solution(x, y, eps)) / h ** 2
            err = max(err, abs(wx + wy - eps * lap
                               - manufactured_source(x, y, eps)))
        errors.append(err)
    assert errors[0] < 1e-4
    assert errors[1] < 0.5 * errors[0]  # roughly second order


@pytest.mark.parametrize("eps", [0.1, 0.01])
def test_exact_functional_matches_quadrature_oracle(eps):
    # integrate psi * (w - eps n.q) along the four boundary sides
    with mpmath.workdps(40):
        meps = mpmath.mpf(eps)

        def layer(t):
            return t + (mpmath.e ** (t / meps) - 1) / (1 - mpmath.e ** (1 / meps))

        def dlayer(t):
            return 1 + (mpmath.e ** (t / meps) / meps) / (1 - mpmath.e ** (1 / meps))

        def psi(x, y):
            return mpmath.cos(2 * mpmath.pi * x) * mpmath.cos(2 * mpmath.pi * y)

        # on each side w = 0; outward normal derivative of w = X(x) Y(y)
        total = mpmath.quad(lambda t: psi(t, 0) * meps * dlayer(0) * layer(t),
                            [0, 1])
        total += mpmath.quad(lambda t: psi(t, 1) * (-meps) * dlayer(1) * layer(t),
                             [0, 1])
        total += mpmath.quad(lambda t: psi(0, t) * meps * dlayer(0) * layer(t),
                             [0, 1])
        total += mpmath.quad(lambda t: psi(1, t) * (-meps) * dlayer(1) * layer(t),
                             [0, 1])
        ref = float(total)
    assert abs(exact_functional(eps) - ref) < 1e-12


def test_flux_jacobians_match_finite_differences():
    law = AdvectionDiffusionLaw(0.3)
    rng = np.random.default_rng(5)
    w = rng.standard_normal((4, 6, 1))
    q = rng.standard_normal((4, 6, 1, 2))
    h = 1e-7
    dw = rng.standard_normal(w.shape)
    dq = rng.standard_normal(q.shape)

    fd_c = (law.conv_flux(w + h * dw) - law.conv_flux(w - h * dw)) / (2 * h)
    an_c = np.einsum("...cdb,...b->...cd", law.conv_flux_jac(w), dw)
    assert np.abs(fd_c - an_c).max() < 1e-6 * max(1.0, np.abs(an_c).max())

    fd_v = (law.visc_flux(w, q + h * dq) - law.visc_flux(w, q - h * dq)) / (2 * h)
    an_v = np.einsum("...cdbf,...bf->...cd", law.visc_flux_jac_q(w, q), dq)
    assert np.abs(fd_v - an_v).max() < 1e-6 * max(1.0, np.abs(an_v).max())

    assert np.abs(law.visc_flux_jac_w(w, q)).max() == 0.0


def test_stabilization_strictly_positive():
    law = AdvectionDiffusionLaw(0.01)
    rng = np.random.default_rng(2)
    ang = rng.uniform(0, 2 * np.pi, 50)
    normals = np.column_stack([np.cos(ang), np.sin(ang)])
    h = rng.uniform(0.01, 1.0, 50)
    alpha_c, alpha_v = law.stabilization(normals, h, 3)
    assert np.all(alpha_c > 0)
    assert np.all(alpha_v > 0)


def test_boundary_state_is_homogeneous_dirichlet():
    law = AdvectionDiffusionLaw(0.1)
    w = np.ones((3, 4, 1))
    x = np.zeros((3, 4, 2))
    assert np.abs(law.boundary_state(w, x, 0)).max() == 0.0
    assert np.abs(law.boundary_state_jac(w, x, 0)).max() == 0.0


def test_functional_linearization_matches_finite_differences():
    mesh = unit_square_mesh(2)
    law = AdvectionDiffusionLaw(0.2)
    for adjoint_consistent in (True, False):
        functional = BoundaryFluxFunctional(
            adjoint_consistent=adjoint_consistent)
        space = DiscreteSpace(mesh, 2)
        state = zero_state(space)
        rng = np.random.default_rng(17)
        state.Q[:] = 0.4 * rng.standard_normal(state.Q.size)
        state.W[:] = 0.4 * rng.standard_normal(state.W.size)
        dq = rng.standard_normal(state.Q.size)
        dw = rng.standard_normal(state.W.size)
        dj_dq, dj_dw = functional.linearize(state, mesh, space, law)
        h = 1e-7
        plus, minus = state.copy(), state.copy()
        plus.Q += h * dq
        plus.W += h * dw
        minus.Q -= h * dq
        minus.W -= h * dw
        fd = (functional.evaluate(plus, mesh, space, law)
              - functional.evaluate(minus, mesh, space, law)) / (2 * h)
        analytic = dj_dq @ dq + dj_dw @ dw
        assert abs(fd - analytic) < 1e-7 * max(1.0, abs(analytic))
