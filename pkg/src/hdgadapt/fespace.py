"""Reference bases, quadrature and degree-of-freedom layout.

The element basis is the modal Dubiner basis, orthonormal with respect
to the reference triangle {(0,0),(1,0),(0,1)} and ordered by total
degree so that bases of increasing degree nest.  The edge basis is the
shifted Legendre basis, orthonormal on [0,1].  On a physical element K
the basis is rescaled by 1/sqrt(2|K|) (and by 1/sqrt(|e|) on edges), so
all physical mass matrices are identities; the per-element scale factors
live in DiscreteSpace.

Interior quadrature is a collapsed (Duffy-type) Gauss-Legendre x
Gauss-Jacobi product rule, exact for any requested total degree with
strictly positive weights and strictly interior points.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import eval_jacobi, roots_jacobi

from . import mesh as meshmod

__all__ = [
    "ReferenceBasis",
    "QuadratureRule",
    "DofMap",
    "DiscreteSpace",
    "reference_basis",
    "quadrature",
    "build_dofmap",
]

MAX_DEGREE = 7  # primal degrees 1..6 plus one enrichment level


def _dubiner_index(p):
    """(i, j) mode pairs ordered by total degree (nesting order)."""
    return [(i, d - i) for d in range(p + 1) for i in range(d + 1)]


def _eval_dubiner(p, pts):
    """Values and gradients of the orthonormal Dubiner basis.

    Collapsed coordinates a = 2x/(1-y) - 1, b = 2y - 1; the mode (i, j)
    is c_ij * P_i(a) * (1-y)^i * P_j^(2i+1,0)(b) with
    c_ij = sqrt(2 (2i+1) (i+j+1)).  Points with y == 1 are not supported
    (all evaluation points used here are interior or Gauss points).
    """
    pts = np.asarray(pts, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    omy = 1.0 - y
    a = 2.0 * x / omy - 1.0
    b = 2.0 * y - 1.0
    modes = _dubiner_index(p)
    n = len(modes)
    vals = np.empty((len(pts), n))
    grads = np.empty((len(pts), n, 2))
    for k, (i, j) in enumerate(modes):
        c = np.sqrt(2.0 * (2 * i + 1) * (i + j + 1))
        pa = eval_jacobi(i, 0, 0, a)
        pb = eval_jacobi(j, 2 * i + 1, 0, b)
        dpa = 0.0 if i == 0 else 0.5 * (i + 1) * eval_jacobi(i - 1, 1, 1, a)
        dpb = (0.0 if j == 0 else
               0.5 * (j + 2 * i + 2) * eval_jacobi(j - 1, 2 * i + 2, 1, b))
        gi = omy ** i
        gim1 = omy ** (i - 1) if i >= 1 else np.zeros_like(omy)
        vals[:, k] = c * pa * gi * pb
        grads[:, k, 0] = 2.0 * c * dpa * gim1 * pb
        grads[:, k, 1] = c * (dpa * (1.0 + a) * gim1 * pb
                              - i * gim1 * pa * pb
                              + 2.0 * gi * pa * dpb)
    return vals, grads


def _eval_edge_basis(p, t):
    """Shifted Legendre basis values, orthonormal on [0,1]; shape (nt, p+1)."""
    t = np.asarray(t, dtype=float)
    x = 2.0 * t - 1.0
    return np.column_stack([np.sqrt(2 * k + 1.0) * eval_jacobi(k, 0, 0, x)
                            for k in range(p + 1)])


@dataclass(frozen=True)
class ReferenceBasis:
    """Modal element and edge bases of one polynomial degree."""

    p: int
    n_p: int
    n_q: int

    def eval_element(self, pts):
        return _eval_dubiner(self.p, pts)[0]

    def eval_element_grad(self, pts):
        return _eval_dubiner(self.p, pts)[1]

    def eval_edge(self, t):
        return _eval_edge_basis(self.p, t)


def reference_basis(p):
    """Orthonormal reference bases for degree ``p`` (1 <= p <= 7)."""
    if not 1 <= p <= MAX_DEGREE:
        raise ValueError("polynomial degree %r outside supported range 1..%d"
                         % (p, MAX_DEGREE))
    return ReferenceBasis(p, (p + 1) * (p + 2) // 2, p + 1)


@dataclass(frozen=True)
class QuadratureRule:
    """Interior rule on the reference triangle and edge rule on [0,1]."""

    order: int
    points: np.ndarray      # (n_g, 2)
    weights: np.ndarray     # (n_g,), sum 1/2
    edge_points: np.ndarray  # (n_r,)
    edge_weights: np.ndarray  # (n_r,), sum 1


def quadrature(order):
    """Quadrature exact for total degree <= ``order`` (interior and edge)."""
    if order < 1:
        raise ValueError("quadrature order must be >= 1")
    n = (order + 2) // 2  # Gauss: n points exact through degree 2n-1
    gu, wu = np.polynomial.legendre.leggauss(n)
    u = 0.5 * (gu + 1.0)
    wu = 0.5 * wu
    gv, wv = roots_jacobi(n, 1.0, 0.0)
    v = 0.5 * (gv + 1.0)
    wv = 0.25 * wv  # absorbs the (1-v) Duffy factor
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts = np.column_stack([(uu * (1.0 - vv)).ravel(), vv.ravel()])
    wts = np.outer(wu, wv).ravel()
    return QuadratureRule(order, pts, wts, u.copy(), wu.copy())


@dataclass(frozen=True)
class DofMap:
    """Global layout of the (Q, W, Lambda) coefficient vectors.

    Orderings: W is (element, component, mode); Q is (element, component,
    direction, mode); Lambda is (interior edge, component, mode).
    """

    n_elements: int
    n_interior_edges: int
    m: int
    p: int
    n_p: int
    n_q: int

    @property
    def d(self):
        return 2

    @property
    def n_w(self):
        return self.n_elements * self.m * self.n_p

    @property
    def n_qdof(self):
        return 2 * self.n_w

    @property
    def n_lam(self):
        return self.n_interior_edges * self.m * self.n_q

    @property
    def n_total(self):
        return self.n_qdof + self.n_w + self.n_lam

    def w_slice(self, elem):
        k = self.m * self.n_p
        return slice(elem * k, (elem + 1) * k)

    def q_slice(self, elem):
        k = self.m * 2 * self.n_p
        return slice(elem * k, (elem + 1) * k)

    def lam_slice(self, edge):
        k = self.m * self.n_q
        return slice(edge * k, (edge + 1) * k)


def build_dofmap(mesh, p, m=1):
    basis = reference_basis(p)
    return DofMap(mesh.n_elements, mesh.n_interior_edges, m, p,
                  basis.n_p, basis.n_q)


# Reference coordinates of local edge j at edge parameter tau:
#   j=0: (tau, 0),  j=1: (1-tau, tau),  j=2: (0, 1-tau)
def _edge_ref_coords(j, tau):
    if j == 0:
        return np.column_stack([tau, np.zeros_like(tau)])
    if j == 1:
        return np.column_stack([1.0 - tau, tau])
    return np.column_stack([np.zeros_like(tau), 1.0 - tau])


class DiscreteSpace:
    """Bases, quadrature, dof layout and geometry tabulations for one mesh.

    All arrays are precomputed for vectorized assembly:

    - ``phi`` (n_g, n_p), ``dphi`` (n_g, n_p, 2): reference basis at
      interior quadrature points
    - ``trace`` (3, 2, n_r, n_p): reference basis on local edge j for
      both edge orientations, sampled at the canonical edge parameters
    - ``psi`` (n_r, n_q): reference edge basis at those parameters
    - per-element geometry stacks (determinant, inverse-transpose
      Jacobian, scale factors, quadrature points in physical space)
    - per element-edge data (global edge id, orientation, boundary flag
      and tag, outward normal, length, physical quadrature points)
    """

    def __init__(self, mesh, p, m=1, quad_order=None):
        self.mesh = mesh
        self.p = p
        self.m = m
        self.basis = reference_basis(p)
        if quad_order is None:
            quad_order = 2 * p + 2
        self.quad = quadrature(quad_order)
        self.dofmap = build_dofmap(mesh, p, m)

        qpts = self.quad.points
        self.phi = self.basis.eval_element(qpts)
        self.dphi = self.basis.eval_element_grad(qpts)

        t = self.quad.edge_points
        n_r = len(t)
        n_p = self.basis.n_p
        self.trace = np.empty((3, 2, n_r, n_p))
        for j in range(3):
            for orient, tau in enumerate((t, 1.0 - t)):
                self.trace[j, orient] = self.basis.eval_element(
                    _edge_ref_coords(j, tau))
        self.psi = self.basis.eval_edge(t)

        ne = mesh.n_elements
        verts = mesh.vertices[mesh.elements]              # (ne, 3, 2)
        jac = np.stack([verts[:, 1] - verts[:, 0],
                        verts[:, 2] - verts[:, 0]], axis=-1)  # (ne, 2, 2)
        self.det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        self.area = 0.5 * self.det
        inv = np.empty_like(jac)
        inv[:, 0, 0] = jac[:, 1, 1]
        inv[:, 0, 1] = -jac[:, 0, 1]
        inv[:, 1, 0] = -jac[:, 1, 0]
        inv[:, 1, 1] = jac[:, 0, 0]
        inv /= self.det[:, None, None]
        self.inv_jac = inv
        self.scale = 1.0 / np.sqrt(self.det)              # basis normalization
        self.qp_phys = verts[:, None, 0, :] + np.einsum(
            "gk,eik->egi", qpts, jac)

        e2e = mesh.element_to_edges
        self.edge_id = np.abs(e2e) - 1                    # (ne, 3) combined ids
        self.edge_orient = (e2e < 0).astype(np.int64)
        nf = mesh.n_interior_edges
        self.edge_is_bdry = self.edge_id >= nf

        self.edge_normal = np.empty((ne, 3, 2))
        self.edge_len = np.empty((ne, 3))
        self.edge_tag = np.full((ne, 3), -1, dtype=np.int64)
        for e in range(ne):
            for j in range(3):
                edge = mesh.edge(int(self.edge_id[e, j]))
                sign = 1.0 if self.edge_orient[e, j] == 0 else -1.0
                self.edge_normal[e, j] = sign * edge.normal
                self.edge_len[e, j] = edge.length
                if edge.is_boundary:
                    self.edge_tag[e, j] = edge.tag
        # interior-edge lengths indexed by interior edge id
        self.int_edge_len = np.array([e.length for e in mesh.interior_edges]) \
            if nf else np.empty(0)

        # physical coordinates of the canonical edge parameters, per
        # element edge (identical from both sides of an interior edge)
        a = np.empty((ne, 3, 2))
        b = np.empty((ne, 3, 2))
        for e in range(ne):
            for j in range(3):
                va, vb = mesh.edge(int(self.edge_id[e, j])).vertices
                a[e, j] = mesh.vertices[va]
                b[e, j] = mesh.vertices[vb]
        self.edge_qp_phys = a[:, :, None, :] + t[None, None, :, None] \
            * (b - a)[:, :, None, :]

        # interior edges of each element, in local-edge order, for the
        # condensation maps
        self.elem_int_edges = [
            [(j, int(self.edge_id[e, j])) for j in range(3)
             if not self.edge_is_bdry[e, j]]
            for e in range(ne)
        ]

    @property
    def n_g(self):
        return len(self.quad.weights)

    @property
    def n_r(self):
        return len(self.quad.edge_points)
