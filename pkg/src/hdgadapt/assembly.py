"""HDG residual assembly, linearization and static condensation.

The discrete system couples element unknowns (q_h, w_h) with skeleton
traces lambda_h.  Per element the linearized equations form the block
system

    [A B] [dQ]   [R]          [F]
    [C D] [dW] + [S] dLam  =  [G]        (local solvers)

and per interior edge the flux-continuity rows

    [L M] [dQ; dW] + N dLam = H.

``condense`` eliminates the element blocks through the cached inverses
of [A B; C D] and produces the sparse skeleton system

    (N - [L M] [A B; C D]^{-1} [R; S]) dLam = H - [L M] [A B; C D]^{-1} [F; G],

whose block rows touch at most five edges (the edge itself plus the
remaining edges of its two neighbours).  ``back_substitute`` recovers
(dQ, dW) element by element.

Numerical fluxes on an edge with trace value lam and interior traces
(w, q):

    fhat = (f_c(lam) - f_v(lam, q)) . n - (alpha_c + alpha_v)(lam - w).

On boundary edges lam is replaced by the boundary state w_dOmega(w)
(so the same penalty structure applies against the interior trace) and
the viscous flux is passed through the law's boundary flux operator.
In the Q-equation the trace term is -<tau.n, lam> with lam likewise
replaced by the boundary state on the boundary.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "LocalBlocks",
    "SkeletonSystem",
    "assemble_residual",
    "assemble_jacobian",
    "condense",
    "condense_adjoint",
    "back_substitute",
    "back_substitute_adjoint",
    "monolithic_system",
]


@dataclass
class LocalBlocks:
    """Per-element and per-edge blocks of the linearized HDG system.

    ``ad`` stacks [A B; C D] (Q rows/cols first), ``rs`` and ``lm`` hold
    one trace slot per local edge (zero for boundary edges), ``nd`` and
    ``h`` are the diagonal trace blocks and right-hand sides per
    interior edge.  ``fg`` is the local right-hand side [F; G]
    (minus the residual).  Inverses are cached by ``condense``.
    """

    space: object
    ad: np.ndarray       # (ne, n_loc, n_loc)
    rs: np.ndarray       # (ne, n_loc, 3, mq)
    lm: np.ndarray       # (ne, 3, mq, n_loc)
    fg: np.ndarray       # (ne, n_loc)
    nd: np.ndarray       # (nf, mq, mq)
    h: np.ndarray        # (nf, mq)
    ad_inv: np.ndarray = None
    x_cache: np.ndarray = None   # ad_inv @ rs, shape (ne, n_loc, 3, mq)
    y_cache: np.ndarray = None   # ad_inv @ fg, shape (ne, n_loc)

    @property
    def n_loc(self):
        return self.ad.shape[1]

    @property
    def mq(self):
        return self.nd.shape[1] if self.nd.size else self.rs.shape[3]


@dataclass
class SkeletonSystem:
    """Block-sparse condensed system in the trace unknowns."""

    n_blocks: int
    block_size: int
    blocks: dict                 # (row_edge, col_edge) -> dense block
    rhs: np.ndarray
    matrix: sp.csr_matrix = None

    def block_columns(self, row):
        return sorted(j for (i, j) in self.blocks if i == row)

    def to_csr(self):
        if self.matrix is None:
            bs = self.block_size
            n = self.n_blocks * bs
            rows, cols, vals = [], [], []
            base = np.arange(bs)
            for (i, j), blk in self.blocks.items():
                r = i * bs + base
                c = j * bs + base
                rows.append(np.repeat(r, bs))
                cols.append(np.tile(c, bs))
                vals.append(blk.ravel())
            self.matrix = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(n, n)).tocsr()
        return self.matrix


def _scaled_coefficients(state, space):
    dm = space.dofmap
    ne, m, n_p, n_q = dm.n_elements, dm.m, dm.n_p, dm.n_q
    ws = state.W.reshape(ne, m, n_p) * space.scale[:, None, None]
    qs = state.Q.reshape(ne, m, 2, n_p) * space.scale[:, None, None, None]
    nf = dm.n_interior_edges
    if nf:
        lam = state.L.reshape(nf, m, n_q) \
            / np.sqrt(space.int_edge_len)[:, None, None]
    else:
        lam = np.zeros((0, m, n_q))
    return ws, qs, lam


def _assemble(state, space, law, dt_field=None, with_jacobian=True):
    """Residual vectors and (optionally) Jacobian blocks in one sweep."""
    dm = space.dofmap
    ne, m, n_p, n_q = dm.n_elements, dm.m, dm.n_p, dm.n_q
    nf = dm.n_interior_edges
    mq = m * n_q
    nq2 = m * 2 * n_p
    n_loc = nq2 + m * n_p

    ws, qs, lam_coef = _scaled_coefficients(state, space)
    phi, dphi = space.phi, space.dphi
    wq_int = space.quad.weights[None, :] * space.det[:, None]     # (ne, n_g)
    dphi_phys = np.einsum("ekd,gik->egid", space.inv_jac, dphi) \
        * space.scale[:, None, None, None]

    w_val = np.einsum("ecn,gn->egc", ws, phi)
    q_val = np.einsum("ecdn,gn->egcd", qs, phi)
    fc = law.conv_flux(w_val)
    fv = law.visc_flux(w_val, q_val)
    src = law.source(space.qp_phys, w_val, q_val)

    r_w = -np.einsum("eg,egid,egcd->eci", wq_int, dphi_phys, fc - fv) \
        - np.einsum("eg,gi,e,egc->eci", wq_int, phi, space.scale, src)
    r_q = np.einsum("eg,gi,e,egcd->ecdi", wq_int, phi, space.scale, q_val) \
        + np.einsum("eg,egid,egc->ecdi", wq_int, dphi_phys, w_val)
    r_lam = np.zeros((nf, m, n_q))

    if with_jacobian:
        gram = (phi * space.quad.weights[:, None]).T @ phi      # identity
        a_blk = np.zeros((ne, m, 2, n_p, m, 2, n_p))
        b_blk = np.zeros((ne, m, 2, n_p, m, n_p))
        c_blk = np.zeros((ne, m, n_p, m, 2, n_p))
        d_blk = np.zeros((ne, m, n_p, m, n_p))
        for c in range(m):
            for d in range(2):
                a_blk[:, c, d, :, c, d, :] = gram

        b0 = np.einsum("eg,egid,gn,e->eidn", wq_int, dphi_phys, phi, space.scale)
        for c in range(m):
            b_blk[:, c, :, :, c, :] = np.transpose(b0, (0, 2, 1, 3))

        fcw = law.conv_flux_jac(w_val)
        fvw = law.visc_flux_jac_w(w_val, q_val)
        fvq = law.visc_flux_jac_q(w_val, q_val)
        sw = law.source_jac_w(space.qp_phys, w_val, q_val)
        sq = law.source_jac_q(space.qp_phys, w_val, q_val)
        phis = phi[None, :, :] * space.scale[:, None, None]      # (ne, n_g, n_p)
        d_blk += -np.einsum("eg,egid,egcdb,egn->ecibn",
                            wq_int, dphi_phys, fcw - fvw, phis) \
                 - np.einsum("eg,egi,egcb,egn->ecibn", wq_int, phis, sw, phis)
        c_blk += np.einsum("eg,egid,egcdbf,egn->ecibfn",
                           wq_int, dphi_phys, fvq, phis) \
                 - np.einsum("eg,egi,egcbf,egn->ecibfn", wq_int, phis, sq, phis)
        if dt_field is not None:
            inv_dt = np.asarray(1.0 / dt_field, dtype=float)
            if np.any(inv_dt > 0):
                for c in range(m):
                    d_blk[:, c, :, c, :] += inv_dt[:, None, None] * gram

        rs = np.zeros((ne, n_loc, 3, mq))
        lm = np.zeros((ne, 3, mq, n_loc))
        nd = np.zeros((nf, mq, mq))
    else:
        rs = lm = nd = None

    # edge terms, one local edge at a time, vectorized over elements
    u = space.quad.edge_weights
    psi = space.psi                                              # (n_r, n_q)
    for j in range(3):
        tr = space.trace[j, space.edge_orient[:, j]]             # (ne, n_r, n_p)
        trs = tr * space.scale[:, None, None]
        w_tr = np.einsum("ecn,ern->erc", ws, tr)
        q_tr = np.einsum("ecdn,ern->ercd", qs, tr)
        nrm = space.edge_normal[:, j]
        h_e = space.edge_len[:, j]
        xq = space.edge_qp_phys[:, j]
        alpha_c, alpha_v = law.stabilization(nrm, h_e, space.p)
        alpha = (alpha_c + alpha_v)[:, None, None]
        wq_e = u[None, :] * h_e[:, None]                         # (ne, n_r)

        is_b = space.edge_is_bdry[:, j]
        eid = space.edge_id[:, j]
        lam_hat = np.empty((ne, len(u), m))
        bjac = np.zeros((ne, len(u), m, m))
        psis = np.zeros((ne, len(u), n_q))                       # trace basis, scaled
        if (~is_b).any():
            ii = np.nonzero(~is_b)[0]
            lam_hat[ii] = np.einsum("ecn,rn->erc", lam_coef[eid[ii]], psi)
            psis[ii] = psi[None, :, :] / np.sqrt(h_e[ii])[:, None, None]
        if is_b.any():
            bb = np.nonzero(is_b)[0]
            tags = space.edge_tag[bb, j]
            for tag in np.unique(tags):
                sel = bb[tags == tag]
                lam_hat[sel] = law.boundary_state(w_tr[sel], xq[sel], int(tag))
                bjac[sel] = law.boundary_state_jac(w_tr[sel], xq[sel], int(tag))

        fc_l = law.conv_flux(lam_hat)
        fv_l = law.visc_flux(lam_hat, q_tr)
        if is_b.any():
            bb = np.nonzero(is_b)[0]
            tags = space.edge_tag[bb, j]
            for tag in np.unique(tags):
                sel = bb[tags == tag]
                fv_l[sel] = law.boundary_visc_flux(fv_l[sel], xq[sel], int(tag))
        fhat = np.einsum("ercd,ed->erc", fc_l - fv_l, nrm) \
            - alpha * (lam_hat - w_tr)

        r_w += np.einsum("er,eri,erc->eci", wq_e, trs, fhat)
        r_q += -np.einsum("er,eri,erc,ed->ecdi", wq_e, trs, lam_hat, nrm)
        if nf:
            ii = np.nonzero(~is_b)[0]
            if ii.size:
                add = np.einsum("er,erk,erc->eck", wq_e[ii], psis[ii], fhat[ii])
                np.add.at(r_lam, eid[ii], add)

        if not with_jacobian:
            continue

        fcw_l = law.conv_flux_jac(lam_hat)
        fvw_l = law.visc_flux_jac_w(lam_hat, q_tr)
        fvq_l = law.visc_flux_jac_q(lam_hat, q_tr)
        # d fhat / d lam, d w (interior trace), d q
        df_dlam = np.einsum("ercdb,ed->ercb", fcw_l - fvw_l, nrm) \
            - alpha[..., None] * _eye(m, (ne, len(u)))
        df_dw = alpha[..., None] * _eye(m, (ne, len(u))) \
            + np.einsum("ercb,erbk->erck", df_dlam, bjac)
        df_dq = -np.einsum("ercdbf,ed->ercbf", fvq_l, nrm)

        d_blk += np.einsum("er,eri,ercb,ern->ecibn", wq_e, trs, df_dw, trs)
        c_blk += np.einsum("er,eri,ercbf,ern->ecibfn", wq_e, trs, df_dq, trs)
        # trace term of the Q equation: -<tau.n, lam_hat>
        b_chain = -np.einsum("er,eri,ed,ercb,ern->ecdibn",
                             wq_e, trs, nrm, bjac, trs)
        b_blk += b_chain

        # trace slot j (interior edges only; boundary slots stay zero)
        r_base = np.einsum("er,eri,ed,erk->edik", wq_e, trs, nrm, psis)
        r_slot = np.zeros((ne, m, 2, n_p, m, n_q))
        for c in range(m):
            r_slot[:, c, :, :, c, :] = -r_base
        s_slot = np.einsum("er,eri,ercb,erk->ecibk", wq_e, trs, df_dlam, psis)
        rs_j = np.zeros((ne, n_loc, mq))
        rs_j[:, :nq2, :] = r_slot.reshape(ne, nq2, mq)
        rs_j[:, nq2:, :] = s_slot.reshape(ne, m * n_p, mq)
        rs[:, :, j, :] = rs_j
        rs[is_b, :, j, :] = 0.0

        l_slot = np.einsum("er,erk,ercbf,ern->eckbfn", wq_e, psis, df_dq, trs)
        m_slot = alpha[..., None] * _eye(m, (ne, len(u)))
        m_slot = np.einsum("er,erk,ercb,ern->eckbn", wq_e, psis, m_slot, trs)
        lm_j = np.zeros((ne, mq, n_loc))
        lm_j[:, :, :nq2] = l_slot.reshape(ne, mq, nq2)
        lm_j[:, :, nq2:] = m_slot.reshape(ne, mq, m * n_p)
        lm[:, j, :, :] = lm_j
        lm[is_b, j, :, :] = 0.0

        n_add = np.einsum("er,erk,ercb,ern->eckbn", wq_e, psis, df_dlam, psis)
        ii = np.nonzero(~is_b)[0]
        if ii.size:
            np.add.at(nd, eid[ii], n_add[ii].reshape(ii.size, mq, mq))

    residual = (r_q.reshape(-1), r_w.reshape(-1), r_lam.reshape(-1))
    if not with_jacobian:
        return residual, None

    ad = np.empty((ne, n_loc, n_loc))
    ad[:, :nq2, :nq2] = a_blk.reshape(ne, nq2, nq2)
    ad[:, :nq2, nq2:] = b_blk.reshape(ne, nq2, m * n_p)
    ad[:, nq2:, :nq2] = c_blk.reshape(ne, m * n_p, nq2)
    ad[:, nq2:, nq2:] = d_blk.reshape(ne, m * n_p, m * n_p)

    fg = np.empty((ne, n_loc))
    fg[:, :nq2] = -r_q.reshape(ne, nq2)
    fg[:, nq2:] = -r_w.reshape(ne, m * n_p)
    blocks = LocalBlocks(space, ad, rs, lm, fg, nd,
                         -r_lam.reshape(nf, mq) if nf else np.zeros((0, mq)))
    return residual, blocks


def _eye(m, lead):
    out = np.zeros(lead + (m, m))
    out[...] = np.eye(m)
    return out


def _inject(state, space, test_space):
    """Exact injection of a state into an enriched (nested) space."""
    from .solver import prolongate_degree
    return prolongate_degree(state, space, test_space)


def assemble_residual(state, mesh, space, law, test_space=None):
    """Residual vectors (R_Q, R_W, R_Lam) of the HDG form.

    With ``test_space`` of higher degree the state is first injected
    exactly (the modal bases nest) and the residual is evaluated against
    the enriched test space.
    """
    if test_space is not None and test_space.p != space.p:
        if test_space.p < space.p:
            raise ValueError("test space degree must be >= state degree")
        state = _inject(state, space, test_space)
        space = test_space
    if state.W.size != space.dofmap.n_w:
        raise ValueError("state does not match the discrete space")
    residual, _ = _assemble(state, space, law, with_jacobian=False)
    return residual


def assemble_jacobian(state, mesh, space, law, dt_field=None):
    """LocalBlocks of the damped Newton system at ``state``.

    ``dt_field`` holds the per-element pseudo-time step (None or inf
    entries drop the damping term); the blocks are the exact derivative
    of the residual plus (1/dt) times the W mass matrix in D.
    """
    if state.W.size != space.dofmap.n_w:
        raise ValueError("state does not match the discrete space")
    _, blocks = _assemble(state, space, law, dt_field=dt_field,
                          with_jacobian=True)
    return blocks


def condense(blocks):
    """Schur-complement elimination of the element unknowns.

    Factors each [A B; C D] block (cached for back-substitution and for
    the transposed adjoint solves) and assembles the block-sparse
    skeleton matrix and right-hand side.
    """
    space = blocks.space
    ne = blocks.ad.shape[0]
    mq = blocks.mq
    nf = space.dofmap.n_interior_edges

    try:
        blocks.ad_inv = np.linalg.inv(blocks.ad)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("singular local element matrix") from exc
    n_loc = blocks.n_loc
    blocks.x_cache = np.einsum(
        "eij,ejpb->eipb", blocks.ad_inv,
        blocks.rs.reshape(ne, n_loc, 3, mq))
    blocks.y_cache = np.einsum("eij,ej->ei", blocks.ad_inv, blocks.fg)

    contrib = np.einsum("ejal,elpb->ejapb", blocks.lm, blocks.x_cache)
    rhs_contrib = np.einsum("ejal,el->eja", blocks.lm, blocks.y_cache)

    skel_blocks = {}
    for e in range(nf):
        skel_blocks[(e, e)] = blocks.nd[e].copy()
    rhs = blocks.h.copy().reshape(nf, mq)

    for e in range(ne):
        int_edges = space.elem_int_edges[e]
        for (j, ej) in int_edges:
            rhs[ej] -= rhs_contrib[e, j]
            for (jp, ejp) in int_edges:
                key = (ej, ejp)
                blk = skel_blocks.get(key)
                if blk is None:
                    skel_blocks[key] = -contrib[e, j, :, jp, :].copy()
                else:
                    blk -= contrib[e, j, :, jp, :]

    return SkeletonSystem(nf, mq, skel_blocks, rhs.reshape(-1))


def condense_adjoint(blocks, rhs_fg):
    """Condensed transposed system for the discrete adjoint.

    Builds N^T - [R^T S^T] [A B; C D]^{-T} [L M]^T block by block (an
    independent evaluation, not a transpose of the primal skeleton
    matrix) and the right-hand side -[R^T S^T] [A B; C D]^{-T} rhs_fg.
    """
    space = blocks.space
    ne = blocks.ad.shape[0]
    mq = blocks.mq
    nf = space.dofmap.n_interior_edges
    n_loc = blocks.n_loc
    if blocks.ad_inv is None:
        blocks.ad_inv = np.linalg.inv(blocks.ad)

    rs_r = blocks.rs.reshape(ne, n_loc, 3, mq)
    contrib = np.einsum("elpb,ekl,ejak->epbja", rs_r, blocks.ad_inv, blocks.lm)
    adj_y = np.einsum("ekl,ek->el", blocks.ad_inv, rhs_fg)   # AD^{-T} rhs
    rhs_contrib = np.einsum("elpb,el->epb", rs_r, adj_y)

    skel_blocks = {}
    for e in range(nf):
        skel_blocks[(e, e)] = blocks.nd[e].T.copy()
    rhs = np.zeros((nf, mq))

    for e in range(ne):
        int_edges = space.elem_int_edges[e]
        for (jp, ejp) in int_edges:
            rhs[ejp] -= rhs_contrib[e, jp]
            for (j, ej) in int_edges:
                key = (ejp, ej)
                blk = skel_blocks.get(key)
                if blk is None:
                    skel_blocks[key] = -contrib[e, jp, :, j, :].copy()
                else:
                    blk -= contrib[e, jp, :, j, :]

    return SkeletonSystem(nf, mq, skel_blocks, rhs.reshape(-1))


def _gather_trace(blocks, dlam):
    """Per-element (3, mq) trace increments, zero on boundary slots."""
    space = blocks.space
    ne = blocks.ad.shape[0]
    mq = blocks.mq
    out = np.zeros((ne, 3, mq))
    lam = dlam.reshape(-1, mq)
    for e in range(ne):
        for (j, ej) in space.elem_int_edges[e]:
            out[e, j] = lam[ej]
    return out


def back_substitute(blocks, dlam):
    """Element-local recovery of (dQ, dW) from the trace solution."""
    if blocks.ad_inv is None:
        raise RuntimeError("condense must run before back_substitute")
    space = blocks.space
    dm = space.dofmap
    ne = blocks.ad.shape[0]
    loc = blocks.y_cache - np.einsum("eipb,epb->ei", blocks.x_cache,
                                     _gather_trace(blocks, dlam))
    nq2 = dm.m * 2 * dm.n_p
    return loc[:, :nq2].reshape(-1).copy(), loc[:, nq2:].reshape(-1).copy()


def back_substitute_adjoint(blocks, rhs_fg, lam_tilde):
    """Transposed local solves [A B; C D]^T [Qt; Wt] = rhs - [L M]^T Lam."""
    if blocks.ad_inv is None:
        blocks.ad_inv = np.linalg.inv(blocks.ad)
    space = blocks.space
    dm = space.dofmap
    lam_loc = _gather_trace(blocks, lam_tilde)
    rhs = rhs_fg - np.einsum("ejal,eja->el", blocks.lm, lam_loc)
    loc = np.einsum("ekl,ek->el", blocks.ad_inv, rhs)        # AD^{-T} rhs
    nq2 = dm.m * 2 * dm.n_p
    return loc[:, :nq2].reshape(-1).copy(), loc[:, nq2:].reshape(-1).copy()


def monolithic_system(blocks):
    """Dense uncondensed system [A B R; C D S; L M N] and rhs [F; G; H].

    Diagnostic helper for small meshes; rows are ordered as the global
    (Q, W, Lambda) vectors.
    """
    space = blocks.space
    dm = space.dofmap
    ne = blocks.ad.shape[0]
    mq = blocks.mq
    nq2 = dm.m * 2 * dm.n_p
    nw = dm.m * dm.n_p
    nQ, nW, nL = dm.n_qdof, dm.n_w, dm.n_lam
    n = nQ + nW + nL
    mat = np.zeros((n, n))
    rhs = np.zeros(n)
    for e in range(ne):
        qi = np.arange(e * nq2, (e + 1) * nq2)
        wi = nQ + np.arange(e * nw, (e + 1) * nw)
        loc = np.concatenate([qi, wi])
        mat[np.ix_(loc, loc)] += blocks.ad[e]
        rhs[loc] += blocks.fg[e]
        for (j, ej) in space.elem_int_edges[e]:
            li = nQ + nW + np.arange(ej * mq, (ej + 1) * mq)
            mat[np.ix_(loc, li)] += blocks.rs.reshape(ne, -1, 3, mq)[e, :, j, :]
            mat[np.ix_(li, loc)] += blocks.lm[e, j]
    for ej in range(dm.n_interior_edges):
        li = nQ + nW + np.arange(ej * mq, (ej + 1) * mq)
        mat[np.ix_(li, li)] += blocks.nd[ej]
        rhs[li] += blocks.h[ej]
    return mat, rhs
