"""Stabilized Crank-Nicolson Navier-Stokes assembly on one mesh level.

The nonlinear operator of one implicit step reads, for the unknown
x = (p, v) and test functions (xi, phi):

  momentum:   (1/k)(v,phi) + 1/2 (v.grad v, phi) + nu/2 (grad v, grad phi)
              - (p, div phi)
              + sum_T delta_T (v.grad v - pi v.grad pi v,
                               v.grad phi - pi v.grad pi phi)_T
  continuity: (div v, xi) + sum_T alpha_T (grad(p - pi p), grad(xi - pi xi))_T

and the right-hand side carried over from the previous step is

  b = (1/k)(v,phi) + 1/2 (f_new + f_old, phi) - 1/2 (v.grad v, phi)
      - nu/2 (grad v, grad phi)

evaluated at the previous (possibly network-corrected) velocity.  pi is the
nodal Q2->Q1 interpolation; alpha_T, delta_T are the local projection
stabilization weights.  All integrals use a 4-point tensor Gauss rule, which
integrates every Galerkin term of Q2 fields exactly on affine cells (the
convective term has directional degree 6); this keeps the coarse assembly and
the restricted fine assembly of nested states identical to machine precision.

The per-level geometry factors are precomputed once; the hot evaluations are
phrased as batched matrix products over the cells.
"""

import numpy as np
import scipy.sparse as sp
from dataclasses import dataclass, field
from functools import partial

from .elements import shape_q2, grad_q2, gauss_rule, q1_embedding_matrix, N_LOC

_es = partial(np.einsum, optimize=True)


@dataclass
class StabParams:
    """Local projection stabilization weights.

    alpha_T and delta_T share the denominator (nu/h^2 + |v|_inf/h + 1/k);
    both arrays are per-cell and stay frozen during a Newton solve.
    """
    alpha0: float = 0.02
    delta0: float = 0.1
    alpha_T: np.ndarray = field(default=None)
    delta_T: np.ndarray = field(default=None)

    @property
    def has_delta(self):
        return self.delta_T is not None and np.any(self.delta_T != 0.0)


def stab_params(h_T, vmax, nu, k, alpha0=0.02, delta0=0.1):
    """Evaluate the stabilization weights for given cell data (vectorized)."""
    h_T = np.asarray(h_T, dtype=float)
    denom = nu / h_T ** 2 + np.asarray(vmax, dtype=float) / h_T + 1.0 / k
    return alpha0 / denom, delta0 / denom


class Assembler:
    """Cached per-level assembly context (geometry factors, sparsity)."""

    def __init__(self, space, n_gauss=4):
        self.space = space
        dim = space.dim
        ncomp = space.n_comp
        self.dim, self.ncomp = dim, ncomp
        self.nloc = N_LOC(dim)
        self.ndl = ncomp * self.nloc
        pts, wq = gauss_rule(dim, n_gauss)
        self.qpoints = pts
        self.nq = pts.shape[0]
        self.N = shape_q2(pts, dim)                       # (nq, nloc)
        dN = grad_q2(pts, dim)                            # (nq, nloc, d)
        X = space.nodes[space.cell_nodes]                 # (nc, nloc, d)
        J = np.einsum('qaj,cai->cqij', dN, X, optimize=True)
        detJ = np.linalg.det(J)
        if np.any(detJ <= 0):
            raise ValueError("non-positive Jacobian in isoparametric map")
        Jinv = np.linalg.inv(J)
        self.G = np.ascontiguousarray(
            np.einsum('qaj,cqji->cqai', dN, Jinv, optimize=True))
        self.w = wq[None, :] * detJ                       # (nc, nq)
        self.xq = np.einsum('qa,cai->cqi', self.N, X, optimize=True)
        self.PI = q1_embedding_matrix(dim)
        self.Npi = self.N @ self.PI                       # pi of the test basis
        self.Gpi = np.ascontiguousarray(
            np.einsum('cqbj,ba->cqaj', self.G, self.PI, optimize=True))
        self.n_cells = X.shape[0]
        nc, nq = self.n_cells, self.nq
        # transposed gradient caches for batched matmuls: (nc, nloc, nq*d)
        self.Gt = np.ascontiguousarray(self.G.transpose(0, 2, 1, 3)
                                       ).reshape(nc, self.nloc, nq * dim)
        self.Gpit = np.ascontiguousarray(self.Gpi.transpose(0, 2, 1, 3)
                                         ).reshape(nc, self.nloc, nq * dim)
        self.dGt = np.ascontiguousarray(self.Gt - self.Gpit)
        # cell diameters (max vertex distance)
        lvl = space.hierarchy.levels[space.level]
        C = lvl.vertices[lvl.cells]
        self.h_T = np.sqrt(((C[:, :, None, :] - C[:, None, :, :]) ** 2)
                           .sum(-1).max(axis=(1, 2)))
        # dof scatter tables
        cn = space.cell_nodes
        self.cell_dofs = (ncomp * cn[:, :, None]
                          + np.arange(ncomp)[None, None, :]).reshape(self.n_cells, -1)
        self._init_sparsity()

    def _init_sparsity(self):
        nd = self.ndl
        ndof = self.space.ndof
        rows = np.repeat(self.cell_dofs, nd, axis=1).reshape(-1)
        cols = np.tile(self.cell_dofs, (1, nd)).reshape(-1)
        pattern = sp.coo_matrix((np.ones(rows.size), (rows, cols)),
                                shape=(ndof, ndof)).tocsr()
        pattern.sort_indices()
        self.indptr = pattern.indptr
        self.indices = pattern.indices
        self.nnz = pattern.nnz
        keys = (np.repeat(np.arange(ndof), np.diff(self.indptr)).astype(np.int64)
                * ndof + self.indices)
        self.flat_pos = np.searchsorted(keys, rows.astype(np.int64) * ndof + cols)
        self.pattern_rows = np.repeat(np.arange(ndof), np.diff(self.indptr))
        self.diag_pos = np.searchsorted(keys, np.arange(ndof, dtype=np.int64)
                                        * (ndof + 1))

    # -- field evaluation -------------------------------------------------------

    def gather(self, values):
        """(pressure (nc, nloc), velocity (nc, nloc, d)) cell-local values."""
        m = values.reshape(self.space.n_nodes, self.ncomp)
        loc = m[self.space.cell_nodes]
        return np.ascontiguousarray(loc[:, :, 0]), np.ascontiguousarray(loc[:, :, 1:])

    def _values_at_q(self, loc):
        """(nc, nloc, m) nodal values -> (nc, nq, m) at the quadrature points."""
        out = np.tensordot(loc, self.N, axes=([1], [1]))   # (nc, m, nq)
        return out.transpose(0, 2, 1)

    def _grads_at_q(self, loc, table=None):
        """(nc, nloc, m) -> (nc, nq, m, d) physical gradients."""
        Gt = self.Gt if table is None else table
        C = np.matmul(loc.transpose(0, 2, 1), Gt)          # (nc, m, nq*d)
        m = loc.shape[2]
        return C.reshape(self.n_cells, m, self.nq, self.dim).transpose(0, 2, 1, 3)

    def fields(self, values, with_pi=False):
        """Values/gradients of a state at the quadrature points.

        with_pi adds the projected velocity and its gradient (the convective
        LPS fluctuation); the projected pressure gradient is always included.
        """
        ph, vh = self.gather(values)
        out = {
            "v": self._values_at_q(vh),
            "gv": self._grads_at_q(vh),
            "p": self._values_at_q(ph[:, :, None])[:, :, 0],
            "gp": self._grads_at_q(ph[:, :, None])[:, :, 0, :],
            "gpp": self._grads_at_q(ph[:, :, None], self.Gpit)[:, :, 0, :],
        }
        if with_pi:
            pvh = np.ascontiguousarray(
                np.tensordot(vh, self.PI, axes=([1], [1])).transpose(0, 2, 1))
            out["pv"] = self._values_at_q(pvh)
            out["gpv"] = self._grads_at_q(pvh)
        return out

    def vmax_per_cell(self, values):
        """Max nodal velocity magnitude over each cell."""
        _, vh = self.gather(values)
        return np.sqrt((vh ** 2).sum(-1)).max(axis=1)

    def stab(self, prev_values, nu, k, alpha0=0.02, delta0=0.1):
        """Stabilization weights frozen at a given (previous) velocity."""
        vmax = self.vmax_per_cell(prev_values)
        aT, dT = stab_params(self.h_T, vmax, nu, k, alpha0, delta0)
        return StabParams(alpha0, delta0, aT, dT)

    def scatter_dual(self, r_p, r_v):
        """Accumulate (nc, nloc) pressure and (nc, nloc, d) velocity test rows."""
        loc = np.concatenate([r_p[:, :, None], r_v], axis=2).reshape(-1)
        return np.bincount(self.cell_dofs.reshape(-1), weights=loc,
                           minlength=self.space.ndof)

    def nodal_values(self, fn, t):
        """Nodal interpolation of a velocity-valued callable fn(t, points)."""
        if fn is None:
            return None
        return np.asarray(fn(t, self.space.nodes), dtype=float)

    # -- contraction helpers -------------------------------------------------------

    def _test_rows(self, acc):
        """sum_q w * acc[c,q,i] * N[q,a] -> (nc, nloc, i)."""
        Y = self.w[:, :, None] * acc
        return np.tensordot(Y, self.N, axes=([1], [0])).transpose(0, 2, 1)

    def _test_grad_rows(self, flux):
        """sum_{q,j} w * flux[c,q,i,j] * G[c,q,a,j] -> (nc, nloc, i)."""
        Y = (self.w[:, :, None, None] * flux).transpose(0, 1, 3, 2)
        Y = Y.reshape(self.n_cells, self.nq * self.dim, -1)
        return np.matmul(self.Gt, Y)

    def _vdotg(self, v, table=None):
        """sum_j v[c,q,j] * G[c,q,a,j] -> (nc, nq, nloc)."""
        G = self.G if table is None else table
        return np.matmul(G, v[:, :, :, None])[:, :, :, 0]

    # -- operators ---------------------------------------------------------------

    def apply_operator(self, x_values, k, nu, stab, convection=True):
        """A_h(x) as a dual vector (no boundary condensation)."""
        use_d = stab.has_delta and convection
        f = self.fields(x_values, with_pi=use_d)
        v, gv, p, gp = f["v"], f["gv"], f["p"], f["gp"]
        conv = _es('cqj,cqij->cqi', v, gv) if convection else 0.0
        divv = np.einsum('cqii->cq', gv)
        # momentum rows
        mom = self._test_rows(v / k + 0.5 * conv)
        mom += 0.5 * nu * self._test_grad_rows(gv)
        mom -= self._pressure_rows(p)
        # continuity rows
        cont = np.tensordot(self.w * divv, self.N, axes=([1], [0]))
        gfl = gp - f["gpp"]
        Y = (stab.alpha_T[:, None, None] * self.w[:, :, None] * gfl)
        cont += np.matmul(self.dGt, Y.reshape(self.n_cells, -1, 1))[:, :, 0]
        if use_d:
            pv, gpv = f["pv"], f["gpv"]
            g = conv - _es('cqj,cqij->cqi', pv, gpv)
            S = self._vdotg(v) - self._vdotg(pv, self.Gpi)
            wg = (stab.delta_T[:, None, None] * self.w[:, :, None]) * g
            mom += _es('cqi,cqa->cai', wg, S)
        return self.scatter_dual(cont, mom)

    def _pressure_rows(self, p):
        """-(p, div phi) test rows: -sum_q w p G[c,q,a,i] -> (nc, nloc, d)."""
        X = (self.w * p)[:, None, :]
        out = np.matmul(X, self.G.reshape(self.n_cells, self.nq, -1))
        return out.reshape(self.n_cells, self.nloc, self.dim)

    def assemble_rhs_next(self, x_values, f_old, f_new, k, nu, convection=True):
        """Right-hand side of the coming step from the (corrected) state.

        f_old/f_new are nodal velocity-valued arrays (n_nodes, d) or None.
        """
        ph, vh = self.gather(x_values)
        v = self._values_at_q(vh)
        gv = self._grads_at_q(vh)
        conv = _es('cqj,cqij->cqi', v, gv) if convection else 0.0
        acc = v / k - 0.5 * conv
        for fa in (f_old, f_new):
            if fa is not None:
                floc = np.ascontiguousarray(fa[self.space.cell_nodes])
                acc = acc + 0.5 * self._values_at_q(floc)
        mom = self._test_rows(acc)
        mom -= 0.5 * nu * self._test_grad_rows(gv)
        cont = np.zeros((self.n_cells, self.nloc))
        return self.scatter_dual(cont, mom)

    def assemble_residual(self, x_values, b_prev, k, nu, stab, mask=None,
                          convection=True):
        """r = F - A_h(x); rows of constrained dofs are zeroed."""
        r = b_prev - self.apply_operator(x_values, k, nu, stab, convection)
        if mask is not None:
            r[mask] = 0.0
        return r

    def assemble_jacobian(self, x_values, k, nu, stab, mask=None,
                          convection=True):
        """Gateaux derivative of A_h at x with frozen alpha_T/delta_T (CSR).

        Constrained rows/columns are condensed to the identity.
        """
        nc, nq, nloc, d = self.n_cells, self.nq, self.nloc, self.dim
        use_d = stab.has_delta and convection
        f = self.fields(x_values, with_pi=use_d)
        v, gv = f["v"], f["gv"]
        w, N, G = self.w, self.N, self.G
        wN = w[:, :, None] * N[None, :, :]                 # (nc, nq, nloc)
        # velocity-velocity block (nc, a, i, b, m)
        mass = _es('cqa,qb->cab', wN, N) / k
        GtT = np.ascontiguousarray(self.Gt.transpose(0, 2, 1))
        diff_iso = 0.5 * nu * np.matmul(
            self.Gt * self.w.repeat(d, axis=1)[:, None, :], GtT)
        vv_iso = mass + diff_iso                           # times delta_im
        if convection:
            vGb = self._vdotg(v)
            vv_iso += 0.5 * _es('cqa,cqb->cab', wN, vGb)
            vv = _es('cqa,qb,cqim->caibm', wN, N, 0.5 * gv)
        else:
            vv = np.zeros((nc, nloc, d, nloc, d))
        if use_d:
            pv, gpv = f["pv"], f["gpv"]
            conv = _es('cqj,cqij->cqi', v, gv)
            g = conv - _es('cqj,cqij->cqi', pv, gpv)
            pvGpib = self._vdotg(pv, self.Gpi)
            S = vGb - pvGpib
            wd = stab.delta_T[:, None] * w
            # dS/dv contribution: g_i (N_b G_am - Npi_b Gpi_am)
            vv += _es('cq,cqi,qb,cqam->caibm', wd, g, N, G)
            vv -= _es('cq,cqi,qb,cqam->caibm', wd, g, self.Npi, self.Gpi)
            # dg/dv isotropic part: (v.G_b - piv.Gpi_b) delta_im, times S_a
            vv_iso += _es('cq,cqb,cqa->cab', wd, S, S)
            # dg/dv anisotropic part: (N_b gv_im - Npi_b gpv_im) S_a
            vv += _es('cq,qb,cqim,cqa->caibm', wd, N, gv, S)
            vv -= _es('cq,qb,cqim,cqa->caibm', wd, self.Npi, gpv, S)
        eye = np.eye(d)
        vv += vv_iso[:, :, None, :, None] * eye[None, None, :, None, :]
        # velocity-pressure and pressure-velocity blocks
        vp = -_es('cqb,cqai->caib', wN, G)                 # (nc,a,i,b)
        pv_blk = _es('cqa,cqbm->cabm', wN, G)              # (nc,a,b,m)
        # pressure-pressure stabilization
        wa = (stab.alpha_T[:, None] * self.w).repeat(d, axis=1)
        pp = np.matmul(self.dGt * wa[:, None, :],
                       np.ascontiguousarray(self.dGt.transpose(0, 2, 1)))
        # pack into local (nc, ndl, ndl), node-major component-minor
        L = np.zeros((nc, nloc, self.ncomp, nloc, self.ncomp))
        L[:, :, 0, :, 0] = pp
        L[:, :, 0, :, 1:] = pv_blk
        L[:, :, 1:, :, 0] = vp
        L[:, :, 1:, :, 1:] = vv
        L = L.reshape(nc, self.ndl, self.ndl)
        data = np.bincount(self.flat_pos, weights=L.reshape(-1), minlength=self.nnz)
        if mask is not None:
            kill = mask[self.pattern_rows] | mask[self.indices]
            data[kill] = 0.0
            data[self.diag_pos[mask]] = 1.0
        return sp.csr_matrix((data, self.indices.copy(), self.indptr),
                             shape=(self.space.ndof, self.space.ndof))

    # -- helpers used by tests and postprocessing ---------------------------------

    def l2_error_velocity(self, x_values, exact_fn, t):
        """L2 norm of v_h - v_exact via the assembly quadrature."""
        ph, vh = self.gather(x_values)
        vq = self._values_at_q(vh)
        ve = exact_fn(t, self.xq.reshape(-1, self.dim)).reshape(vq.shape)
        diff = ((vq - ve) ** 2).sum(-1)
        return np.sqrt(np.einsum('cq,cq->', self.w, diff))

    def scalar_volume_weights(self):
        """Integrals of the scalar basis functions (for mean-zero pressure)."""
        return np.bincount(self.space.cell_nodes.reshape(-1),
                           weights=np.einsum('cq,qa->ca', self.w, self.N,
                                             optimize=True).reshape(-1),
                           minlength=self.space.n_nodes)
