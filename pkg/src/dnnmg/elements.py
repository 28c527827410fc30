"""Tensor-product reference elements on [0,1]^d.

Everything downstream (spaces, assembly, transfer operators) is expressed in
terms of the Q2 Lagrange element with nodes at {0, 1/2, 1} per direction and a
tensor Gauss quadrature rule.  Local node numbering is lexicographic with the
x-index running fastest, which matches the cell vertex ordering used by the
mesh module.
"""

import numpy as np

__all__ = [
    "q2_nodes_1d", "lattice", "shape_q2", "grad_q2", "gauss_rule",
    "q1_embedding_matrix", "N_LOC",
]

q2_nodes_1d = np.array([0.0, 0.5, 1.0])


def N_LOC(dim):
    """Number of local Q2 scalar nodes, 3^d."""
    return 3 ** dim


def lattice(dim, n=3):
    """Lexicographic lattice multi-indices, shape (n^d, d), x fastest."""
    f = np.arange(n ** dim)
    out = np.empty((n ** dim, dim), dtype=np.int64)
    for k in range(dim):
        out[:, k] = (f // n ** k) % n
    return out


def _phi1d(x):
    """Q2 basis on [0,1]: values at x for nodes 0, 1/2, 1. Shape (..., 3)."""
    x = np.asarray(x, dtype=float)
    return np.stack([2.0 * (x - 0.5) * (x - 1.0),
                     4.0 * x * (1.0 - x),
                     2.0 * x * (x - 0.5)], axis=-1)


def _dphi1d(x):
    x = np.asarray(x, dtype=float)
    return np.stack([4.0 * x - 3.0,
                     4.0 - 8.0 * x,
                     4.0 * x - 1.0], axis=-1)


def shape_q2(points, dim):
    """Q2 shape function values.

    points: (npts, dim) in [0,1]^d. Returns (npts, 3^dim).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals1d = [_phi1d(pts[:, k]) for k in range(dim)]
    idx = lattice(dim)
    out = np.ones((pts.shape[0], idx.shape[0]))
    for k in range(dim):
        out *= vals1d[k][:, idx[:, k]]
    return out


def grad_q2(points, dim):
    """Q2 reference gradients, shape (npts, 3^dim, dim)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals = [_phi1d(pts[:, k]) for k in range(dim)]
    ders = [_dphi1d(pts[:, k]) for k in range(dim)]
    idx = lattice(dim)
    out = np.empty((pts.shape[0], idx.shape[0], dim))
    for comp in range(dim):
        g = np.ones((pts.shape[0], idx.shape[0]))
        for k in range(dim):
            f = ders[k] if k == comp else vals[k]
            g *= f[:, idx[:, k]]
        out[:, :, comp] = g
    return out


def gauss_rule(dim, n=4):
    """Tensor Gauss-Legendre rule on [0,1]^d: (points (n^d, d), weights (n^d,)).

    n=4 integrates directional degree 7 exactly, enough for the convective
    term of Q2 fields on affine cells.
    """
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    idx = lattice(dim, n)
    pts = np.stack([x[idx[:, k]] for k in range(dim)], axis=1)
    wts = np.ones(idx.shape[0])
    for k in range(dim):
        wts *= w[idx[:, k]]
    return pts, wts


def q1_embedding_matrix(dim):
    """Local matrix of the Q2 -> Q1 nodal interpolation, shape (3^d, 3^d).

    Row b gives the coefficients of the interpolant at local node b as a
    combination of the cell's Q2 values: vertex rows are unit vectors, the
    remaining rows average the cell vertices multilinearly.  (pi u)_hat =
    PI @ u_hat.
    """
    idx = lattice(dim)
    nloc = idx.shape[0]
    verts = np.all((idx == 0) | (idx == 2), axis=1)
    vert_ids = np.nonzero(verts)[0]
    PI = np.zeros((nloc, nloc))
    for b in range(nloc):
        # multilinear weights of the 2^d vertices at the node's coordinates
        coord = idx[b] / 2.0
        for v in vert_ids:
            w = 1.0
            for k in range(dim):
                xk = idx[v, k] / 2.0
                w *= xk * coord[k] + (1.0 - xk) * (1.0 - coord[k])
            PI[b, v] = w
    return PI
