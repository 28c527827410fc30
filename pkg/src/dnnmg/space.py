"""Equal-order Q2/Q2 spaces, Dirichlet data, Q2->Q1 interpolation, transfers.

State vectors hold one pressure and d velocity components per scalar node,
node-major and component-minor: dof = (d+1)*node + comp with comp 0 the
pressure.  Because the Q2 nodes of level l are (by construction) the leading
scalar nodes of level l+1, injection of a fine vector to a coarser level is a
plain slice, and prolongation rows of shared nodes are identity rows.
"""

import numpy as np
import scipy.sparse as sp
from dataclasses import dataclass

from . import mesh as meshmod
from .elements import lattice, shape_q2, q1_embedding_matrix, N_LOC

__all__ = [
    "FeSpace", "StateVector", "interpolate_linear", "prolongate", "prolongation_matrix",
    "restrict_rhs", "apply_dirichlet", "ramp", "inflow_profile", "no_slip",
]

# lattice positions of the Q2 nodes of each local face (fixed coord at 0 or 2)
def _face_nodes(dim):
    lat = lattice(dim, 3)
    n_faces = 2 * dim
    out = []
    for f in range(n_faces):
        axis, side = f // 2, f % 2
        out.append(np.nonzero(lat[:, axis] == 2 * side)[0])
    return out


class FeSpace:
    """Q2 scalar nodes of one mesh level with d+1 components per node."""

    def __init__(self, hierarchy, level):
        self.hierarchy = hierarchy
        self.level = level
        self.dim = hierarchy.dim
        self.n_comp = self.dim + 1
        coords, table = hierarchy.scalar_nodes(level)
        self.nodes = coords
        self.cell_nodes = table
        self.n_nodes = coords.shape[0]
        self.ndof = self.n_comp * self.n_nodes
        self._tag_nodes()

    def _tag_nodes(self):
        """Per-node boundary tag; no-slip tags take precedence at corners."""
        lvl = self.hierarchy.levels[self.level]
        fnodes = _face_nodes(self.dim)
        tags = np.zeros(self.n_nodes, dtype=np.int64)
        order = [meshmod.OUTFLOW, meshmod.INFLOW, meshmod.WALL, meshmod.OBSTACLE]
        by_tag = {t: [] for t in order}
        for (c, f, t) in lvl.boundary_faces:
            by_tag[t].append(self.cell_nodes[c][fnodes[f]])
        for t in order:
            if by_tag[t]:
                tags[np.concatenate(by_tag[t])] = t
        self.node_tags = tags
        self.has_outflow = bool(np.any(tags == meshmod.OUTFLOW))

    def nodes_with_tag(self, tag):
        return np.nonzero(self.node_tags == tag)[0]

    def velocity_dofs(self, nodes):
        """Dof indices of all velocity components at the given nodes."""
        comps = np.arange(1, self.n_comp)
        return (self.n_comp * nodes[:, None] + comps[None, :]).reshape(-1)

    def dirichlet_mask(self, tags=(meshmod.INFLOW, meshmod.WALL, meshmod.OBSTACLE)):
        mask = np.zeros(self.ndof, dtype=bool)
        for t in tags:
            nodes = self.nodes_with_tag(t)
            if nodes.size:
                mask[self.velocity_dofs(nodes)] = True
        return mask

    def zero_state(self, time=0.0):
        return StateVector(self.level, np.zeros(self.ndof), time)

    def split(self, values):
        """(pressure (n,), velocity (n, d)) views of a dof vector."""
        m = values.reshape(self.n_nodes, self.n_comp)
        return m[:, 0], m[:, 1:]


@dataclass
class StateVector:
    level: int
    values: np.ndarray
    time: float = 0.0

    def copy(self):
        return StateVector(self.level, self.values.copy(), self.time)


# -- Q2 -> Q1 interpolation -----------------------------------------------------

def interpolate_linear(space, u):
    """Nodal interpolation of a scalar Q2 coefficient vector into Q1.

    Vertex values are kept, edge/face/center values are replaced by the
    multilinear interpolation of the cell vertices; the result is returned as
    Q2 coefficients of the same length (a projection: applying it twice
    changes nothing).
    """
    PI = q1_embedding_matrix(space.dim)
    out = np.empty_like(u)
    vals = u[space.cell_nodes] @ PI.T
    out[space.cell_nodes.reshape(-1)] = vals.reshape(-1)
    return out


# -- transfer operators ----------------------------------------------------------

def prolongation_matrix(hierarchy, level):
    """Scalar prolongation from `level` to `level+1` as a sparse CSR matrix.

    Exact embedding: fine node values are the coarse Q2 shape functions
    evaluated at the fine node's position inside its parent cell, so the
    prolongated coefficients represent the same function.
    """
    cache = hierarchy.__dict__.setdefault("_prolong_cache", {})
    if level in cache:
        return cache[level]
    dim = hierarchy.dim
    nloc = N_LOC(dim)
    nchild = 2 ** dim
    _, coarse_table = hierarchy.scalar_nodes(level)
    fine_coords, fine_table = hierarchy.scalar_nodes(level + 1)
    n_coarse = hierarchy.scalar_nodes(level)[0].shape[0]
    n_fine = fine_coords.shape[0]
    octs = lattice(dim, 2)
    lat3 = lattice(dim, 3)
    # coarse shape values at the reference position of each child-local node
    # inside the parent cell, per octant: (2^d, 3^d locals, 3^d coarse nodes)
    stencil = np.empty((nchild, nloc, nloc))
    for o in range(nchild):
        ref = (octs[o][None, :] + lat3 / 2.0) / 2.0
        stencil[o] = shape_q2(ref, dim)
    filled = np.zeros(n_fine, dtype=bool)
    rows, cols, vals = [], [], []
    for o in range(nchild):
        child_nodes = fine_table[o::nchild]              # (n_coarse_cells, 3^d)
        for a in range(nloc):
            fnode = child_nodes[:, a]
            # each fine node gets its weights from exactly one parent cell
            uniq, first_idx = np.unique(fnode, return_index=True)
            new = ~filled[uniq]
            keep = first_idx[new]
            if keep.size == 0:
                continue
            filled[uniq[new]] = True
            w = stencil[o, a]
            for b in np.nonzero(np.abs(w) > 1e-14)[0]:
                rows.append(fnode[keep])
                cols.append(coarse_table[keep, b])
                vals.append(np.full(keep.size, w[b]))
    P = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_fine, n_coarse))
    P.sum_duplicates()
    cache[level] = P
    return P


def full_prolongation(hierarchy, level, n_comp):
    """Prolongation acting on full (d+1)-component dof vectors."""
    cache = hierarchy.__dict__.setdefault("_full_prolong_cache", {})
    if level not in cache:
        P = prolongation_matrix(hierarchy, level)
        cache[level] = sp.kron(P, sp.identity(n_comp, format="csr"), format="csr")
    return cache[level]


def prolongate(hierarchy, x, levels_up=1):
    """Embed a state into the space `levels_up` levels finer."""
    n_comp = hierarchy.dim + 1
    v = x.values
    lvl = x.level
    for _ in range(levels_up):
        v = full_prolongation(hierarchy, lvl, n_comp) @ v
        lvl += 1
    return StateVector(lvl, v, x.time)


def restrict_rhs(hierarchy, b, level_fine, levels_down=1):
    """Restrict a dual (right-hand-side) vector: the prolongation transpose."""
    n_comp = hierarchy.dim + 1
    out = b
    lvl = level_fine
    for _ in range(levels_down):
        out = full_prolongation(hierarchy, lvl - 1, n_comp).T @ out
        lvl -= 1
    return out


def inject(space_coarse, x_fine):
    """Pointwise restriction of a fine state: coarse nodes lead the numbering."""
    return StateVector(space_coarse.level, x_fine.values[:space_coarse.ndof].copy(),
                       x_fine.time)


# -- Dirichlet data ---------------------------------------------------------------

def ramp(t):
    """Smooth startup factor: 1/2 - 1/2 cos(5 pi t) for t <= 1/5, else 1."""
    return 0.5 - 0.5 * np.cos(5 * np.pi * t) if t <= 0.2 else 1.0


def inflow_profile(dim, vbar, H):
    """Parabolic inflow with smooth startup.

    2d: v_x(y)  = w(t) * 3/2 * vbar * y(H-y) / (H/2)^2
    3d: v_x(y,z)= w(t) * 9/8 * vbar * y(H-y)(H^2-z^2) / ((H/2)^2 H^2)
    """
    if dim == 2:
        def profile(t, pts):
            y = pts[:, 1]
            out = np.zeros((pts.shape[0], 2))
            out[:, 0] = ramp(t) * 1.5 * vbar * y * (H - y) / (H / 2) ** 2
            return out
    else:
        def profile(t, pts):
            y, z = pts[:, 1], pts[:, 2]
            out = np.zeros((pts.shape[0], 3))
            out[:, 0] = ramp(t) * 1.125 * vbar * y * (H - y) * (H ** 2 - z ** 2) \
                / ((H / 2) ** 2 * H ** 2)
            return out
    return profile


def no_slip(t, pts):
    return np.zeros((pts.shape[0], pts.shape[1]))


def benchmark_bcs(dim, vbar, H):
    """tag -> callable map of the channel benchmark (walls no-slip, ramped inflow)."""
    return {meshmod.INFLOW: inflow_profile(dim, vbar, H),
            meshmod.WALL: no_slip,
            meshmod.OBSTACLE: no_slip}


def apply_dirichlet(space, x, t, bcs):
    """Impose the tagged velocity boundary values at time t (in place)."""
    for tag, fn in bcs.items():
        nodes = space.nodes_with_tag(tag)
        if nodes.size == 0 or fn is None:
            continue
        vals = fn(t, space.nodes[nodes])
        m = x.values.reshape(space.n_nodes, space.n_comp)
        m[nodes, 1:] = vals
    x.time = t
    return x
