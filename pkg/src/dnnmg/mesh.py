"""Hierarchical quadrilateral/hexahedral meshes, patches and geometry features.

A MeshHierarchy starts from a built-in template (boxes and boundary-fitted
channels with one or more cylindrical/elliptical obstacles) and grows by
uniform refinement.  Cell corners are stored in tensor order (x fastest),
children of cell ``c`` on the next level occupy ids ``2^d*c .. 2^d*c+2^d-1``
in octant order.  New vertices created by refinement are exactly the Q2
lattice nodes of the parent level, so the scalar Q2 nodes of level ``l``
coincide with the vertices of level ``l+1``; nodes on an obstacle boundary
are snapped onto the exact circle/ellipse.
"""

import numpy as np
from dataclasses import dataclass, field

from .elements import lattice, gauss_rule, N_LOC

# boundary tags
INFLOW, OUTFLOW, WALL, OBSTACLE = 1, 2, 3, 4
TAG_NAMES = {INFLOW: "inflow", OUTFLOW: "outflow", WALL: "wall", OBSTACLE: "obstacle"}

_SNAP_TOL = 1e-9

# local faces as corner index tuples, tensor corner order, x fastest
FACES_2D = ((0, 2), (1, 3), (0, 1), (2, 3))                      # x-,x+,y-,y+
FACES_3D = ((0, 2, 4, 6), (1, 3, 5, 7), (0, 1, 4, 5),
            (2, 3, 6, 7), (0, 1, 2, 3), (4, 5, 6, 7))            # x-,x+,y-,y+,z-,z+

EDGES_2D = ((0, 1), (2, 3), (0, 2), (1, 3))
EDGES_3D = ((0, 1), (2, 3), (4, 5), (6, 7),
            (0, 2), (1, 3), (4, 6), (5, 7),
            (0, 4), (1, 5), (2, 6), (3, 7))
DIAGONALS_2D = ((0, 3), (1, 2))
DIAGONALS_3D = ((0, 7), (1, 6), (2, 5), (3, 4))


@dataclass
class Obstacle:
    """Elliptical cylinder: center in the x-y plane, semi-axes (a, b)."""
    center: np.ndarray
    axes: np.ndarray

    def level_set(self, pts):
        """((x-cx)/a)^2 + ((y-cy)/b)^2 - 1, vectorized over rows."""
        q = (pts[..., :2] - self.center) / self.axes
        return q[..., 0] ** 2 + q[..., 1] ** 2 - 1.0

    def on_surface(self, pts):
        return np.abs(self.level_set(pts)) < _SNAP_TOL

    def project(self, pts):
        """Project points onto the surface radially in scaled coordinates."""
        out = np.array(pts, dtype=float)
        q = (out[..., :2] - self.center) / self.axes
        r = np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2)
        out[..., :2] = self.center + self.axes * q / r[..., None]
        return out


class MeshLevel:
    def __init__(self, dim, vertices, cells, parent_of=None):
        self.dim = dim
        self.vertices = np.asarray(vertices, dtype=float)
        self.cells = np.asarray(cells, dtype=np.int64)
        self.parent_of = parent_of            # (n_cells,) or None on level 0
        self.boundary_faces = []              # (cell, local_face, tag) triples

    @property
    def n_cells(self):
        return self.cells.shape[0]

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    def cell_volumes(self):
        """Exact volumes of the corner-multilinear cells (2^d-point Gauss)."""
        dim = self.dim
        pts, wts = gauss_rule(dim, 2)
        corners = lattice(dim, 2)
        # derivatives of the multilinear shape functions at the Gauss points
        ders = np.ones((pts.shape[0], corners.shape[0], dim))
        for comp in range(dim):
            for k in range(dim):
                xk = corners[:, k][None, :]
                if k == comp:
                    ders[:, :, comp] *= 2 * xk - 1.0
                else:
                    ders[:, :, comp] *= xk * pts[:, k][:, None] + \
                        (1 - xk) * (1 - pts[:, k][:, None])
        X = self.vertices[self.cells]                      # (nc, 2^d, d)
        J = np.einsum('qaj,cai->cqij', ders, X)
        return np.linalg.det(J) @ wts


class MeshHierarchy:
    """Nested mesh levels 0..top with refinement tree and boundary tags."""

    def __init__(self, level0, extent_lo, extent_hi, obstacles=(), channel_tags=True):
        self.dim = level0.dim
        self.levels = [level0]
        self.extent_lo = np.asarray(extent_lo, dtype=float)
        self.extent_hi = np.asarray(extent_hi, dtype=float)
        self.obstacles = list(obstacles)
        self.channel_tags = channel_tags
        self._node_cache = {}
        self._check_orientation(level0)
        self._tag_boundary(level0)

    # -- construction helpers -------------------------------------------------

    def _check_orientation(self, lvl):
        vols = lvl.cell_volumes()
        if np.any(vols <= 0):
            bad = int(np.argmin(vols))
            raise ValueError(f"cell {bad} has non-positive Jacobian (volume {vols[bad]:.3e})")

    def _tag_boundary(self, lvl):
        """Find faces owned by a single cell and classify them geometrically."""
        dim = lvl.dim
        faces = FACES_2D if dim == 2 else FACES_3D
        seen = {}
        for c in range(lvl.n_cells):
            cv = lvl.cells[c]
            for f, corners in enumerate(faces):
                key = tuple(sorted(cv[list(corners)]))
                if key in seen:
                    seen[key] = None
                else:
                    seen[key] = (c, f)
        lo, hi = self.extent_lo, self.extent_hi
        tol = 1e-9 * max(np.max(hi - lo), 1.0)
        out = []
        for key, owner in seen.items():
            if owner is None:
                continue
            pts = lvl.vertices[list(key)]
            tag = WALL
            for obs in self.obstacles:
                if np.all(obs.on_surface(pts)):
                    tag = OBSTACLE
                    break
            else:
                if self.channel_tags:
                    if np.all(np.abs(pts[:, 0] - lo[0]) < tol):
                        tag = INFLOW
                    elif np.all(np.abs(pts[:, 0] - hi[0]) < tol):
                        tag = OUTFLOW
            out.append((owner[0], owner[1], tag))
        out.sort()
        lvl.boundary_faces = out

    # -- Q2 lattice nodes ------------------------------------------------------

    def _snap(self, pt, corner_pts):
        """Snap a new lattice point to an obstacle if its parents lie on it."""
        for obs in self.obstacles:
            if np.all(obs.on_surface(corner_pts)):
                return obs.project(pt)
        return pt

    def scalar_nodes(self, level):
        """Q2 scalar node table of a level: (coords (n,d), cell_nodes (nc,3^d)).

        Ids 0..n_vertices-1 are the level's vertices; edge/face/center nodes
        follow in order of first appearance.  These nodes are, by shared
        construction, the vertices of level+1.
        """
        if level in self._node_cache:
            return self._node_cache[level]
        lvl = self.levels[level]
        dim = lvl.dim
        lat = lattice(dim, 3)
        nloc = N_LOC(dim)
        verts = lvl.vertices
        cells = lvl.cells
        coords = [verts]
        table = np.empty((lvl.n_cells, nloc), dtype=np.int64)
        entity_ids = {}
        next_id = lvl.n_vertices
        new_pts = []
        corner_pos = {tuple(ix): k for k, ix in enumerate(lattice(dim, 2) * 2)}
        for c in range(lvl.n_cells):
            cv = cells[c]
            cpts = verts[cv]
            for a in range(nloc):
                ix = lat[a]
                ones = np.nonzero(ix == 1)[0]
                if len(ones) == 0:
                    table[c, a] = cv[corner_pos[tuple(ix)]]
                    continue
                # corners obtained by replacing the middle coordinates by 0/2
                reps = lattice(len(ones), 2) * 2
                parents = []
                for rep in reps:
                    jx = ix.copy()
                    jx[ones] = rep
                    parents.append(cv[corner_pos[tuple(jx)]])
                if len(ones) == dim:
                    key = ("c", c)
                else:
                    key = tuple(sorted(parents))
                idx = entity_ids.get(key)
                if idx is None:
                    pt = verts[parents].mean(axis=0)
                    pt = self._snap(pt, verts[parents])
                    idx = next_id
                    entity_ids[key] = idx
                    new_pts.append(pt)
                    next_id += 1
                table[c, a] = idx
        if new_pts:
            coords.append(np.asarray(new_pts))
        coords = np.concatenate(coords, axis=0)
        self._node_cache[level] = (coords, table)
        return self._node_cache[level]

    @property
    def top(self):
        return len(self.levels) - 1


def refine_uniform(h):
    """Append one uniformly refined level to the hierarchy and return it.

    Each cell is split into 2^d children (octant order); new vertices are the
    parent level's Q2 lattice nodes, including obstacle snapping.
    """
    lvl = h.levels[-1]
    dim = lvl.dim
    coords, table = h.scalar_nodes(len(h.levels) - 1)
    lat3 = {tuple(ix): a for a, ix in enumerate(lattice(dim, 3))}
    octs = lattice(dim, 2)
    nloc_child = 2 ** dim
    cells = np.empty((lvl.n_cells * nloc_child, nloc_child), dtype=np.int64)
    parent = np.empty(lvl.n_cells * nloc_child, dtype=np.int64)
    child_corners = lattice(dim, 2)
    for o, oct_ix in enumerate(octs):
        cols = [lat3[tuple(oct_ix + dcorner)] for dcorner in child_corners]
        cells[o::nloc_child] = table[:, cols]
        parent[o::nloc_child] = np.arange(lvl.n_cells)
    new = MeshLevel(dim, coords, cells, parent_of=parent)
    h._check_orientation(new)
    h._tag_boundary(new)
    h.levels.append(new)
    return h


# -- templates ----------------------------------------------------------------

def _graded_steps(width, h0, growth, hmax):
    """Geometric step widths covering `width`, rescaled to fit exactly."""
    steps, w, total = [], h0, 0.0
    while total + 0.5 * w < width:
        steps.append(w)
        total += w
        w = min(w * growth, hmax)
    if not steps:
        return [width]
    return [s * width / total for s in steps]


def _fill_gap(a, b, h0, growth, hmax, grow_from):
    """Interior grid lines for the gap (a,b); grow_from in {left,right,both}."""
    width = b - a
    if grow_from == "left":
        steps = _graded_steps(width, h0, growth, hmax)
    elif grow_from == "right":
        steps = _graded_steps(width, h0, growth, hmax)[::-1]
    else:
        half = _graded_steps(width / 2, h0, growth, hmax)
        steps = half + half[::-1]
    return list(a + np.cumsum(steps[:-1]))


def _tensor_lines(lo, hi, mandatory, h0, growth, hmax, protected=()):
    """1d grid lines containing `mandatory`, graded away from those points.

    Intervals listed in `protected` (the obstacle block halves) are kept as
    single cells.
    """
    marks = sorted(set([lo, hi] + list(mandatory)))
    lines = [marks[0]]
    for a, b in zip(marks[:-1], marks[1:]):
        shielded = any(a >= pa - 1e-12 and b <= pb + 1e-12 for (pa, pb) in protected)
        if not shielded:
            near_a = any(abs(a - m) < 1e-12 for m in mandatory)
            near_b = any(abs(b - m) < 1e-12 for m in mandatory)
            if near_a and not near_b:
                side = "left"
            elif near_b and not near_a:
                side = "right"
            else:
                side = "both"
            lines += _fill_gap(a, b, h0, growth, hmax, side)
        lines.append(b)
    return np.asarray(lines)


def _box_mesh(extent_lo, extent_hi, n_cells, channel_tags):
    lo = np.asarray(extent_lo, dtype=float)
    hi = np.asarray(extent_hi, dtype=float)
    dim = lo.size
    axes = [np.linspace(lo[k], hi[k], n_cells[k] + 1) for k in range(dim)]
    return _from_tensor_lines(axes, lo, hi, [], channel_tags)


def _from_tensor_lines(axes, lo, hi, obstacles, channel_tags):
    """Tensor-product mesh with each obstacle's 2x2 block replaced by a ring."""
    dim = len(axes)
    nx = [len(a) for a in axes]
    if dim == 2:
        X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
        verts = np.stack([X.reshape(-1, order="F"), Y.reshape(-1, order="F")], axis=1)

        def vid(i, j):
            return i + nx[0] * j
    else:
        X, Y, Z = np.meshgrid(axes[0], axes[1], axes[2], indexing="ij")
        verts = np.stack([X.transpose(2, 1, 0).reshape(-1),
                          Y.transpose(2, 1, 0).reshape(-1),
                          Z.transpose(2, 1, 0).reshape(-1)], axis=1)

        def vid(i, j, k):
            return i + nx[0] * (j + nx[1] * k)

    # locate each obstacle's 2x2 block in the (x, y) grid
    blocks = []
    for obs in obstacles:
        cx, cy = obs.center
        ix = int(np.argmin(np.abs(axes[0] - cx)))
        iy = int(np.argmin(np.abs(axes[1] - cy)))
        blocks.append((ix - 1, iy - 1))
    blocked = set()
    for (bx, by) in blocks:
        for dx in range(2):
            for dy in range(2):
                blocked.add((bx + dx, by + dy))

    ring_extra = []            # new vertex coordinates (x, y)
    ring_cells2d = []          # (v00, v10, v01, v11) with ids, 2d layer

    def ring_layer(vid2):
        """Return 2d cells (tensor order ids) for one z-layer."""
        cells = []
        for i in range(nx[0] - 1):
            for j in range(nx[1] - 1):
                if (i, j) in blocked:
                    continue
                cells.append((vid2(i, j), vid2(i + 1, j), vid2(i, j + 1), vid2(i + 1, j + 1)))
        for obs, (bx, by) in zip(obstacles, blocks):
            # outer ring nodes at angles k*45deg on the block boundary
            outer = [vid2(bx + 2, by + 1), vid2(bx + 2, by + 2), vid2(bx + 1, by + 2),
                     vid2(bx, by + 2), vid2(bx, by + 1), vid2(bx, by),
                     vid2(bx + 1, by), vid2(bx + 2, by)]
            inner = []
            for k in range(8):
                th = k * np.pi / 4
                pt = obs.center + obs.axes * np.array([np.cos(th), np.sin(th)])
                inner.append(("new", len(ring_extra)))
                ring_extra.append(pt)
            for k in range(8):
                kk = (k + 1) % 8
                cells.append((inner[k], outer[k], inner[kk], outer[kk]))
        return cells

    if dim == 2:
        layer = ring_layer(vid)
        n_new = len(ring_extra)
        verts = np.concatenate([verts, np.asarray(ring_extra).reshape(n_new, 2)], axis=0) \
            if n_new else verts
        base = nx[0] * nx[1]

        def resolve(v):
            return base + v[1] if isinstance(v, tuple) else v
        cells = np.asarray([[resolve(v) for v in c] for c in layer], dtype=np.int64)
    else:
        # build the 2d layer once, then extrude along z
        def vid2(i, j):
            return i + nx[0] * j
        layer = ring_layer(vid2)
        n2d = nx[0] * nx[1]
        n_new = len(ring_extra)
        ring_xy = np.asarray(ring_extra).reshape(n_new, 2) if n_new else np.zeros((0, 2))
        ring_ids = {}
        pts3, cells = [], []
        for k in range(nx[2]):
            for r in range(n_new):
                ring_ids[(r, k)] = len(pts3)
                pts3.append([ring_xy[r, 0], ring_xy[r, 1], axes[2][k]])

        def resolve(v, k):
            return n2d * nx[2] + ring_ids[(v[1], k)] if isinstance(v, tuple) else v + n2d * k
        for k in range(nx[2] - 1):
            for c in layer:
                bot = [resolve(v, k) for v in c]
                top = [resolve(v, k + 1) for v in c]
                cells.append(bot + top)
        verts = np.concatenate([verts, np.asarray(pts3).reshape(-1, 3)], axis=0) \
            if pts3 else verts
        cells = np.asarray(cells, dtype=np.int64)

    # drop unused vertices (obstacle block centers)
    used = np.zeros(verts.shape[0], dtype=bool)
    used[cells.reshape(-1)] = True
    remap = -np.ones(verts.shape[0], dtype=np.int64)
    remap[used] = np.arange(used.sum())
    lvl = MeshLevel(dim, verts[used], remap[cells])
    return MeshHierarchy(lvl, lo, hi, obstacles, channel_tags)


def _channel_with_obstacles(channel, obstacles, ring_factor, growth, hmax_factor, nz):
    dim = len(channel)
    lo = np.zeros(dim)
    hi = np.asarray(channel, dtype=float)
    if dim == 3:
        lo[2], hi[2] = -channel[2] / 2.0, channel[2] / 2.0
    obs_list, rings = [], []
    for center, ax in obstacles:
        obs = Obstacle(np.asarray(center, dtype=float), np.asarray(ax, dtype=float))
        if np.any(obs.axes <= 0):
            raise ValueError("obstacle axes must be positive")
        R = ring_factor * float(np.max(obs.axes))
        box_lo = obs.center - R
        box_hi = obs.center + R
        if np.any(box_lo <= lo[:2] + 1e-12) or np.any(box_hi >= hi[:2] - 1e-12):
            raise ValueError(
                f"obstacle at {tuple(obs.center)} with ring radius {R:.3g} "
                "intersects the channel wall")
        obs_list.append(obs)
        rings.append(R)
    for a in range(len(obs_list)):
        for b in range(a + 1, len(obs_list)):
            gap = np.abs(obs_list[a].center - obs_list[b].center)
            if np.all(gap < rings[a] + rings[b] + 1e-12):
                raise ValueError("obstacle rings overlap")
    R0 = min(rings) if rings else 0.25 * float(np.min(hi - lo))
    hmax = hmax_factor * R0
    mand_x, mand_y, prot_x, prot_y = [], [], [], []
    for obs, R in zip(obs_list, rings):
        mand_x += [obs.center[0] - R, obs.center[0], obs.center[0] + R]
        mand_y += [obs.center[1] - R, obs.center[1], obs.center[1] + R]
        prot_x.append((obs.center[0] - R, obs.center[0] + R))
        prot_y.append((obs.center[1] - R, obs.center[1] + R))
    axes = [_tensor_lines(lo[0], hi[0], mand_x, R0, growth, hmax, prot_x),
            _tensor_lines(lo[1], hi[1], mand_y, R0, growth, hmax, prot_y)]
    if dim == 3:
        axes.append(np.linspace(lo[2], hi[2], nz + 1))
    return _from_tensor_lines(axes, lo, hi, obs_list, channel_tags=True)


def build_template_mesh(geometry, **params):
    """Level-0 mesh for a named template geometry.

    geometry: 'box' | 'channel_cylinder_2d' | 'channel_cylinder_3d'
              | 'channel_two_obstacles'
    Boxes take extent_lo/extent_hi/n_cells and an optional channel_tags flag
    (inflow/outflow on the x faces); channels take channel dims, obstacle
    center(s)/axes and grading parameters.
    """
    if geometry == "box":
        lo = params.get("extent_lo", (0.0, 0.0))
        hi = params.get("extent_hi", (1.0, 1.0))
        n = params.get("n_cells", (1,) * len(lo))
        return _box_mesh(lo, hi, n, params.get("channel_tags", False))

    ring = params.get("ring_factor", 2.0)
    growth = params.get("growth", 1.6)
    hmax = params.get("hmax_factor", 4.0)
    nz = params.get("nz", 2)
    if geometry == "channel_cylinder_2d":
        channel = params.get("channel", (2.2, 0.41))
        center = params.get("obstacle_center", (0.5, 0.2))
        ax = params.get("obstacle_axes", (0.05, 0.05))
        return _channel_with_obstacles(channel, [(center, ax)], ring, growth, hmax, nz)
    if geometry == "channel_cylinder_3d":
        channel = params.get("channel", (2.5, 0.41, 0.41))
        center = params.get("obstacle_center", (0.5, 0.2))
        ax = params.get("obstacle_axes", (0.05, 0.05))
        return _channel_with_obstacles(channel, [(center, ax)], ring, growth, hmax, nz)
    if geometry == "channel_two_obstacles":
        channel = params.get("channel", (2.2, 0.41))
        centers = params.get("obstacle_centers", ((0.5, 0.2), (1.5, 0.2)))
        ax = params.get("obstacle_axes", ((0.05, 0.05), (0.05, 0.05)))
        obs = list(zip(centers, ax))
        return _channel_with_obstacles(channel, obs, ring, growth, hmax, nz)
    raise ValueError(f"unknown template geometry '{geometry}'")


# -- patches -------------------------------------------------------------------

@dataclass
class Patch:
    coarse_cell: int                 # M, cell index on level L
    fine_cells: np.ndarray           # cell ids on level L+J
    local_to_global: np.ndarray      # dof-level map, length (d+1)*nodes
    scalar_nodes: np.ndarray         # scalar node ids on L+J, lattice order
    geometry: np.ndarray = field(default=None)


class PatchSet:
    """All patches of a (L, J) split plus the valence scaling vector."""

    def __init__(self, hierarchy, L, J):
        if J not in (1, 2):
            raise ValueError(f"unsupported patch depth J={J}; need 1 or 2")
        if L + J > hierarchy.top:
            raise ValueError("mesh hierarchy lacks the fine level L+J")
        self.hierarchy = hierarchy
        self.L, self.J = L, J
        dim = hierarchy.dim
        ncomp = dim + 1
        nchild = 2 ** dim
        width = 3 if J == 1 else 5
        nodes_per_patch = width ** dim
        coarse = hierarchy.levels[L]
        _, fine_table = hierarchy.scalar_nodes(L + J)
        lat3 = lattice(dim, 3)
        octs = lattice(dim, 2)
        patches = []
        for M in range(coarse.n_cells):
            for o in range(nchild):
                child = nchild * M + o
                if J == 1:
                    fine_cells = np.array([child])
                    snodes = fine_table[child]
                else:
                    fine_cells = nchild * child + np.arange(nchild)
                    grid = -np.ones((width,) * dim, dtype=np.int64)
                    for g, gc in zip(octs, fine_cells):
                        for a, ix in enumerate(lat3):
                            pos = tuple(2 * g + ix)
                            node = fine_table[gc, a]
                            if grid[pos] >= 0 and grid[pos] != node:
                                raise RuntimeError("inconsistent patch node table")
                            grid[pos] = node
                    # flatten with x fastest
                    snodes = grid.transpose(tuple(reversed(range(dim)))).reshape(-1)
                l2g = (ncomp * snodes[:, None] + np.arange(ncomp)[None, :]).reshape(-1)
                patches.append(Patch(M, fine_cells, l2g, snodes))
        self.patches = patches
        self.dim = dim
        self.ncomp = ncomp
        self.nodes_per_patch = nodes_per_patch
        self.ndof_patch = ncomp * nodes_per_patch
        self.dof_table = np.stack([p.local_to_global for p in patches])
        self.node_table = np.stack([p.scalar_nodes for p in patches])
        n_fine = ncomp * hierarchy.scalar_nodes(L + J)[0].shape[0]
        counts = np.bincount(self.dof_table.reshape(-1), minlength=n_fine)
        if np.any(counts == 0):
            raise RuntimeError("patch union does not cover the fine level")
        self.valence = counts
        self.mu = 1.0 / counts
        geo = geometry_features_of_cells(coarse, np.array([p.coarse_cell for p in patches]))
        for p, g in zip(patches, geo):
            p.geometry = g
        self.geom_table = geo
        self.n_geo = geo.shape[1]

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)


def build_patches(hierarchy, L, J):
    """Patches of the (L, J) split; see PatchSet for the stacked tables."""
    return PatchSet(hierarchy, L, J)


# -- geometry features ----------------------------------------------------------

def _angles_at_vertices(X, edges, dim):
    """Average angle (radians) between the edge vectors at each vertex."""
    nverts = 2 ** dim
    out = np.empty((X.shape[0], nverts))
    incident = [[] for _ in range(nverts)]
    for (a, b) in edges:
        incident[a].append((a, b))
        incident[b].append((b, a))
    for v in range(nverts):
        vecs = [X[:, b] - X[:, a] for (a, b) in incident[v]]
        angs = []
        for i in range(len(vecs)):
            for j in range(i + 1, len(vecs)):
                num = np.sum(vecs[i] * vecs[j], axis=1)
                den = np.linalg.norm(vecs[i], axis=1) * np.linalg.norm(vecs[j], axis=1)
                angs.append(np.arccos(np.clip(num / den, -1.0, 1.0)))
        out[:, v] = np.mean(angs, axis=0)
    return out


def geometry_features_of_cells(level, cell_ids):
    """Per-cell geometry feature rows.

    3D: 12 edge lengths, 4 interior diagonals, 8 per-vertex averaged angles
    (n_Geo = 24).  2D analogue: 4 edges, 2 diagonals, 4 vertex angles
    (n_Geo = 10).  Angles are the mean over the pairwise angles between the
    edge vectors meeting at the vertex, in radians.
    """
    dim = level.dim
    edges = EDGES_2D if dim == 2 else EDGES_3D
    diags = DIAGONALS_2D if dim == 2 else DIAGONALS_3D
    X = level.vertices[level.cells[cell_ids]]          # (n, 2^d, d)
    el = np.stack([np.linalg.norm(X[:, b] - X[:, a], axis=1) for (a, b) in edges], axis=1)
    if np.any(el <= 0):
        raise ValueError("degenerate cell: zero-length edge")
    dl = np.stack([np.linalg.norm(X[:, b] - X[:, a], axis=1) for (a, b) in diags], axis=1)
    ang = _angles_at_vertices(X, edges, dim)
    return np.concatenate([el, dl, ang], axis=1)


def geometry_features(patch, level):
    """Feature vector of a single patch, computed on its coarse cell."""
    return geometry_features_of_cells(level, np.array([patch.coarse_cell]))[0]


def n_geo(dim):
    return 10 if dim == 2 else 24
