"""Meshes, refinement, patches and the exactness of the transfer operators.

Builds the benchmark channel with a circular obstacle, refines it twice,
checks the properties the solver relies on (snapped boundary nodes, exact
prolongation, valence-averaged patch extension) and writes a VTK snapshot of
the mesh with a smooth marker field.
"""

import numpy as np

from dnnmg import mesh, space, patch_ops, io

h = mesh.build_template_mesh("channel_cylinder_2d")
mesh.refine_uniform(h)
mesh.refine_uniform(h)
print("levels:", [lvl.n_cells for lvl in h.levels], "cells")
print("volumes:", [f"{lvl.cell_volumes().sum():.6f}" for lvl in h.levels],
      "(approaching channel minus circle =",
      f"{2.2 * 0.41 - np.pi * 0.05 ** 2:.6f})")

s1 = space.FeSpace(h, 1)
s2 = space.FeSpace(h, 2)
print(f"level 1: {s1.ndof} unknowns, level 2: {s2.ndof} unknowns")

# prolongation embeds exactly: evaluate a random coarse field on both levels
rng = np.random.default_rng(1)
u = rng.standard_normal(s1.n_nodes)
P = space.prolongation_matrix(h, 1)
print("coarse nodes preserved:", np.abs((P @ u)[:s1.n_nodes] - u).max())

# patches: every fine dof belongs to >= 1 patch, shared ones are averaged
ps = mesh.build_patches(h, 1, 1)
x = rng.standard_normal(ps.mu.shape[0])
roundtrip = patch_ops.global_extend(patch_ops.local_restrict(x, ps), ps)
print(f"{len(ps)} patches, {ps.ndof_patch} dofs each; extend(restrict) "
      f"deviation {np.abs(roundtrip - x).max():.2e}")
print("network input width:", patch_ops.input_width(ps),
      "-> output", patch_ops.output_width(ps))

marker = s2.zero_state()
m = marker.values.reshape(s2.n_nodes, 3)
m[:, 0] = np.sin(3 * s2.nodes[:, 0]) * np.cos(5 * s2.nodes[:, 1])
io.write_vtk(s2, marker, "mesh_demo.vtk")
print("wrote mesh_demo.vtk")
