"""Manufactured-solution convergence of the discretization.

Space: a smooth divergence-free field on the unit square under three uniform
refinements shows the cubic L2 velocity convergence of the Q2 elements.
Time: a velocity field inside the Q2 space removes all spatial error, so the
remaining error under time-step halving is the second-order Crank-Nicolson
error alone.
"""

import numpy as np
import sympy as sp

from dnnmg import mesh, driver
from dnnmg.msolve import NewtonSettings

# -- spatial order -------------------------------------------------------------
x, y, t = sp.symbols("x y t")
nu = 0.05
psi = sp.sin(sp.pi * x) ** 2 * sp.sin(sp.pi * y) ** 2 / 10
u = sp.diff(psi, y) * sp.cos(t)
v = -sp.diff(psi, x) * sp.cos(t)
p = sp.sin(sp.pi * x) * sp.cos(sp.pi * y)
fx = sp.diff(u, t) + u * sp.diff(u, x) + v * sp.diff(u, y) \
    - nu * (sp.diff(u, x, 2) + sp.diff(u, y, 2)) + sp.diff(p, x)
fy = sp.diff(v, t) + u * sp.diff(v, x) + v * sp.diff(v, y) \
    - nu * (sp.diff(v, x, 2) + sp.diff(v, y, 2)) + sp.diff(p, y)
L = sp.lambdify
uu, vv = L((t, x, y), u, "numpy"), L((t, x, y), v, "numpy")
fu, fv = L((t, x, y), fx, "numpy"), L((t, x, y), fy, "numpy")
vel = lambda tt, pts: np.stack([uu(tt, pts[:, 0], pts[:, 1]),
                                vv(tt, pts[:, 0], pts[:, 1])], axis=1)
force = lambda tt, pts: np.stack([fu(tt, pts[:, 0], pts[:, 1]),
                                  fv(tt, pts[:, 0], pts[:, 1])], axis=1)

T = 0.1
print("spatial convergence (velocity L2 error at T=0.1):")
prev = None
for n in (4, 8, 16):
    h = mesh.build_template_mesh("box", extent_lo=(0, 0), extent_hi=(1, 1),
                                 n_cells=(n, n))
    k = T / max(4, int(round(T / (0.02 * (4 / n) ** 1.5))))
    pr = driver.NsProblem(h, nu=nu, k=k, bcs={mesh.WALL: vel}, f=force,
                          linear_solver="direct",
                          newton=NewtonSettings(tol_rel=1e-11, tol_abs=1e-12))
    loop = driver.TimeLoop(pr, 0, initial=lambda tt, pts: vel(0.0, pts))
    while loop.state.n * k < T - 1e-12:
        loop.step()
    err = pr.asm(0).l2_error_velocity(loop.state.x.values, vel, T)
    rate = "" if prev is None else f"  rate {np.log2(prev / err):.2f}"
    print(f"  {n:3d}x{n}: {err:.3e}{rate}")
    prev = err

# -- temporal order -------------------------------------------------------------
print("temporal convergence (Q2-exact field, error at T=0.5):")
g, dg = np.sin, np.cos
nu2 = 1e-2
vel2 = lambda tt, pts: g(tt) * np.stack([pts[:, 1] ** 2, pts[:, 0] ** 2], axis=1)

def force2(tt, pts):
    xx, yy = pts[:, 0], pts[:, 1]
    return np.stack(
        [dg(tt) * yy ** 2 + g(tt) ** 2 * 2 * xx ** 2 * yy - 2 * nu2 * g(tt),
         dg(tt) * xx ** 2 + g(tt) ** 2 * 2 * xx * yy ** 2 - 2 * nu2 * g(tt)], axis=1)

h = mesh.build_template_mesh("box", extent_lo=(0, 0), extent_hi=(1, 1),
                             n_cells=(4, 4))
prev = None
for k in (1 / 16, 1 / 32, 1 / 64):
    pr = driver.NsProblem(h, nu=nu2, k=k, bcs={mesh.WALL: vel2}, f=force2,
                          delta0=0.0, linear_solver="direct",
                          newton=NewtonSettings(tol_rel=1e-12, tol_abs=1e-13))
    s = pr.space(0)
    loop = driver.TimeLoop(pr, 0, initial=lambda tt, pts: vel2(0.0, pts))
    while loop.state.n * k < 0.5 - 1e-12:
        loop.step()
    err = np.linalg.norm(loop.state.x.values.reshape(s.n_nodes, 3)[:, 1:]
                         - vel2(0.5, s.nodes))
    rate = "" if prev is None else f"  rate {np.log2(prev / err):.2f}"
    print(f"  k=1/{int(1 / k)}: {err:.3e}{rate}")
    prev = err
