import numpy as np
import pytest

from dnnmg import mesh as meshmod
from dnnmg.space import FeSpace, full_prolongation, restrict_rhs, StateVector
from dnnmg.assembly import Assembler, stab_params, StabParams
from dnnmg.msolve import NewtonSettings
from dnnmg import driver


def small_assembler(h, level=0):
    return Assembler(FeSpace(h, level))


def test_stab_params_values():
    aT, dT = stab_params(0.1, 1.0, 5e-4, 0.008, alpha0=0.02, delta0=0.1)
    assert aT == pytest.approx(0.02 / (5e-4 / 0.01 + 10.0 + 125.0), rel=1e-13)
    assert aT == pytest.approx(1.480933e-4, rel=1e-6)
    assert dT / aT == pytest.approx(5.0, rel=1e-13)
    a0, _ = stab_params(0.1, 1.0, 5e-4, 0.008, alpha0=0.0)
    assert a0 == 0.0


def test_stab_ratio_shared_denominator(rng):
    h = rng.random(10) + 0.1
    v = rng.random(10) * 3
    aT, dT = stab_params(h, v, 1e-3, 0.05, alpha0=0.02, delta0=0.1)
    assert np.allclose(dT / aT, 5.0)


def test_zero_state_zero_residual(box2d):
    asm = small_assembler(box2d)
    x = np.zeros(asm.space.ndof)
    stab = asm.stab(x, 1e-2, 0.1)
    r = asm.assemble_residual(x, np.zeros_like(x), 0.1, 1e-2, stab,
                              mask=asm.space.dirichlet_mask())
    assert np.all(r == 0.0)


@pytest.mark.parametrize("dim", [2, 3])
def test_fd_jacobian_consistency(dim, rng):
    kw = (dict(extent_lo=(0, 0), extent_hi=(1, 1), n_cells=(2, 2)) if dim == 2
          else dict(extent_lo=(0, 0, 0), extent_hi=(1, 1, 1), n_cells=(1, 1, 1)))
    h = meshmod.build_template_mesh("box", **kw)
    asm = small_assembler(h)
    k, nu = 0.05, 1e-2
    x = rng.standard_normal(asm.space.ndof) * 0.5
    stab = asm.stab(x, nu, k, alpha0=0.02, delta0=0.1)
    b = np.zeros_like(x)
    J = asm.assemble_jacobian(x, k, nu, stab)
    for _ in range(10):
        d = rng.standard_normal(x.size)
        eps = 1e-6
        fd = (asm.assemble_residual(x + eps * d, b, k, nu, stab)
              - asm.assemble_residual(x - eps * d, b, k, nu, stab)) / (2 * eps)
        Jd = J @ d
        assert np.linalg.norm(fd + Jd) / np.linalg.norm(Jd) < 1e-6


def test_fd_richardson_slope_two(box2d, rng):
    asm = small_assembler(box2d, 1)
    k, nu = 0.05, 1e-2
    x = rng.standard_normal(asm.space.ndof) * 0.5
    stab = asm.stab(x, nu, k)
    b = np.zeros_like(x)
    J = asm.assemble_jacobian(x, k, nu, stab)
    d = rng.standard_normal(x.size)

    def defect(eps):
        lin = asm.assemble_residual(x, b, k, nu, stab) - eps * (J @ d)
        return np.linalg.norm(asm.assemble_residual(x + eps * d, b, k, nu, stab) - lin)

    slope = np.log(defect(1e-3) / defect(5e-4)) / np.log(2.0)
    assert abs(slope - 2.0) < 0.05


def test_rest_state_is_stokes_operator(channel2d, rng):
    """At v=0 the convection block vanishes and the saddle structure holds."""
    asm = small_assembler(channel2d, 0)
    n = asm.space.ndof
    x = np.zeros(n)
    x.reshape(-1, 3)[:, 0] = rng.standard_normal(asm.space.n_nodes)  # pressure only
    stab = asm.stab(x, 1e-2, 0.1)
    J = asm.assemble_jacobian(x, 0.1, 1e-2, stab)
    J_nc = asm.assemble_jacobian(x, 0.1, 1e-2, stab, convection=False)
    assert abs(J - J_nc).max() < 1e-14
    m = np.zeros(n, dtype=bool)
    m.reshape(-1, 3)[:, 0] = True
    Jd = J.toarray()
    vv = Jd[np.ix_(~m, ~m)]
    vp = Jd[np.ix_(~m, m)]
    pv = Jd[np.ix_(m, ~m)]
    assert np.abs(vv - vv.T).max() < 1e-12          # symmetric velocity block
    assert np.abs(vp + pv.T).max() < 1e-12          # -(p, div phi) vs (div v, xi)


def test_jacobian_sparsity_locality(box2d):
    asm = small_assembler(box2d, 1)
    x = np.zeros(asm.space.ndof)
    stab = asm.stab(x, 1e-2, 0.1)
    J = asm.assemble_jacobian(x, 0.1, 1e-2, stab).tocoo()
    allowed = set()
    for dofs in asm.cell_dofs:
        s = set(map(int, dofs))
        for a in s:
            allowed.update((a, b) for b in s)
    assert all((int(r), int(c)) in allowed for r, c in zip(J.row, J.col))


def test_rhs_zero_for_rest_state(box2d):
    asm = small_assembler(box2d)
    b = asm.assemble_rhs_next(np.zeros(asm.space.ndof), None, None, 0.1, 1e-2)
    assert np.all(b == 0.0)


def test_rhs_linearity_in_f(channel2d, rng):
    asm = small_assembler(channel2d, 1)
    s = asm.space
    x = rng.standard_normal(s.ndof)
    fn = rng.standard_normal((s.n_nodes, 2))
    b1 = asm.assemble_rhs_next(x, fn, fn, 0.1, 1e-2)
    b0 = asm.assemble_rhs_next(x, None, None, 0.1, 1e-2)
    xf = np.zeros(s.ndof)
    xf.reshape(s.n_nodes, 3)[:, 1:] = fn
    mass_f = asm.assemble_rhs_next(xf, None, None, 1.0, 0.0, convection=False)
    assert np.abs((b1 - b0) - mass_f).max() < 1e-12


def test_nested_rhs_restriction_identity(channel2d, rng):
    s0, s1 = FeSpace(channel2d, 0), FeSpace(channel2d, 1)
    a0, a1 = Assembler(s0), Assembler(s1)
    k, nu = 0.02, 1e-3
    x0 = rng.standard_normal(s0.ndof)
    xf = full_prolongation(channel2d, 0, 3) @ x0
    b_fine = a1.assemble_rhs_next(xf, None, None, k, nu)
    got = restrict_rhs(channel2d, b_fine, 1, 1)
    want = a0.assemble_rhs_next(x0, None, None, k, nu)
    assert np.abs(got - want).max() < 1e-12 * max(1.0, np.abs(want).max())


def manufactured_q2_exact(g=0.3):
    """Steady divergence-free Q2 field with polynomial forcing, p = 0."""
    def velocity(t, pts):
        return g * np.stack([pts[:, 1] ** 2, pts[:, 0] ** 2], axis=1)

    def force(t, pts):
        x, y = pts[:, 0], pts[:, 1]
        fx = g * g * 2 * x ** 2 * y - 2 * 1e-2 * g
        fy = g * g * 2 * x * y ** 2 - 2 * 1e-2 * g
        return np.stack([fx, fy], axis=1)
    return velocity, force


def test_manufactured_steady_fixed_point(box2d):
    """The discrete solution of a Q2-exact steady problem reproduces itself."""
    velocity, force = manufactured_q2_exact()
    nu, k = 1e-2, 0.1
    h = box2d
    s = FeSpace(h, 1)
    asm = Assembler(s)
    bcs = {meshmod.WALL: velocity}
    pr = driver.NsProblem(h, nu=nu, k=k, bcs=bcs, f=force, delta0=0.0,
                          linear_solver="direct",
                          newton=NewtonSettings(tol_rel=1e-12, tol_abs=1e-13))
    x = s.zero_state()
    x.values.reshape(s.n_nodes, 3)[:, 1:] = velocity(0.0, s.nodes)
    b = pr.asm(1).assemble_rhs_next(x.values, pr.f_nodal(1, 0.0),
                                    pr.f_nodal(1, k), k, nu)
    x1, stats, _ = pr.solve_step(1, x, b, k)
    assert stats.iterations <= 1
    diff = x1.values - x.values
    m = diff.reshape(s.n_nodes, 3)
    assert np.abs(m[:, 1:]).max() < 1e-10


def test_galilean_constant_velocity_no_convection_residual(box2d):
    """For constant v the convective term vanishes identically."""
    asm = small_assembler(box2d)
    s = asm.space
    x = np.zeros(s.ndof)
    x.reshape(s.n_nodes, 3)[:, 1] = 0.7
    x.reshape(s.n_nodes, 3)[:, 2] = -0.2
    stab = asm.stab(x, 1e-2, 0.1, delta0=0.0)
    a_conv = asm.apply_operator(x, 0.1, 1e-2, stab, convection=True)
    a_none = asm.apply_operator(x, 0.1, 1e-2, stab, convection=False)
    assert np.abs(a_conv - a_none).max() < 1e-13
