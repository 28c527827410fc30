import numpy as np
import pytest

from dnnmg import mesh as meshmod, space as spmod
from dnnmg.assembly import Assembler
from dnnmg.elements import shape_q2
from dnnmg.space import (FeSpace, interpolate_linear, prolongation_matrix,
                         full_prolongation, restrict_rhs, apply_dirichlet,
                         ramp, inflow_profile, benchmark_bcs, inject,
                         prolongate, StateVector)


def eval_q2(space, u, cells, refpts):
    N = shape_q2(refpts, space.dim)
    return np.array([N[q] @ u[space.cell_nodes[c]] for q, c in enumerate(cells)])


def test_nodes_nested(cylinder2d):
    for l in (0, 1):
        coarse, _ = cylinder2d.scalar_nodes(l)
        fine, _ = cylinder2d.scalar_nodes(l + 1)
        assert np.array_equal(fine[:coarse.shape[0]], coarse)


def test_prolongation_preserves_constants(box2d):
    P = prolongation_matrix(box2d, 0)
    assert np.abs(P @ np.ones(P.shape[1]) - 1.0).max() < 1e-14


def test_prolongation_function_identity(cylinder2d, rng):
    s0, s1 = FeSpace(cylinder2d, 0), FeSpace(cylinder2d, 1)
    P = prolongation_matrix(cylinder2d, 0)
    u0 = rng.standard_normal(s0.n_nodes)
    u1 = P @ u0
    cells = rng.integers(0, cylinder2d.levels[0].n_cells, 100)
    refs = rng.random((100, 2))
    octs = (refs >= 0.5).astype(int)
    child = 4 * cells + octs[:, 0] + 2 * octs[:, 1]
    v0 = eval_q2(s0, u0, cells, refs)
    v1 = eval_q2(s1, u1, child, 2 * refs - octs)
    assert np.abs(v0 - v1).max() < 1e-12


def test_prolong_then_inject_roundtrip(box2d, rng):
    s0 = FeSpace(box2d, 0)
    x = StateVector(0, rng.standard_normal(s0.ndof))
    xf = prolongate(box2d, x, 1)
    back = inject(s0, xf)
    assert np.array_equal(back.values, x.values)


def test_restriction_is_transpose_pairing(box2d, rng):
    s0, s1 = FeSpace(box2d, 0), FeSpace(box2d, 1)
    Pf = full_prolongation(box2d, 0, 3)
    b = rng.standard_normal(s1.ndof)
    x = rng.standard_normal(s0.ndof)
    assert abs(b @ (Pf @ x) - (Pf.T @ b) @ x) < 1e-10
    z = restrict_rhs(box2d, np.zeros(s1.ndof), 1, 1)
    assert np.all(z == 0.0)


def test_rhs_restriction_dual_consistency(channel2d, rng):
    """Mass action on an embedded coarse function restricts exactly."""
    s0, s1 = FeSpace(channel2d, 0), FeSpace(channel2d, 1)
    a0, a1 = Assembler(s0), Assembler(s1)
    x0 = rng.standard_normal(s0.ndof)
    xf = full_prolongation(channel2d, 0, 3) @ x0
    # (v, phi) realized by the step-rhs with k=1, nu=0, no convection
    b_fine = a1.assemble_rhs_next(xf, None, None, 1.0, 0.0, convection=False)
    b_coarse = a0.assemble_rhs_next(x0, None, None, 1.0, 0.0, convection=False)
    got = restrict_rhs(channel2d, b_fine, 1, 1)
    assert np.abs(got - b_coarse).max() < 1e-12 * max(1.0, np.abs(b_coarse).max())


def test_pi_fixes_linear_fields(channel2d):
    s = FeSpace(channel2d, 0)
    u = 2.0 * s.nodes[:, 0] + 0.3 * s.nodes[:, 1] + 1.0
    assert np.abs(interpolate_linear(s, u) - u).max() < 1e-13


def test_pi_parabola_midpoint():
    h = meshmod.build_template_mesh("box", extent_lo=(0, 0), extent_hi=(1, 1),
                                    n_cells=(1, 1))
    s = FeSpace(h, 0)
    u = s.nodes[:, 0] ** 2
    pu = interpolate_linear(s, u)
    mid = np.nonzero((np.abs(s.nodes[:, 0] - 0.5) < 1e-14)
                     & (np.abs(s.nodes[:, 1]) < 1e-14))[0][0]
    assert u[mid] == 0.25
    assert pu[mid] == 0.5


def test_pi_idempotent(box2d, rng):
    s = FeSpace(box2d, 1)
    u = rng.standard_normal(s.n_nodes)
    once = interpolate_linear(s, u)
    assert np.array_equal(interpolate_linear(s, once), once)


def test_interpolation_converges_order_3():
    errs = []
    for n in (4, 8, 16):
        h = meshmod.build_template_mesh("box", extent_lo=(0, 0), extent_hi=(1, 1),
                                        n_cells=(n, n))
        s = FeSpace(h, 0)
        asm = Assembler(s)
        x = s.zero_state()
        def exact(t, pts):
            out = np.zeros((pts.shape[0], 2))
            out[:, 0] = np.sin(2 * np.pi * pts[:, 0]) * np.cos(np.pi * pts[:, 1])
            out[:, 1] = np.cos(np.pi * pts[:, 0] * pts[:, 1])
            return out
        x.values.reshape(s.n_nodes, 3)[:, 1:] = exact(0.0, s.nodes)
        errs.append(asm.l2_error_velocity(x.values, exact, 0.0))
    slope = np.polyfit(np.log([1 / 4, 1 / 8, 1 / 16]), np.log(errs), 1)[0]
    assert 2.7 < slope < 3.3


def test_ramp_values():
    assert ramp(0.0) == pytest.approx(0.0, abs=1e-15)
    assert ramp(0.1) == pytest.approx(0.5, abs=1e-12)
    assert ramp(0.2) == pytest.approx(1.0, abs=1e-12)
    assert ramp(5.0) == 1.0


def test_inflow_profile_2d_mean_and_max():
    H, vbar = 0.41, 1.3
    prof = inflow_profile(2, vbar, H)
    y = np.linspace(0, H, 2001)
    pts = np.stack([np.zeros_like(y), y], axis=1)
    v = prof(1.0, pts)[:, 0]
    assert abs(np.trapezoid(v, y) / H - vbar) < 1e-6
    assert abs(v.max() - 1.5 * vbar) < 1e-9
    assert prof(0.0, pts)[:, 0].max() == 0.0


def test_inflow_profile_3d_centerline():
    H = 0.41
    prof = inflow_profile(3, 1.0, H)
    v = prof(1.0, np.array([[0.0, H / 2, 0.0]]))
    assert v[0, 0] == pytest.approx(9.0 / 8.0, rel=1e-14)


def test_apply_dirichlet_wall_and_inflow(cylinder2d):
    s = FeSpace(cylinder2d, 1)
    bcs = benchmark_bcs(2, 1.0, 0.41)
    x = s.zero_state()
    apply_dirichlet(s, x, 1.0, bcs)
    _, v = s.split(x.values)
    wall = s.nodes_with_tag(meshmod.WALL)
    obst = s.nodes_with_tag(meshmod.OBSTACLE)
    infl = s.nodes_with_tag(meshmod.INFLOW)
    assert np.abs(v[wall]).max() == 0.0
    assert np.abs(v[obst]).max() == 0.0
    y = s.nodes[infl, 1]
    want = 1.5 * y * (0.41 - y) / 0.205 ** 2
    assert np.abs(v[infl, 0] - want).max() < 1e-13


def test_dirichlet_mask_covers_velocity_only(cylinder2d):
    s = FeSpace(cylinder2d, 0)
    mask = s.dirichlet_mask()
    m = mask.reshape(s.n_nodes, s.n_comp)
    assert not np.any(m[:, 0])           # pressure never constrained
    tagged = np.isin(s.node_tags, (meshmod.INFLOW, meshmod.WALL, meshmod.OBSTACLE))
    assert np.array_equal(m[:, 1], tagged)
    assert np.array_equal(m[:, 2], tagged)
    assert s.has_outflow
