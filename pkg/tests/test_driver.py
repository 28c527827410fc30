import json
import numpy as np
import pytest

from dnnmg import mesh as meshmod, io as iomod, driver
from dnnmg.space import FeSpace, StateVector, benchmark_bcs, full_prolongation
from dnnmg.msolve import NewtonSettings
from dnnmg.net import Architecture, MlpModel, zero_weights
from dnnmg.driver import (NsProblem, TimeLoop, steps_in_interval,
                          export_training_data, run_simulation, resume_loop,
                          checkpoint_state, embed_state)
from dnnmg import config as cfgmod


def rect_channel(nx=4, ny=1, levels=2, Ly=0.5):
    h = meshmod.build_template_mesh("box", extent_lo=(0, 0), extent_hi=(2.0, Ly),
                                    n_cells=(nx, ny), channel_tags=True)
    for _ in range(levels):
        meshmod.refine_uniform(h)
    return h


def test_zero_inflow_zero_flow():
    h = rect_channel()
    pr = NsProblem(h, nu=1e-2, k=0.05, bcs=benchmark_bcs(2, 0.0, 0.5),
                   linear_solver="direct")
    loop = TimeLoop(pr, level=1, J=0)
    for _ in range(3):
        loop.step()
        assert np.all(loop.state.x.values == 0.0)
        assert loop.step_log[-1].newton_iterations == 0


def test_stokes_limit_reaches_steady_state():
    # the startup ramp must be resolved: Crank-Nicolson is not L-stable and
    # an impulsive start leaves slowly decaying sawtooth modes
    h = rect_channel(levels=1)
    pr = NsProblem(h, nu=1.0, k=0.05, bcs=benchmark_bcs(2, 1.0, 0.5),
                   convection=False, linear_solver="direct",
                   newton=NewtonSettings(tol_rel=1e-12, tol_abs=1e-13))
    loop = TimeLoop(pr, level=0, J=0)
    prev = None
    diff = None
    for _ in range(300):
        loop.step()
        if prev is not None:
            diff = np.abs(loop.state.x.values - prev).max()
        prev = loop.state.x.values.copy()
    assert diff < 1e-10


def test_crank_nicolson_temporal_order():
    """Q2-exact manufactured solution: the only error is the CN time error."""
    g = lambda t: np.sin(t)
    dg = lambda t: np.cos(t)
    nu = 1e-2

    def velocity(t, pts):
        return g(t) * np.stack([pts[:, 1] ** 2, pts[:, 0] ** 2], axis=1)

    def force(t, pts):
        x, y = pts[:, 0], pts[:, 1]
        fx = dg(t) * y ** 2 + g(t) ** 2 * 2 * x ** 2 * y - 2 * nu * g(t)
        fy = dg(t) * x ** 2 + g(t) ** 2 * 2 * x * y ** 2 - 2 * nu * g(t)
        return np.stack([fx, fy], axis=1)

    h = meshmod.build_template_mesh("box", extent_lo=(0, 0), extent_hi=(1, 1),
                                    n_cells=(2, 2))
    meshmod.refine_uniform(h)
    T = 0.5
    errs = []
    for k in (T / 8, T / 16, T / 32):
        pr = NsProblem(h, nu=nu, k=k, bcs={meshmod.WALL: velocity}, f=force,
                       delta0=0.0, linear_solver="direct",
                       newton=NewtonSettings(tol_rel=1e-12, tol_abs=1e-13))
        s = pr.space(1)
        loop = TimeLoop(pr, level=1, J=0,
                        initial=lambda t, pts: velocity(0.0, pts))
        while loop.state.n * k < T - 1e-12:
            loop.step()
        exact = velocity(T, s.nodes)
        got = loop.state.x.values.reshape(s.n_nodes, 3)[:, 1:]
        errs.append(np.abs(got - exact).max())
    r1 = errs[0] / errs[1]
    r2 = errs[1] / errs[2]
    assert 3.3 < r1 < 4.7
    assert 3.3 < r2 < 4.7


def test_zero_correction_equivalence_short():
    """Hybrid loop with a zero-weight model reproduces pure coarse stepping."""
    h = rect_channel()
    bcs = benchmark_bcs(2, 1.0, 0.5)
    kw = dict(nu=1e-2, k=0.05, bcs=bcs, delta0=0.0, linear_solver="direct",
              newton=NewtonSettings(tol_rel=1e-12, tol_abs=1e-14, rho_max=1e-9))
    pr_a = NsProblem(h, **kw)
    mg = TimeLoop(pr_a, level=1, J=0)
    pr_b = NsProblem(h, **kw)
    ps = meshmod.build_patches(h, 1, 1)
    from dnnmg.patch_ops import input_width, output_width
    model = zero_weights(MlpModel(Architecture(input_width(ps), 8, 2,
                                               output_width(ps)), seed=0)).eval()
    hyb = TimeLoop(pr_b, level=1, J=1, model=model)
    for _ in range(4):
        mg.step()
        hyb.step()
        scale = max(1.0, np.linalg.norm(mg.state.x.values))
        assert np.linalg.norm(hyb.state.x.values - mg.state.x.values) < 1e-12 * scale


def test_one_network_evaluation_per_step():
    h = rect_channel()
    pr = NsProblem(h, nu=1e-2, k=0.05, bcs=benchmark_bcs(2, 1.0, 0.5),
                   linear_solver="direct")
    ps = meshmod.build_patches(h, 1, 1)
    from dnnmg.patch_ops import input_width, output_width
    model = MlpModel(Architecture(input_width(ps), 8, 2, output_width(ps)),
                     seed=1).eval()
    loop = TimeLoop(pr, level=1, J=1, model=model)
    for n in range(3):
        loop.step()
        assert loop.net_evals == n + 1
        assert loop.step_log[-1].net_evals == 1


def test_corrected_state_feeds_functionals():
    """With a nonzero model the fine state differs from the embedding."""
    h = meshmod.build_template_mesh("channel_cylinder_2d", growth=2.0)
    meshmod.refine_uniform(h)
    pr = NsProblem(h, nu=1e-3, k=0.05, bcs=benchmark_bcs(2, 1.0, 0.41),
                   linear_solver="direct")
    ps = meshmod.build_patches(h, 0, 1)
    from dnnmg.patch_ops import input_width, output_width
    model = MlpModel(Architecture(input_width(ps), 8, 2, output_width(ps)),
                     seed=1).eval()
    loop = TimeLoop(pr, level=0, J=1, model=model)
    loop.step()
    st = loop.state
    emb = embed_state(pr, 0, 1, st.x.values, st.t)
    assert np.abs(st.x_fine.values - emb).max() > 1e-12
    from dnnmg import post
    d1 = post.drag_lift(pr.asm(1), st.x_fine, pr.nu)
    d0 = post.drag_lift(pr.asm(1), StateVector(1, emb, st.t), pr.nu)
    assert d1 != d0


def test_fine_history_matches_loop_replay():
    """The in-loop features equal the export replay along the same run."""
    h = rect_channel()
    bcs = benchmark_bcs(2, 1.0, 0.5)
    kw = dict(nu=1e-2, k=0.05, bcs=bcs, linear_solver="direct",
              newton=NewtonSettings(tol_rel=1e-12, tol_abs=1e-14, rho_max=1e-9))
    pr = NsProblem(h, **kw)
    loop = TimeLoop(pr, level=1, J=1, model=None)
    states = [loop.state.x.values.copy()]
    feats = []
    for _ in range(3):
        loop.step()
        states.append(loop.state.x.values.copy())
        feats.append(loop.state.b_next_fine.copy())
    pr2 = NsProblem(h, **kw)
    xp = embed_state(pr2, 1, 1, states[2], 2 * pr2.k)
    b_prev = pr2.asm(2).assemble_rhs_next(xp, None, None, pr2.k, pr2.nu)
    xt, r = driver.replay_features(pr2, 1, 1, states[3], b_prev, 3 * pr2.k)
    assert np.abs(b_prev - feats[1]).max() < 1e-12
    assert np.abs(xt - loop.state.x_fine.values).max() < 1e-12


def test_steps_in_interval_counts():
    # (4, 7] at k = 0.008 contains exactly 375 steps
    steps = steps_in_interval((4.0, 7.0), 0.008, 1000)
    assert len(steps) == 375
    assert steps[0] == 501 and steps[-1] == 875


def test_export_sample_counts_and_self_targets(tmp_path):
    h = rect_channel()
    bcs = benchmark_bcs(2, 1.0, 0.5)
    kw = dict(nu=1e-2, k=0.1, bcs=bcs, linear_solver="direct")
    pr = NsProblem(h, **kw)
    # tiny mg runs at both levels, trajectories on disk
    for lvl, name in ((1, "c"), (2, "f")):
        loop = TimeLoop(NsProblem(h, **kw), level=lvl, J=0)
        s = pr.space(lvl)
        w = iomod.TrajectoryWriter(tmp_path / f"{name}.dmgt", lvl, s.ndof, 0.1)
        w.append(0, 0.0, loop.state.x.values)
        for _ in range(8):
            loop.step()
            w.append(loop.state.n, loop.state.t, loop.state.x.values)
        w.close()
    ct = iomod.Trajectory(tmp_path / "c.dmgt")
    ft = iomod.Trajectory(tmp_path / "f.dmgt")
    ds = export_training_data(pr, 1, 1, ct, ft, (0.2, 0.5), (0.5, 0.8),
                              tmp_path / "data")
    X, T, meta = iomod.load_dataset(ds, "train")
    ps = meshmod.build_patches(h, 1, 1)
    assert X.shape[0] == 3 * len(ps)           # N_T * N_patches
    assert X.shape[1] == 2 * ps.ndof_patch + ps.n_geo
    assert T.shape[1] == 18
    # self-consistency: fine run as its own target -> all targets zero
    ds2 = export_training_data(pr, 1, 1, ft, ft, (0.2, 0.5), (0.5, 0.8),
                               tmp_path / "data2")
    _, T2, _ = iomod.load_dataset(ds2, "train")
    assert np.all(T2 == 0.0)
    # statistics sidecar reproduces the dataset's own extrema
    stats = json.loads(ds.read_text())["sets"]["train"]["component_stats"]
    state = X[:, :ps.ndof_patch].reshape(-1, 3)
    assert stats["p"]["max"] == pytest.approx(state[:, 0].max())
    assert stats["v_x"]["min"] == pytest.approx(state[:, 1].min())


def test_restart_determinism(tmp_path):
    doc = {
        "geometry": {"kind": "box", "extent_lo": [0.0, 0.0], "extent_hi": [2.0, 0.5],
                     "n_cells": [4, 1], "channel_tags": True},
        "physics": {"nu": 1e-2, "mean_inflow": 1.0},
        "time": {"k": 0.05, "t_end": 0.3},
        "discretization": {"L": 1, "J": 0},
        "solver": {"linear": "direct", "newton_rho_max": 1e-9,
                   "newton_tol_rel": 1e-11, "newton_tol_abs": 1e-13},
        "run": {"mode": "mg", "checkpoint_every": 3, "save_trajectory": True},
    }
    cfg = cfgmod.from_dict(doc)
    run_simulation(cfg, out_dir=tmp_path / "full", quiet=True)
    # fresh run to t=0.15, then resume to t=0.3
    cfg2 = cfgmod.from_dict({**doc, "time": {"k": 0.05, "t_end": 0.15}})
    run_simulation(cfg2, out_dir=tmp_path / "part", quiet=True)
    cfg3 = cfgmod.from_dict(doc)
    run_simulation(cfg3, out_dir=tmp_path / "part",
                   resume=tmp_path / "part" / "checkpoints" / "ckpt_000003.dmgc",
                   quiet=True)
    ta = iomod.Trajectory(tmp_path / "full" / "trajectory.dmgt")
    tb = iomod.Trajectory(tmp_path / "part" / "trajectory.dmgt")
    assert ta.n_steps == tb.n_steps == 6
    for n in range(7):
        scale = max(1.0, np.abs(ta.values(n)).max())
        assert np.abs(ta.values(n) - tb.values(n)).max() < 1e-12 * scale


def test_reynolds_echo():
    doc = {"geometry": {"kind": "channel_cylinder_2d",
                        "obstacle_axes": [0.05, 0.05]},
           "physics": {"nu": 5e-4, "mean_inflow": 1.0}}
    assert cfgmod.from_dict(doc).reynolds == pytest.approx(200.0)
    doc["geometry"]["obstacle_axes"] = [0.05, 0.06]
    assert cfgmod.from_dict(doc).reynolds == pytest.approx(240.0)


def test_run_simulation_t_zero(tmp_path):
    doc = {
        "geometry": {"kind": "box", "extent_lo": [0.0, 0.0], "extent_hi": [2.0, 0.5],
                     "n_cells": [4, 1], "channel_tags": True},
        "time": {"k": 0.05, "t_end": 0.0},
        "discretization": {"L": 0, "J": 0},
        "solver": {"linear": "direct"},
        "run": {"mode": "mg"},
    }
    s = run_simulation(cfgmod.from_dict(doc), out_dir=tmp_path, quiet=True)
    assert s["steps"] == 0
    traj = iomod.Trajectory(tmp_path / "trajectory.dmgt")
    assert traj.n_records == 1          # only the initial state


def test_resume_mg_checkpoint_as_hybrid(tmp_path):
    h = rect_channel()
    bcs = benchmark_bcs(2, 1.0, 0.5)
    kw = dict(nu=1e-2, k=0.05, bcs=bcs, delta0=0.0, linear_solver="direct",
              newton=NewtonSettings(tol_rel=1e-12, tol_abs=1e-14, rho_max=1e-9))
    pr = NsProblem(h, **kw)
    loop = TimeLoop(pr, level=1, J=0)
    for _ in range(2):
        loop.step()
    n, t, arrays, meta = checkpoint_state(loop)
    iomod.save_checkpoint(tmp_path / "c.dmgc", n, t, arrays, meta)
    hyb = resume_loop(NsProblem(h, **kw), tmp_path / "c.dmgc", model=None, J=1)
    assert hyb.state.b_next_fine is not None
    loop.step()
    hyb.step()
    scale = max(1.0, np.linalg.norm(loop.state.x.values))
    assert np.linalg.norm(hyb.state.x.values - loop.state.x.values) < 1e-12 * scale
