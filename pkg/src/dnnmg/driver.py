"""Time stepping: pure multigrid runs and the hybrid network-corrected loop.

One hybrid step: Newton-solve the coarse system, prolongate to the fine
level, evaluate the fine residual against the stored fine right-hand side,
predict the patchwise velocity correction, assemble the next right-hand side
from the corrected velocity on the fine level and restrict it back.  The
fine right-hand side is kept across steps: the residual of step n is formed
against exactly the vector stored at step n-1, never recomputed.
"""

import time as _time
import numpy as np
from dataclasses import dataclass, field

from . import mesh as meshmod
from . import space as spmod
from . import patch_ops
from .assembly import Assembler
from .msolve import (NewtonSettings, MgSettings, GmresSettings, newton_solve,
                     VankaData, LevelSystem, MgPreconditioner, MgGmresSolver,
                     DirectSolver)


class NsProblem:
    """Everything fixed for one configuration: mesh, spaces, BCs, physics."""

    def __init__(self, hierarchy, nu, k, bcs, f=None, alpha0=0.02, delta0=0.1,
                 newton=None, mg=None, gmres=None, linear_solver="mg_gmres",
                 mg_coarse_level=0, convection=True, reimpose_fine_dirichlet=True):
        self.hierarchy = hierarchy
        self.nu, self.k = nu, k
        self.bcs = bcs
        self.f = f                      # callable(t, pts) -> (n, d) or None
        self.alpha0, self.delta0 = alpha0, delta0
        self.newton = newton or NewtonSettings()
        self.mg = mg or MgSettings()
        self.gmres = gmres or GmresSettings()
        self.linear_solver = linear_solver
        self.mg_coarse_level = mg_coarse_level
        self.convection = convection
        self.reimpose_fine_dirichlet = reimpose_fine_dirichlet
        self._spaces = {}
        self._asms = {}
        self._masks = {}

    def space(self, level):
        if level not in self._spaces:
            self._spaces[level] = spmod.FeSpace(self.hierarchy, level)
        return self._spaces[level]

    def asm(self, level):
        if level not in self._asms:
            self._asms[level] = Assembler(self.space(level))
        return self._asms[level]

    def mask(self, level):
        """Constrained dofs: Dirichlet velocity plus a pressure pin if Gamma_N
        is empty (scalar node 0 persists across levels)."""
        if level not in self._masks:
            s = self.space(level)
            m = s.dirichlet_mask(tuple(self.bcs.keys()))
            if not s.has_outflow:
                m[0] = True
            self._masks[level] = m
        return self._masks[level]

    def f_nodal(self, level, t):
        if self.f is None:
            return None
        return np.asarray(self.f(t, self.space(level).nodes), dtype=float)

    def normalize_pressure(self, level, values):
        """Post-hoc shift to a mean-zero pressure when no outflow exists."""
        s = self.space(level)
        if s.has_outflow:
            return values
        w = self.asm(level).scalar_volume_weights()
        p = values.reshape(s.n_nodes, s.n_comp)[:, 0]
        p -= (w @ p) / w.sum()
        return values

    # -- linear solver construction ---------------------------------------------

    def build_solver(self, level, x_values, stab=None):
        """Linear solver for the Jacobian at a state (MG-preconditioned GMRES
        by default; sparse LU in 'direct' mode).

        The top-level Jacobian must use the same frozen stabilization
        parameters as the residual it serves; coarser preconditioner levels
        recompute them from the injected state.
        """
        asm = self.asm(level)
        if stab is None:
            stab = asm.stab(x_values, self.nu, self.k, self.alpha0, self.delta0)
        J = asm.assemble_jacobian(x_values, self.k, self.nu, stab,
                                  mask=self.mask(level),
                                  convection=self.convection)
        if self.linear_solver == "direct":
            return DirectSolver(J)
        systems = []
        lo = self.mg_coarse_level
        xl = x_values
        levels = list(range(level, lo - 1, -1))
        per_level = {level: J}
        for l in levels[1:]:
            xl = xl[:self.space(l).ndof]
            asml = self.asm(l)
            stabl = asml.stab(xl, self.nu, self.k, self.alpha0, self.delta0)
            per_level[l] = asml.assemble_jacobian(xl, self.k, self.nu, stabl,
                                                  mask=self.mask(l),
                                                  convection=self.convection)
        for l in range(lo, level + 1):
            systems.append(LevelSystem(per_level[l],
                                       VankaData(self.asm(l), per_level[l]),
                                       self.mask(l)))
        prolongs = [spmod.full_prolongation(self.hierarchy, l, self.space(l).n_comp)
                    for l in range(lo, level)]
        mg = MgPreconditioner(systems, prolongs, self.mg)
        return MgGmresSolver(J, mg, self.gmres)

    # -- one implicit solve --------------------------------------------------------

    def solve_step(self, level, x_prev, b, t, solver=None):
        """Newton-solve the implicit system at time t from warm start x_prev."""
        asm = self.asm(level)
        mask = self.mask(level)
        stab = asm.stab(x_prev.values, self.nu, self.k, self.alpha0, self.delta0)
        x0 = x_prev.copy()
        spmod.apply_dirichlet(self.space(level), x0, t, self.bcs)

        def residual_fn(xv):
            return asm.assemble_residual(xv, b, self.k, self.nu, stab, mask=mask,
                                         convection=self.convection)

        def jacobian_fn(xv):
            return self.build_solver(level, xv, stab=stab)

        xv, stats, solver = newton_solve(x0.values, residual_fn, jacobian_fn,
                                         self.newton, solver=solver)
        self.normalize_pressure(level, xv)
        return spmod.StateVector(level, xv, t), stats, solver


@dataclass
class TimeLoopState:
    n: int
    t: float
    x: spmod.StateVector                  # coarse (solve-level) state
    b_next: np.ndarray                    # RHS for the coming step, solve level
    x_fine: spmod.StateVector = None      # corrected fine state (hybrid mode)
    b_next_fine: np.ndarray = None
    prev_x: spmod.StateVector = None      # last step's state (functionals)
    prev_x_fine: spmod.StateVector = None


@dataclass
class StepStats:
    n: int = 0
    t: float = 0.0
    newton_iterations: int = 0
    gmres_iterations: int = 0
    jacobian_builds: int = 0
    wall_time: float = 0.0
    net_time: float = 0.0
    net_evals: int = 0


class TimeLoop:
    """Sequential time loop; pure-MG at one level or hybrid over (L, L+J).

    correction_start delays the network corrections until the flow enters
    the regime covered by the training data (before that the hybrid step is
    exactly the zero-correction step); correction_scale damps the applied
    defect.
    """

    def __init__(self, problem, level, J=0, model=None, initial=None,
                 correction_scale=1.0, correction_start=0.0):
        self.problem = problem
        self.level = level
        self.J = J
        self.model = model
        self.correction_scale = correction_scale
        self.correction_start = correction_start
        self.patchset = None
        if J > 0:
            self.patchset = meshmod.build_patches(problem.hierarchy, level, J)
        self.solver = None
        self.net_evals = 0
        self.state = self._initial_state(initial)
        self.step_log = []

    @property
    def fine_level(self):
        return self.level + self.J

    def _initial_state(self, initial):
        pr = self.problem
        s = pr.space(self.level)
        x0 = s.zero_state()
        if initial is not None:
            vals = initial(0.0, s.nodes)
            x0.values.reshape(s.n_nodes, s.n_comp)[:, 1:] = vals
        spmod.apply_dirichlet(s, x0, 0.0, pr.bcs)
        if self.J == 0:
            b = pr.asm(self.level).assemble_rhs_next(
                x0.values, pr.f_nodal(self.level, 0.0),
                pr.f_nodal(self.level, pr.k), pr.k, pr.nu,
                convection=pr.convection)
            return TimeLoopState(0, 0.0, x0, b)
        fl = self.fine_level
        xf = spmod.prolongate(pr.hierarchy, x0, self.J)
        if pr.reimpose_fine_dirichlet:
            spmod.apply_dirichlet(pr.space(fl), xf, 0.0, pr.bcs)
        bf = pr.asm(fl).assemble_rhs_next(
            xf.values, pr.f_nodal(fl, 0.0), pr.f_nodal(fl, pr.k), pr.k, pr.nu,
            convection=pr.convection)
        b = spmod.restrict_rhs(pr.hierarchy, bf, fl, self.J)
        return TimeLoopState(0, 0.0, x0, b, x_fine=xf, b_next_fine=bf)

    # -- steps -------------------------------------------------------------------

    def step(self):
        t0 = _time.perf_counter()
        if self.J == 0:
            stats = self._step_mg()
        else:
            stats = self._step_hybrid()
        stats.wall_time = _time.perf_counter() - t0
        self.step_log.append(stats)
        return self.state

    def _step_mg(self):
        pr, st, l = self.problem, self.state, self.level
        t_next = round(st.t / pr.k + 1) * pr.k
        x, nstats, self.solver = pr.solve_step(l, st.x, st.b_next, t_next,
                                               solver=self.solver)
        b = pr.asm(l).assemble_rhs_next(x.values, pr.f_nodal(l, t_next),
                                        pr.f_nodal(l, t_next + pr.k), pr.k, pr.nu,
                                        convection=pr.convection)
        self.state = TimeLoopState(st.n + 1, t_next, x, b, prev_x=st.x)
        return StepStats(st.n + 1, t_next, nstats.iterations,
                         nstats.gmres_iterations, nstats.jacobian_builds)

    def _step_hybrid(self):
        pr, st, L = self.problem, self.state, self.level
        fl = self.fine_level
        t_next = round(st.t / pr.k + 1) * pr.k
        x, nstats, self.solver = pr.solve_step(L, st.x, st.b_next, t_next,
                                               solver=self.solver)
        xt = spmod.prolongate(pr.hierarchy, x, self.J)
        if pr.reimpose_fine_dirichlet:
            spmod.apply_dirichlet(pr.space(fl), xt, t_next, pr.bcs)
        asm_f = pr.asm(fl)
        stab_f = asm_f.stab(xt.values, pr.nu, pr.k, pr.alpha0, pr.delta0)
        r = asm_f.assemble_residual(xt.values, st.b_next_fine, pr.k, pr.nu,
                                    stab_f, mask=pr.mask(fl),
                                    convection=pr.convection)
        net_time = 0.0
        x_corr = xt.values
        if self.model is not None and t_next >= self.correction_start - 1e-12:
            tn = _time.perf_counter()
            d = patch_ops.predict_correction(self.model, xt.values, r,
                                             self.patchset,
                                             dirichlet_mask=pr.mask(fl))
            net_time = _time.perf_counter() - tn
            self.net_evals += 1
            x_corr = xt.values + self.correction_scale * d
        bf = asm_f.assemble_rhs_next(x_corr, pr.f_nodal(fl, t_next),
                                     pr.f_nodal(fl, t_next + pr.k), pr.k, pr.nu,
                                     convection=pr.convection)
        b = spmod.restrict_rhs(pr.hierarchy, bf, fl, self.J)
        xf = spmod.StateVector(fl, x_corr, t_next)
        self.state = TimeLoopState(st.n + 1, t_next, x, b, x_fine=xf,
                                   b_next_fine=bf, prev_x=st.x,
                                   prev_x_fine=st.x_fine)
        return StepStats(st.n + 1, t_next, nstats.iterations,
                         nstats.gmres_iterations, nstats.jacobian_builds,
                         net_time=net_time,
                         net_evals=1 if self.model is not None else 0)

    def run(self, n_steps, callback=None):
        for _ in range(n_steps):
            self.step()
            if callback is not None:
                callback(self)
        return self.state


# -- training data -----------------------------------------------------------------

def steps_in_interval(interval, k, n_max):
    """Step indices with lo < n*k <= hi (the half-open measurement windows)."""
    lo, hi = interval
    eps = 1e-9 * k
    return [n for n in range(1, n_max + 1)
            if n * k > lo + eps and n * k <= hi + eps]


def replay_features(problem, L, J, coarse_values, b_fine, t):
    """One step of the hybrid machinery without a model: (x_tilde, residual).

    The coarse state is embedded into level L+J (boundary data re-imposed
    exactly as the time loop does) and the residual is formed against the
    fine right-hand side carried over from the previous replayed step.
    """
    pr = problem
    fl = L + J
    xt = embed_state(pr, L, J, coarse_values, t)
    asm_f = pr.asm(fl)
    stab_f = asm_f.stab(xt, pr.nu, pr.k, pr.alpha0, pr.delta0)
    r = asm_f.assemble_residual(xt, b_fine, pr.k, pr.nu, stab_f,
                                mask=pr.mask(fl), convection=pr.convection)
    return xt, r


def export_training_data(problem, L, J, coarse_traj, fine_traj, t_train, t_val,
                         out_dir, shard_bytes=256 * 2 ** 20, loop_pass=False):
    """Build the (features, targets) dataset from a coarse and a fine run.

    Both trajectories must share the time step, geometry and ramp; the fine
    run lives on level L+J (or on L, in which case states are compared
    as-is, the self-consistency case).  For every step inside the half-open
    intervals the hybrid machinery is replayed without a model to produce the
    prolongated state and fine residual; targets are the per-patch velocity
    differences to the fine run.  Shards and a JSON statistics sidecar are
    written through the io module.

    loop_pass additionally replays the hybrid loop with the ideal (oracle)
    correction and appends its feature rows: under working corrections the
    loop sees states much closer to the reference than the plain coarse
    trajectory, and training on both ends of that path keeps the closed loop
    inside the training distribution.
    """
    from . import io as iomod
    pr = problem
    if abs(coarse_traj.k - fine_traj.k) > 1e-14:
        raise ValueError("runs do not share the time step size")
    fl = L + J
    if fine_traj.level != fl:
        raise ValueError(f"fine run level {fine_traj.level} incompatible with "
                         f"L={L}, J={J}")
    # self-consistency case: the fine run paired with itself, targets vanish
    same_level = coarse_traj.level == fl
    if not same_level and coarse_traj.level != L:
        raise ValueError(f"coarse run level {coarse_traj.level} != L={L}")
    patchset = meshmod.build_patches(pr.hierarchy, L, J)
    n_max = min(coarse_traj.n_steps, fine_traj.n_steps)
    sets = {}
    for name, interval in (("train", t_train), ("val", t_val)):
        steps = steps_in_interval(interval, pr.k, n_max)
        feats, targs = [], []
        for n in steps:
            xc = coarse_traj.values(n)
            if same_level:
                xt, r = xc, np.zeros_like(xc)
            else:
                xp = embed_state(pr, L, J, coarse_traj.values(n - 1), (n - 1) * pr.k)
                b_prev = pr.asm(fl).assemble_rhs_next(
                    xp, pr.f_nodal(fl, (n - 1) * pr.k), pr.f_nodal(fl, n * pr.k),
                    pr.k, pr.nu, convection=pr.convection)
                xt, r = replay_features(pr, L, J, xc, b_prev, n * pr.k)
            feats.append(patch_ops.assemble_network_input(xt, r, patchset))
            targs.append(patch_ops.patch_targets(fine_traj.values(n), xt, patchset))
        sets[name] = [feats, targs]
    if loop_pass and not same_level:
        lo = min(t_train[0], t_val[0])
        hi = max(t_train[1], t_val[1])
        n_lo = steps_in_interval((lo, hi), pr.k, n_max)[0]
        loop_rows = oracle_loop_features(pr, L, J, coarse_traj, fine_traj,
                                         n_lo - 1, (lo, hi), patchset)
        for name, interval in (("train", t_train), ("val", t_val)):
            wanted = set(steps_in_interval(interval, pr.k, n_max))
            for n, X, T in loop_rows:
                if n in wanted:
                    sets[name][0].append(X)
                    sets[name][1].append(T)
    out_sets = {}
    for name, (feats, targs) in sets.items():
        out_sets[name] = (np.concatenate(feats) if feats else np.zeros((0, 0)),
                          np.concatenate(targs) if targs else np.zeros((0, 0)))
    return iomod.write_dataset(out_dir, out_sets, patchset, pr,
                               shard_bytes=shard_bytes)


def oracle_loop_features(problem, L, J, coarse_traj, fine_traj, n_start,
                         interval, patchset):
    """Hybrid-loop features under the exact correction, per step.

    Starts from the coarse run's state at n_start and steps the hybrid loop
    applying the ideal velocity defect (reference minus embedded state) as
    the correction; returns (n, features, targets) triples for steps with
    n*k inside the interval.
    """
    pr = problem
    fl = L + J
    mask = pr.mask(fl)
    x = spmod.StateVector(L, coarse_traj.values(n_start).copy(),
                          n_start * pr.k)
    xf = embed_state(pr, L, J, x.values, x.time)
    bf = pr.asm(fl).assemble_rhs_next(
        xf, pr.f_nodal(fl, x.time), pr.f_nodal(fl, x.time + pr.k), pr.k, pr.nu,
        convection=pr.convection)
    b = spmod.restrict_rhs(pr.hierarchy, bf, fl, J)
    solver = None
    out = []
    n = n_start
    eps = 1e-9 * pr.k
    while (n + 1) * pr.k <= interval[1] + eps and n + 1 <= fine_traj.n_steps:
        n += 1
        t = n * pr.k
        x, _, solver = pr.solve_step(L, x, b, t, solver=solver)
        xt = embed_state(pr, L, J, x.values, t)
        asm_f = pr.asm(fl)
        stab_f = asm_f.stab(xt, pr.nu, pr.k, pr.alpha0, pr.delta0)
        r = asm_f.assemble_residual(xt, bf, pr.k, pr.nu, stab_f, mask=mask,
                                    convection=pr.convection)
        X = patch_ops.assemble_network_input(xt, r, patchset)
        T = patch_ops.patch_targets(fine_traj.values(n), xt, patchset)
        out.append((n, X, T))
        d = fine_traj.values(n) - xt
        dm = d.reshape(-1, pr.space(fl).n_comp)
        dm[:, 0] = 0.0
        d = dm.reshape(-1)
        d[mask] = 0.0
        x_corr = xt + d
        bf = asm_f.assemble_rhs_next(x_corr, pr.f_nodal(fl, t),
                                     pr.f_nodal(fl, t + pr.k), pr.k, pr.nu,
                                     convection=pr.convection)
        b = spmod.restrict_rhs(pr.hierarchy, bf, fl, J)
    return out


def _prolong_values(problem, L, J, values):
    n_comp = problem.space(L).n_comp
    out = values
    for l in range(L, L + J):
        out = spmod.full_prolongation(problem.hierarchy, l, n_comp) @ out
    return out


# -- run orchestration --------------------------------------------------------------

def checkpoint_state(loop):
    """Arrays + meta needed to resume a loop exactly."""
    st = loop.state
    arrays = {"x": st.x.values, "b_next": st.b_next}
    if st.x_fine is not None:
        arrays["x_fine"] = st.x_fine.values
        arrays["b_next_fine"] = st.b_next_fine
    meta = {"level": loop.level, "J": loop.J, "n": st.n, "t": st.t}
    return st.n, st.t, arrays, meta


def resume_loop(problem, ckpt_path, model=None, J=None):
    """TimeLoop continued from a checkpoint file.

    A pure-MG checkpoint can be resumed as a hybrid loop (J given): the fine
    right-hand-side history is rebuilt from the embedded coarse state, which
    is exactly what a zero-correction hybrid run would carry.
    """
    from . import io as iomod
    step, t, arrays, meta = iomod.load_checkpoint(ckpt_path)
    to_hybrid = J is not None and J > 0 and meta["J"] == 0
    loop = TimeLoop(problem, meta["level"], J if J is not None else meta["J"],
                    model=model)
    x = spmod.StateVector(meta["level"], arrays["x"].copy(), t)
    st = TimeLoopState(step, t, x, arrays["b_next"].copy())
    if "x_fine" in arrays:
        st.x_fine = spmod.StateVector(meta["level"] + meta["J"],
                                      arrays["x_fine"].copy(), t)
        st.b_next_fine = arrays["b_next_fine"].copy()
    elif to_hybrid:
        pr = problem
        L, fl = meta["level"], meta["level"] + J
        xf = embed_state(pr, L, J, x.values, t)
        st.x_fine = spmod.StateVector(fl, xf, t)
        st.b_next_fine = pr.asm(fl).assemble_rhs_next(
            xf, pr.f_nodal(fl, t), pr.f_nodal(fl, t + pr.k), pr.k, pr.nu,
            convection=pr.convection)
        st.b_next = spmod.restrict_rhs(pr.hierarchy, st.b_next_fine, fl, J)
    loop.state = st
    return loop


def run_simulation(cfg, out_dir=None, resume=None, quiet=False):
    """Execute a configured run and write all artifacts into out_dir.

    Modes mg/dnnmg time-step to t_end writing per-step functionals and
    solver statistics, an optional trajectory of the observed state (fine
    corrected state in hybrid mode), VTK snapshots and checkpoints.
    Returns a summary dict.
    """
    from pathlib import Path
    from . import io as iomod
    from . import post as postmod
    from . import net as netmod
    from . import config as cfgmod

    mode = cfg.run["mode"]
    if mode not in ("mg", "dnnmg"):
        raise ValueError(f"run_simulation handles mg/dnnmg, not '{mode}'")
    L = cfg.discretization["L"]
    J = cfg.discretization["J"] if mode == "dnnmg" else 0
    out = Path(out_dir if out_dir is not None else cfg.run["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    hierarchy = cfgmod.build_mesh(cfg, L + J)
    problem = cfgmod.build_problem(cfg, hierarchy)
    model = None
    if mode == "dnnmg" and cfg.network["model"]:
        model = netmod.load_model(cfg.network["model"])
    inputs = {}
    if mode == "dnnmg" and cfg.network["model"]:
        inputs["model"] = cfg.network["model"]
    iomod.write_manifest(out, cfg.echo(), inputs)
    if resume is not None:
        loop = resume_loop(problem, resume, model=model)
        loop.correction_scale = cfg.network["correction_scale"]
        loop.correction_start = cfg.network["correction_start"]
    else:
        loop = TimeLoop(problem, L, J, model=model,
                        correction_scale=cfg.network["correction_scale"],
                        correction_start=cfg.network["correction_start"])
    obs_level = L + J
    space_obs = problem.space(obs_level)
    n_steps = int(round(cfg.time["t_end"] / cfg.time["k"]))
    traj = None
    if cfg.run["save_trajectory"]:
        tmode = "ab" if resume is not None else "wb"
        if resume is None:
            traj = iomod.TrajectoryWriter(out / "trajectory.dmgt", obs_level,
                                          space_obs.ndof, cfg.time["k"])
            x_obs = loop.state.x_fine if J else loop.state.x
            traj.append(0, 0.0, x_obs.values)
        else:
            traj = _reopen_trajectory(out / "trajectory.dmgt", loop.state.n)
    func_rows = []
    stat_rows = []
    asm_obs = problem.asm(obs_level)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "vtk").mkdir(exist_ok=True)
    while loop.state.n < n_steps:
        loop.step()
        st = loop.state
        log = loop.step_log[-1]
        x_obs = st.x_fine if J else st.x
        xp_obs = st.prev_x_fine if J else st.prev_x
        try:
            drag, lift = postmod.drag_lift(
                asm_obs, x_obs, problem.nu,
                f_nodal=problem.f_nodal(obs_level, st.t),
                x_prev=xp_obs, k=problem.k)
        except ValueError:
            drag, lift = float("nan"), float("nan")
        func_rows.append((st.t, drag, lift, mode, obs_level))
        stat_rows.append((st.n, st.t, log.newton_iterations, log.gmres_iterations,
                          log.jacobian_builds, f"{log.wall_time:.6f}",
                          f"{log.net_time:.6f}"))
        if traj is not None:
            traj.append(st.n, st.t, x_obs.values)
        if cfg.run["vtk_every"] and st.n % cfg.run["vtk_every"] == 0:
            iomod.write_vtk(space_obs, x_obs, out / "vtk" / f"state_{st.n:06d}.vtk")
        if cfg.run["checkpoint_every"] and st.n % cfg.run["checkpoint_every"] == 0:
            n_, t_, arrays_, meta_ = checkpoint_state(loop)
            iomod.save_checkpoint(out / "checkpoints" / f"ckpt_{st.n:06d}.dmgc",
                                  n_, t_, arrays_, meta_)
        if not quiet and st.n % max(1, n_steps // 20) == 0:
            print(f"  step {st.n}/{n_steps}  t={st.t:.3f}  drag={drag:.4f} "
                  f"lift={lift:.5f}  [{log.wall_time:.2f}s]", flush=True)
    if traj is not None:
        traj.close()
    iomod.write_csv(out / "functionals.csv", ("t", "drag", "lift", "method", "level"),
                    func_rows)
    iomod.write_csv(out / "solver_stats.csv",
                    ("n", "t", "newton", "gmres", "jacobians", "wall_time", "net_time"),
                    stat_rows)
    n_, t_, arrays_, meta_ = checkpoint_state(loop)
    iomod.save_checkpoint(out / "checkpoints" / "final.dmgc", n_, t_, arrays_, meta_)
    wall = [s.wall_time for s in loop.step_log]
    nets = [s.net_time for s in loop.step_log]
    summary = {
        "mode": mode, "level": L, "J": J, "steps": loop.state.n,
        "t_end": loop.state.t, "net_evals": loop.net_evals,
        "mean_step_wall": float(np.mean(wall)) if wall else 0.0,
        "mean_net_time": float(np.mean(nets)) if nets else 0.0,
        "mean_newton": float(np.mean([s.newton_iterations for s in loop.step_log])),
        "mean_gmres_per_newton": float(
            sum(s.gmres_iterations for s in loop.step_log)
            / max(1, sum(s.newton_iterations for s in loop.step_log))),
    }
    (out / "summary.json").write_text(__import__("json").dumps(summary, indent=1))
    return summary


def _reopen_trajectory(path, n_done):
    """Append-mode trajectory writer positioned after step n_done."""
    from . import io as iomod
    existing = iomod.Trajectory(path)
    if existing.n_records != n_done + 1:
        raise ValueError("trajectory file does not match the checkpoint")
    ndof, k, level = existing.ndof, existing.k, existing.level
    del existing
    w = iomod.TrajectoryWriter.__new__(iomod.TrajectoryWriter)
    w.path = path
    w.ndof = ndof
    w.f = open(path, "ab")
    w.count = n_done + 1
    return w


def embed_state(problem, L, J, values, t):
    """Prolongate coarse values to L+J and re-impose the boundary data."""
    pr = problem
    out = _prolong_values(pr, L, J, values)
    if pr.reimpose_fine_dirichlet:
        xs = spmod.StateVector(L + J, out, t)
        spmod.apply_dirichlet(pr.space(L + J), xs, t, pr.bcs)
        out = xs.values
    return out
