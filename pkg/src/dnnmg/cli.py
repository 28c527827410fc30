"""Command-line surface: one binary with subcommands.

  dnnmg mesh-info    --config c.toml          mesh/space/patch summary
  dnnmg solve        --config c.toml          pure multigrid run (level L)
  dnnmg dnnmg        --config c.toml          hybrid run (needs a model)
  dnnmg export-data  --config c.toml          training set from two runs
  dnnmg train        --config c.toml          fit a model on a dataset
  dnnmg functionals  RUN_DIR                  recompute drag/lift/spectrum
  dnnmg compare      RUN_A RUN_B              error tables between two runs

All subcommands honor --config and --seed; runs write a manifest that
`functionals` and `compare` use to rebuild the discretization.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import io as iomod


def _load_cfg(args):
    cfg = cfgmod.parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.run["seed"] = args.seed
    return cfg


def _cfg_from_run_dir(run_dir):
    man = json.loads((Path(run_dir) / "manifest.json").read_text())
    doc = {}
    for sec, content in man["config"].items():
        if sec == "derived":
            continue
        doc[sec] = {k: v for k, v in content.items() if v is not None}
    return cfgmod.from_dict(doc)


def cmd_mesh_info(args):
    cfg = _load_cfg(args)
    from . import mesh as meshmod, space as spmod
    L = cfg.discretization["L"]
    J = cfg.discretization["J"]
    h = cfgmod.build_mesh(cfg, L + J)
    print(f"geometry: {cfg.geometry['kind']} (dim {h.dim})")
    if cfg.reynolds is not None:
        print(f"Reynolds number: {cfg.reynolds:g}")
    for l, lvl in enumerate(h.levels):
        s = spmod.FeSpace(h, l)
        print(f"level {l}: {lvl.n_cells} cells, {lvl.n_vertices} vertices, "
              f"{s.n_nodes} scalar nodes, {s.ndof} unknowns")
    if J in (1, 2):
        ps = meshmod.build_patches(h, L, J)
        print(f"patches (L={L}, J={J}): {len(ps)} patches, "
              f"{ps.ndof_patch} dofs/patch, n_geo={ps.n_geo}, "
              f"network {2 * ps.ndof_patch + ps.n_geo} -> "
              f"{(ps.ncomp - 1) * ps.nodes_per_patch}")
    return 0


def cmd_solve(args):
    cfg = _load_cfg(args)
    cfg.run["mode"] = "mg"
    if args.level is not None:
        cfg.discretization["L"] = args.level
    from .driver import run_simulation
    s = run_simulation(cfg, out_dir=args.out, resume=args.resume, quiet=args.quiet)
    print(json.dumps(s, indent=1))
    return 0


def cmd_dnnmg(args):
    cfg = _load_cfg(args)
    cfg.run["mode"] = "dnnmg"
    if args.model is not None:
        cfg.network["model"] = args.model
    if not cfg.network["model"]:
        print("dnnmg: no model file configured (network.model or --model)",
              file=sys.stderr)
        return 1
    from .driver import run_simulation
    s = run_simulation(cfg, out_dir=args.out, resume=args.resume, quiet=args.quiet)
    print(json.dumps(s, indent=1))
    return 0


def cmd_export_data(args):
    cfg = _load_cfg(args)
    from .driver import export_training_data
    L = cfg.discretization["L"]
    J = cfg.discretization["J"]
    ex = cfg.export
    coarse = iomod.Trajectory(Path(ex["coarse_run"]) / "trajectory.dmgt")
    fine = iomod.Trajectory(Path(ex["fine_run"]) / "trajectory.dmgt")
    h = cfgmod.build_mesh(cfg, L + J)
    pr = cfgmod.build_problem(cfg, h)
    out = args.out or ex["out"]
    path = export_training_data(pr, L, J, coarse, fine,
                                tuple(ex["t_train"]), tuple(ex["t_val"]), out,
                                loop_pass=ex["loop_pass"])
    print(f"dataset written: {path}")
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    from . import net as netmod
    from . import mesh as meshmod
    ds = cfg.train["dataset"]
    if not ds:
        print("train: no train.dataset configured", file=sys.stderr)
        return 1
    Xtr, Ttr, meta = iomod.load_dataset(ds, "train")
    Xva, Tva, _ = iomod.load_dataset(ds, "val")
    lay = meta["layout"]
    L, J = cfg.discretization["L"], cfg.discretization["J"]
    h = cfgmod.build_mesh(cfg, L + J)
    ps = meshmod.build_patches(h, L, J)
    want_in = 2 * ps.ndof_patch + ps.n_geo
    want_out = (ps.ncomp - 1) * ps.nodes_per_patch
    if Xtr.shape[1] != want_in or Ttr.shape[1] != want_out:
        print(f"train: dataset widths ({Xtr.shape[1]} -> {Ttr.shape[1]}) do not "
              f"match the configured patch layout ({want_in} -> {want_out}); "
              f"dataset layout: {lay}", file=sys.stderr)
        return 1
    arch = netmod.Architecture(want_in, cfg.network["hidden"],
                               cfg.network["depth"], want_out)
    model = netmod.MlpModel(arch, activation=cfg.network["activation"],
                            seed=cfg.run["seed"])
    tc = netmod.TrainConfig(lr=cfg.train["lr"], batch_size=cfg.train["batch_size"],
                            max_epochs=cfg.train["max_epochs"],
                            weight_decay=cfg.train["weight_decay"],
                            patience=cfg.train["patience"], seed=cfg.run["seed"])
    best, hist = netmod.train(model, (Xtr, Ttr), (Xva, Tva), tc,
                              log_every=0 if args.quiet else 1)
    out = args.out or cfg.network["model"] or "model.bin"
    netmod.save_model(best, out)
    curves = Path(out).with_suffix(".losses.csv")
    iomod.write_csv(curves, ("epoch", "train_loss", "val_loss"),
                    [(i + 1, tr, va) for i, (tr, va)
                     in enumerate(zip(hist["train"], hist["val"]))])
    print(f"model written: {out} (best val loss "
          f"{min(hist['val']):.6e} at epoch {int(np.argmin(hist['val'])) + 1})")
    return 0


def cmd_functionals(args):
    from . import post as postmod, space as spmod
    run = Path(args.run_dir)
    cfg = _cfg_from_run_dir(run)
    traj = iomod.Trajectory(run / "trajectory.dmgt")
    h = cfgmod.build_mesh(cfg, traj.level)
    pr = cfgmod.build_problem(cfg, h)
    asm = pr.asm(traj.level)
    rows = []
    for n in range(1, traj.n_steps + 1):
        x = spmod.StateVector(traj.level, traj.values(n), traj.time(n))
        xp = spmod.StateVector(traj.level, traj.values(n - 1), traj.time(n - 1))
        drag, lift = postmod.drag_lift(asm, x, pr.nu, x_prev=xp, k=pr.k)
        rows.append((x.time, drag, lift, "recomputed", traj.level))
    iomod.write_csv(run / "functionals_recomputed.csv",
                    ("t", "drag", "lift", "method", "level"), rows)
    t = np.array([r[0] for r in rows])
    lift = np.array([r[2] for r in rows])
    window = tuple(args.window or cfg.run["functional_window"])
    sel = (t > window[0] - 1e-12) & (t <= window[1] + 1e-12)
    if sel.sum() >= 16:
        freq, amp = postmod.lift_spectrum(lift[sel], traj.k)
        iomod.write_csv(run / "lift_spectrum.csv", ("freq_hz", "amplitude"),
                        list(zip(freq, amp)))
    for name, series in (("drag", np.array([r[1] for r in rows])), ("lift", lift)):
        mn, mx, mean, amp = postmod.summarize(t, series, window)
        print(f"{name}: min {mn:.5f} max {mx:.5f} mean {mean:.5f} amp {amp:.5f}")
    return 0


def cmd_compare(args):
    from . import post as postmod, space as spmod
    run_a, run_b = Path(args.run_a), Path(args.run_b)
    ta = iomod.Trajectory(run_a / "trajectory.dmgt")
    tb = iomod.Trajectory(run_b / "trajectory.dmgt")
    cfg = _cfg_from_run_dir(run_b if tb.level >= ta.level else run_a)
    if ta.level > tb.level:
        ta, tb = tb, ta
    h = cfgmod.build_mesh(cfg, tb.level)
    pr = cfgmod.build_problem(cfg, h)
    space = pr.space(tb.level)
    embed = None
    if ta.level < tb.level:
        from .driver import _prolong_values
        embed = lambda v: _prolong_values(pr, ta.level, tb.level - ta.level, v)
    err = postmod.trajectory_errors(ta, tb, space, embed=embed)
    rows = [(err["t"][i],
             err["dv"][i] / err["rv"][i] if err["rv"][i] else 0.0,
             err["dp"][i] / err["rp"][i] if err["rp"][i] else 0.0)
            for i in range(err["t"].size)]
    out = Path(args.out) if args.out else run_a / "errors_vs_reference.csv"
    iomod.write_csv(out, ("t", "e_v", "e_p"), rows)
    E_v = postmod.time_integrated_error(err["dv"], err["rv"], ta.k)
    E_p = postmod.time_integrated_error(err["dp"], err["rp"], ta.k)
    print(f"E_v = {E_v:.6e}")
    print(f"E_p = {E_p:.6e}")
    print(f"errors written: {out}")
    return 0


def main(argv=None):
    p = argparse.ArgumentParser(prog="dnnmg", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra):
        sp = sub.add_parser(name)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--quiet", action="store_true")
        return sp

    sp = add("mesh-info", cmd_mesh_info)
    sp.add_argument("--config", required=True)
    for name, fn in (("solve", cmd_solve), ("dnnmg", cmd_dnnmg)):
        sp = add(name, fn)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", default=None)
        sp.add_argument("--resume", default=None)
        if name == "solve":
            sp.add_argument("--level", type=int, default=None)
        else:
            sp.add_argument("--model", default=None)
    sp = add("export-data", cmd_export_data)
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None)
    sp = add("train", cmd_train)
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None)
    sp = add("functionals", cmd_functionals)
    sp.add_argument("run_dir")
    sp.add_argument("--window", type=float, nargs=2, default=None)
    sp = add("compare", cmd_compare)
    sp.add_argument("run_a")
    sp.add_argument("run_b")
    sp.add_argument("--out", default=None)

    args = p.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:                      # CLI boundary: fail with message
        print(f"dnnmg {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
