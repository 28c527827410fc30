"""Run configuration: strict TOML parsing with defaults and validation.

Unknown keys are rejected with their full key path; physical and numerical
parameters are range-checked.  The derived Reynolds number (mean inflow times
obstacle height over viscosity) is reported in the config echo.
"""

import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


_num = (int, float)

# section -> key -> (type check, default)
_SCHEMA = {
    "geometry": {
        "kind": (str, "channel_cylinder_2d"),
        "channel": (list, None),
        "obstacle_center": (list, None),
        "obstacle_centers": (list, None),
        "obstacle_axes": (list, None),
        "ring_factor": (_num, 2.0),
        "growth": (_num, 1.6),
        "hmax_factor": (_num, 4.0),
        "nz": (int, 2),
        "extent_lo": (list, None),
        "extent_hi": (list, None),
        "n_cells": (list, None),
        "channel_tags": (bool, True),
    },
    "physics": {
        "nu": (_num, 1e-3),
        "mean_inflow": (_num, 1.0),
    },
    "time": {
        "k": (_num, 0.02),
        "t_end": (_num, 8.0),
    },
    "discretization": {
        "L": (int, 2),
        "J": (int, 1),
        "alpha0": (_num, 0.02),
        "delta0": (_num, 0.1),
    },
    "solver": {
        "linear": (str, "mg_gmres"),
        "newton_rho_max": (_num, 0.1),
        "newton_tol_rel": (_num, 1e-8),
        "newton_tol_abs": (_num, 1e-12),
        "newton_max_iter": (int, 20),
        "gmres_tol": (_num, 1e-4),
        "gmres_restart": (int, 30),
        "gmres_max_iter": (int, 200),
        "mg_pre_smooth": (int, 6),
        "mg_post_smooth": (int, 6),
        "vanka_damping": (_num, 0.7),
    },
    "network": {
        "hidden": (int, 64),
        "depth": (int, 8),
        "activation": (str, "relu"),
        "model": (str, ""),
        "correction_scale": (_num, 1.0),
        "correction_start": (_num, 0.0),
    },
    "train": {
        "lr": (_num, 1e-4),
        "batch_size": (int, 1024),
        "max_epochs": (int, 1000),
        "weight_decay": (_num, 1e-5),
        "patience": (int, 0),
        "dataset": (str, ""),
    },
    "export": {
        "coarse_run": (str, ""),
        "fine_run": (str, ""),
        "t_train": (list, [4.0, 7.0]),
        "t_val": (list, [2.0, 4.0]),
        "out": (str, "dataset"),
        "loop_pass": (bool, False),
    },
    "run": {
        "mode": (str, "mg"),
        "out_dir": (str, "out"),
        "seed": (int, 0),
        "vtk_every": (int, 0),
        "checkpoint_every": (int, 0),
        "save_trajectory": (bool, True),
        "functional_window": (list, [2.0, 8.0]),
    },
}


@dataclass
class RunConfig:
    geometry: dict = field(default_factory=dict)
    physics: dict = field(default_factory=dict)
    time: dict = field(default_factory=dict)
    discretization: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    export: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)

    def __getitem__(self, section):
        return getattr(self, section)

    @property
    def reynolds(self):
        """mean inflow * obstacle height / nu, None without an obstacle."""
        g = self.geometry
        axes = g.get("obstacle_axes")
        if axes is None or g["kind"] == "box":
            return None
        ax = axes[0] if isinstance(axes[0], (list, tuple)) else axes
        height = 2.0 * float(ax[1])
        return self.physics["mean_inflow"] * height / self.physics["nu"]

    def echo(self):
        doc = asdict(self)
        doc["derived"] = {"reynolds": self.reynolds}
        return doc


def _validate(cfg):
    t = cfg.time
    d = cfg.discretization
    if cfg.physics["nu"] <= 0:
        raise ConfigError("physics.nu must be positive")
    if t["k"] <= 0:
        raise ConfigError("time.k must be positive")
    if t["t_end"] < 0:
        raise ConfigError("time.t_end must be non-negative")
    if d["L"] < 0:
        raise ConfigError("discretization.L must be >= 0")
    if d["J"] not in (0, 1, 2):
        raise ConfigError("discretization.J must be 0, 1 or 2")
    mode = cfg.run["mode"]
    if mode not in ("mg", "dnnmg", "export", "train"):
        raise ConfigError(f"run.mode '{mode}' not one of mg|dnnmg|export|train")
    if mode != "mg" and d["J"] == 0 and mode in ("dnnmg", "export"):
        raise ConfigError("discretization.J=0 is only valid in mg mode")
    if cfg.solver["linear"] not in ("mg_gmres", "direct"):
        raise ConfigError("solver.linear must be 'mg_gmres' or 'direct'")
    if not 0 < cfg.solver["newton_rho_max"] < 1:
        raise ConfigError("solver.newton_rho_max must lie in (0, 1)")
    if cfg.solver["mg_pre_smooth"] < 1 or cfg.solver["mg_post_smooth"] < 1:
        raise ConfigError("solver smoothing counts must be >= 1")
    if cfg.network["depth"] < 2:
        raise ConfigError("network.depth must be >= 2")
    if cfg.train["lr"] <= 0 or cfg.train["max_epochs"] < 1:
        raise ConfigError("train.lr must be > 0 and train.max_epochs >= 1")


def from_dict(doc):
    """Build a validated RunConfig from a nested dict (strict keys)."""
    cfg = RunConfig()
    for section, content in doc.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section '{section}'")
        if not isinstance(content, dict):
            raise ConfigError(f"section '{section}' must be a table")
        for key, value in content.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{section}.{key}'")
            want, _ = _SCHEMA[section][key]
            if want is bool:
                ok = isinstance(value, bool)
            elif want is int:
                ok = isinstance(value, int) and not isinstance(value, bool)
            else:
                ok = isinstance(value, want) and not isinstance(value, bool)
            if not ok:
                raise ConfigError(f"'{section}.{key}' has wrong type "
                                  f"{type(value).__name__}")
            getattr(cfg, section)[key] = value
    for section, keys in _SCHEMA.items():
        target = getattr(cfg, section)
        for key, (_, default) in keys.items():
            target.setdefault(key, default)
    _validate(cfg)
    return cfg


def parse_config(path):
    """Parse and validate a TOML run configuration file."""
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return from_dict(doc)


def build_mesh(cfg, top_level):
    """Template mesh from the geometry section, refined to `top_level`."""
    from . import mesh as meshmod
    g = cfg.geometry
    kind = g["kind"]
    kw = {}
    if kind == "box":
        for key in ("extent_lo", "extent_hi", "n_cells", "channel_tags"):
            if g.get(key) is not None:
                kw[key] = tuple(g[key]) if isinstance(g[key], list) else g[key]
    else:
        for src, dst in (("channel", "channel"), ("obstacle_center", "obstacle_center"),
                         ("obstacle_axes", "obstacle_axes"),
                         ("obstacle_centers", "obstacle_centers"),
                         ("ring_factor", "ring_factor"), ("growth", "growth"),
                         ("hmax_factor", "hmax_factor"), ("nz", "nz")):
            if g.get(src) is not None:
                v = g[src]
                kw[dst] = tuple(tuple(x) if isinstance(x, list) else x for x in v) \
                    if isinstance(v, list) else v
    h = meshmod.build_template_mesh(kind, **kw)
    for _ in range(top_level):
        meshmod.refine_uniform(h)
    return h


def build_problem(cfg, hierarchy):
    """NsProblem wired from the config sections."""
    from . import driver, space as spmod
    from .msolve import NewtonSettings, MgSettings, GmresSettings
    s = cfg.solver
    dim = hierarchy.dim
    g = cfg.geometry
    if g["kind"] == "box" and not g["channel_tags"]:
        bcs = {}
    else:
        H = (g["channel"][1] if g.get("channel") else
             (g["extent_hi"][1] - g["extent_lo"][1]) if g.get("extent_hi") else 0.41)
        bcs = spmod.benchmark_bcs(dim, cfg.physics["mean_inflow"], H)
    return driver.NsProblem(
        hierarchy, nu=cfg.physics["nu"], k=cfg.time["k"], bcs=bcs,
        alpha0=cfg.discretization["alpha0"], delta0=cfg.discretization["delta0"],
        newton=NewtonSettings(rho_max=s["newton_rho_max"],
                              tol_rel=s["newton_tol_rel"],
                              tol_abs=s["newton_tol_abs"],
                              max_iter=s["newton_max_iter"]),
        mg=MgSettings(pre_smooth=s["mg_pre_smooth"],
                      post_smooth=s["mg_post_smooth"],
                      vanka_damping=s["vanka_damping"]),
        gmres=GmresSettings(tol_rel=s["gmres_tol"], restart=s["gmres_restart"],
                            max_iter=s["gmres_max_iter"]),
        linear_solver=s["linear"])
