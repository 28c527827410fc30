"""File formats: legacy VTK, checkpoints, state trajectories, datasets.

All binary payloads are little-endian float64 behind versioned magic bytes;
readers reject unknown magics/versions.  Large state series are written as
append-only trajectory files and read back through memory maps.
"""

import csv
import json
import struct
import hashlib
from pathlib import Path

import numpy as np

from .elements import lattice
from . import mesh as meshmod

_CKPT_MAGIC, _CKPT_VERSION = b"DMGC", 1
_TRAJ_MAGIC, _TRAJ_VERSION = b"DMGT", 1
_DATA_MAGIC, _DATA_VERSION = b"DMGD", 1


# -- legacy VTK -------------------------------------------------------------------

# tensor-corner -> VTK corner order
_VTK_QUAD = (0, 1, 3, 2)
_VTK_HEX = (0, 1, 3, 2, 4, 5, 7, 6)


def write_vtk(space, state, path):
    """Legacy ASCII VTK snapshot: velocity vectors and pressure point data.

    Each Q2 cell is written as its 2^d linear sub-cells over the scalar
    nodes, so the point count equals the scalar node count.  Output is
    byte-deterministic for identical states.
    """
    dim = space.dim
    pts = space.nodes
    p, v = space.split(state.values)
    lat3 = {tuple(ix): a for a, ix in enumerate(lattice(dim, 3))}
    octs = lattice(dim, 2)
    sub = []
    corners = lattice(dim, 2)
    for o in octs:
        sub.append([lat3[tuple(o + c)] for c in corners])
    order = _VTK_QUAD if dim == 2 else _VTK_HEX
    vtk_type = 9 if dim == 2 else 12
    lines = ["# vtk DataFile Version 3.0",
             f"dnnmg state level {state.level} t={state.time!r}",
             "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {pts.shape[0]} double"]
    for row in pts:
        xyz = list(row) + [0.0] * (3 - dim)
        lines.append(" ".join(f"{c:.17g}" for c in xyz))
    cells = []
    for cn in space.cell_nodes:
        for s in sub:
            ids = [cn[s[j]] for j in order]
            cells.append("%d %s" % (len(ids), " ".join(map(str, ids))))
    lines.append(f"CELLS {len(cells)} {len(cells) * (2 ** dim + 1)}")
    lines += cells
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += [str(vtk_type)] * len(cells)
    lines.append(f"POINT_DATA {pts.shape[0]}")
    lines.append("VECTORS velocity double")
    for row in v:
        xyz = list(row) + [0.0] * (3 - dim)
        lines.append(" ".join(f"{c:.17g}" for c in xyz))
    lines.append("SCALARS pressure double 1")
    lines.append("LOOKUP_TABLE default")
    lines += [f"{c:.17g}" for c in p]
    Path(path).write_text("\n".join(lines) + "\n")


def read_vtk(path):
    """Minimal legacy-VTK reader (round-trip checks and tooling)."""
    toks = Path(path).read_text().split("\n")
    i = 0
    out = {}
    while i < len(toks):
        line = toks[i].split()
        if not line:
            i += 1
            continue
        key = line[0]
        if key == "POINTS":
            n = int(line[1])
            out["points"] = np.array([list(map(float, toks[i + 1 + j].split()))
                                      for j in range(n)])
            i += n + 1
        elif key == "CELLS":
            n = int(line[1])
            out["cells"] = [list(map(int, toks[i + 1 + j].split()))[1:]
                            for j in range(n)]
            i += n + 1
        elif key == "VECTORS":
            n = out["points"].shape[0]
            out["velocity"] = np.array([list(map(float, toks[i + 1 + j].split()))
                                        for j in range(n)])
            i += n + 1
        elif key == "SCALARS":
            n = out["points"].shape[0]
            out["pressure"] = np.array([float(toks[i + 2 + j]) for j in range(n)])
            i += n + 2
        else:
            i += 1
    return out


# -- checkpoints --------------------------------------------------------------------

def save_checkpoint(path, step, t, arrays, meta=None):
    """Versioned binary checkpoint: named float64 vectors plus a JSON meta."""
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<IQdI", _CKPT_VERSION, step, t, len(meta_b)))
        f.write(meta_b)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode()
            a = np.ascontiguousarray(arr, dtype="<f8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", a.size))
            f.write(a.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version, step, t, metalen = struct.unpack("<IQdI", f.read(24))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(f.read(metalen).decode())
        (count,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(count):
            (nl,) = struct.unpack("<I", f.read(4))
            name = f.read(nl).decode()
            (sz,) = struct.unpack("<Q", f.read(8))
            arrays[name] = np.frombuffer(f.read(8 * sz), dtype="<f8").copy()
    return step, t, arrays, meta


# -- trajectories ----------------------------------------------------------------------

_TRAJ_HDR = struct.Struct("<4sIIQd")       # magic, version, level, ndof, k


class TrajectoryWriter:
    """Append-only state series of one run (step, time, dof vector)."""

    def __init__(self, path, level, ndof, k):
        self.path = Path(path)
        self.ndof = ndof
        self.f = open(path, "wb")
        self.f.write(_TRAJ_HDR.pack(_TRAJ_MAGIC, _TRAJ_VERSION, level, ndof, k))
        self.count = 0

    def append(self, step, t, values):
        if step != self.count:
            raise ValueError(f"trajectory steps must be contiguous "
                             f"(got {step}, expected {self.count})")
        self.f.write(struct.pack("<Qd", step, t))
        self.f.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
        self.count += 1

    def close(self):
        self.f.close()


class Trajectory:
    """Memory-mapped reader of a trajectory file."""

    def __init__(self, path):
        self.path = Path(path)
        with open(path, "rb") as f:
            hdr = f.read(_TRAJ_HDR.size)
        magic, version, self.level, self.ndof, self.k = _TRAJ_HDR.unpack(hdr)
        if magic != _TRAJ_MAGIC:
            raise ValueError(f"not a trajectory file: bad magic {magic!r}")
        if version != _TRAJ_VERSION:
            raise ValueError(f"unsupported trajectory version {version}")
        rec = 16 + 8 * self.ndof
        size = self.path.stat().st_size - _TRAJ_HDR.size
        if size % rec:
            raise ValueError("truncated trajectory file")
        self.n_records = size // rec
        self._mm = np.memmap(path, dtype="<u1", mode="r", offset=_TRAJ_HDR.size)
        self._rec = rec

    @property
    def n_steps(self):
        return self.n_records - 1          # record 0 is the initial state

    def record(self, i):
        off = i * self._rec
        step, t = struct.unpack("<Qd", self._mm[off:off + 16].tobytes())
        vals = np.frombuffer(self._mm[off + 16:off + self._rec].tobytes(),
                             dtype="<f8")
        return step, t, vals

    def values(self, n):
        step, _, vals = self.record(n)
        if step != n:
            raise ValueError("non-contiguous trajectory")
        return vals

    def time(self, n):
        return self.record(n)[1]


# -- datasets -----------------------------------------------------------------------------

_DATA_HDR = struct.Struct("<4sIIIIIIIQ")   # magic, ver, nfeat, ntarg, ndofP, nGeo, d, J, rows


def write_dataset(out_dir, sets, patchset, problem, shard_bytes=256 * 2 ** 20):
    """Sharded binary feature/target rows plus a JSON statistics sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = patchset.dim
    comp_names = ["p"] + [f"v_{'xyz'[i]}" for i in range(d)]
    sidecar = {"layout": {"n_dof_patch": patchset.ndof_patch,
                          "n_geo": int(patchset.n_geo), "dim": d,
                          "J": patchset.J, "L": patchset.L,
                          "feature_order": "state|residual|geometry"},
               "sets": {}}
    files = {}
    for name, (X, T) in sets.items():
        rows, nf = X.shape
        nt = T.shape[1] if T.size else 0
        row_bytes = 8 * (nf + nt)
        per_shard = max(1, shard_bytes // max(row_bytes, 1))
        shard_paths = []
        for s, lo in enumerate(range(0, rows, per_shard)):
            hi = min(rows, lo + per_shard)
            p = out / f"{name}_{s:03d}.dmgd"
            with open(p, "wb") as f:
                f.write(_DATA_HDR.pack(_DATA_MAGIC, _DATA_VERSION, nf, nt,
                                       patchset.ndof_patch, patchset.n_geo,
                                       d, patchset.J, hi - lo))
                block = np.concatenate([X[lo:hi], T[lo:hi]], axis=1)
                f.write(np.ascontiguousarray(block, dtype="<f8").tobytes())
            shard_paths.append(p.name)
        # per physical component statistics over the state block (Table-style)
        stats = {}
        state = X[:, :patchset.ndof_patch].reshape(rows, -1, d + 1) if rows else None
        for c, cname in enumerate(comp_names):
            col = state[:, :, c].reshape(-1) if rows else np.zeros(1)
            stats[cname] = {"max": float(col.max()), "mean": float(col.mean()),
                            "min": float(col.min()), "sigma": float(col.std())}
        sidecar["sets"][name] = {
            "shards": shard_paths, "rows": int(rows),
            "n_features": int(nf), "n_targets": int(nt),
            "component_stats": stats,
            "feature_mean": X.mean(axis=0).tolist() if rows else [],
            "feature_std": X.std(axis=0).tolist() if rows else [],
        }
    (out / "dataset.json").write_text(json.dumps(sidecar, indent=1))
    return out / "dataset.json"


def load_dataset(dataset_json, name):
    """(features, targets) of one named set, concatenated over its shards."""
    meta = json.loads(Path(dataset_json).read_text())
    base = Path(dataset_json).parent
    Xs, Ts = [], []
    for shard in meta["sets"][name]["shards"]:
        with open(base / shard, "rb") as f:
            hdr = _DATA_HDR.unpack(f.read(_DATA_HDR.size))
            if hdr[0] != _DATA_MAGIC:
                raise ValueError(f"not a dataset shard: bad magic {hdr[0]!r}")
            if hdr[1] != _DATA_VERSION:
                raise ValueError(f"unsupported dataset version {hdr[1]}")
            nf, nt, rows = hdr[2], hdr[3], hdr[8]
            block = np.frombuffer(f.read(8 * rows * (nf + nt)),
                                  dtype="<f8").reshape(rows, nf + nt)
        Xs.append(block[:, :nf])
        Ts.append(block[:, nf:])
    X = np.concatenate(Xs)
    T = np.concatenate(Ts)
    return X, T, meta


# -- run artifacts -----------------------------------------------------------------------

def content_hash(data):
    """Git-style blob hash of raw bytes."""
    if isinstance(data, str):
        data = data.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir, cfg_echo, inputs=None):
    """Reproducibility record: config echo plus content hashes of inputs."""
    hashes = {}
    for name, p in (inputs or {}).items():
        p = Path(p)
        if p.exists():
            hashes[name] = content_hash(p.read_bytes())
    doc = {"config": cfg_echo, "input_hashes": hashes}
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def append_csv(path, header, row):
    new = not Path(path).exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(header)
        w.writerow(row)
