"""Text and archive persistence with bitwise-reproducible output.

Trajectories, density fields and coefficient tables are plain text with a
comment header; model archives are zip containers of ``.npy`` members plus a
JSON meta entry, written with fixed zip timestamps so identical inputs give
identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .bd import ParticleConfiguration, Trajectory

_FLOAT_FMT = "%.17g"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def sha256_array(arr: np.ndarray) -> str:
    a = np.ascontiguousarray(arr)
    return sha256_bytes(a.tobytes() + str(a.shape).encode())


def _fmt(x: float) -> str:
    return _FLOAT_FMT % x


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def write_trajectory(path, traj: Trajectory, dt: float, params_hash: str = "") -> None:
    """One file per trajectory: header, then ``time x1 y1 ... xN yN`` rows."""
    n = traj.frames[0].n
    lines = [
        f"# trajectory N={n} dt={_fmt(dt)} save_interval={_fmt(traj.save_interval)} "
        f"params={params_hash or traj.frames[0].params_ref}"
    ]
    for f in traj.frames:
        row = [_fmt(f.time)] + [_fmt(v) for v in f.positions.ravel()]
        lines.append(" ".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory_header(path) -> dict:
    with open(path) as fh:
        header = fh.readline()
    if not header.startswith("# trajectory"):
        raise ValueError(f"{path} is not a trajectory file")
    fields = dict(tok.split("=", 1) for tok in header.split()[2:])
    return {
        "n": int(fields["N"]),
        "dt": float(fields["dt"]),
        "save_interval": float(fields["save_interval"]),
        "params": fields.get("params", ""),
    }


def read_trajectory(path) -> Trajectory:
    meta = read_trajectory_header(path)
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] != 1 + 2 * meta["n"]:
        raise ValueError(
            f"{path}: expected {1 + 2 * meta['n']} columns, got {data.shape[1]}"
        )
    frames = [
        ParticleConfiguration(row[1:].reshape(-1, 2), params_ref=meta["params"],
                              time=row[0])
        for row in data
    ]
    return Trajectory(frames, meta["save_interval"])


# ---------------------------------------------------------------------------
# density fields
# ---------------------------------------------------------------------------

def write_density(path, density) -> None:
    g = density.grid
    header = (
        f"# density G={g.size} xmin={_fmt(g.bounds[0])} xmax={_fmt(g.bounds[1])} "
        f"ymin={_fmt(g.bounds[2])} ymax={_fmt(g.bounds[3])} "
        f"bandwidth={_fmt(density.bandwidth)}"
    )
    body = "\n".join(" ".join(_fmt(v) for v in row) for row in density.values)
    Path(path).write_text(header + "\n" + body + "\n")


def read_density(path):
    from .featurize import DensityField, GridSpec

    with open(path) as fh:
        header = fh.readline()
    if not header.startswith("# density"):
        raise ValueError(f"{path} is not a density file")
    fields = dict(tok.split("=", 1) for tok in header.split()[2:])
    grid = GridSpec(
        (float(fields["xmin"]), float(fields["xmax"]),
         float(fields["ymin"]), float(fields["ymax"])),
        int(fields["G"]),
    )
    values = np.loadtxt(path, ndmin=2)
    return DensityField(values, grid, float(fields["bandwidth"]))


# ---------------------------------------------------------------------------
# generic tables
# ---------------------------------------------------------------------------

def write_table(path, columns: dict, comment: str = "") -> None:
    """Space-delimited text table with a ``# col1 col2 ...`` header line."""
    names = list(columns)
    arrays = [np.asarray(columns[k]) for k in names]
    n = len(arrays[0])
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append("# " + " ".join(names))
    for i in range(n):
        lines.append(" ".join(_fmt(float(a[i])) for a in arrays))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path):
    """Returns (column_names, data array)."""
    names = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                names = line[1:].split()
            else:
                break
    data = np.loadtxt(path, ndmin=2)
    return names, data


# ---------------------------------------------------------------------------
# deterministic archives
# ---------------------------------------------------------------------------

def save_archive(path, arrays: dict, meta: dict) -> None:
    """Zip of .npy members plus meta.json, with pinned timestamps."""
    buf_members = []
    for name in sorted(arrays):
        bio = io.BytesIO()
        np.save(bio, np.ascontiguousarray(arrays[name]))
        buf_members.append((f"{name}.npy", bio.getvalue()))
    meta_bytes = json.dumps(meta, sort_keys=True, indent=1).encode()
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, payload in [("meta.json", meta_bytes)] + buf_members:
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, payload)


def load_archive(path):
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.load(io.BytesIO(zf.read(name)),
                                            allow_pickle=False)
    return arrays, meta
