"""File formats: MOIRFLD1 field snapshots, deterministic CSV tables and the run report.

MOIRFLD1 layout (all little-endian):
    8 bytes   b"MOIRFLD1"
    u32       version (1)
    u32       N1
    u32       N2
    u32       ncomp (4 for continuum fields, 1 for lattice states)
    f64 x 4   supercell vectors L1x, L1y, L2x, L2y (Angstrom)
    f64       time (hbar/eV)
    then N1*N2*ncomp complex values as interleaved (re, im) f64, row-major
    over (component, n1, n2).

Lattice states are stored with N1 = number of sites, N2 = 1, zero supercell
vectors, and a sidecar CSV of site positions (tb_sites.csv) in the same
directory giving the site order.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MOIRFLD1"
VERSION = 1
_HEADER = struct.Struct("<8sIIII4dd")


def write_field(path, data, L, t: float) -> Path:
    """data has shape (ncomp, N1, N2)."""
    data = np.asarray(data, complex)
    if data.ndim != 3:
        raise ValueError("field data must have shape (ncomp, N1, N2)")
    ncomp, n1, n2 = data.shape
    L = np.asarray(L, float).reshape(4)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n1, n2, ncomp, *L, float(t)))
        fh.write(np.ascontiguousarray(data).astype("<c16").tobytes())
    return path


def read_field(path):
    """Returns (data (ncomp, N1, N2), L (2, 2), t)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("file too short for a MOIRFLD1 header")
    magic, ver, n1, n2, ncomp, *rest = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if ver != VERSION:
        raise ValueError(f"unsupported version {ver}")
    L = np.array(rest[:4]).reshape(2, 2)
    t = rest[4]
    body = raw[_HEADER.size:]
    if len(body) != 16 * n1 * n2 * ncomp:
        raise ValueError("body size does not match the header")
    data = np.frombuffer(body, "<c16").reshape(ncomp, n1, n2).astype(complex)
    return data, L, t


def write_tb_state(path, psi, t: float) -> Path:
    """Lattice state as a one-component container; site order follows the sidecar."""
    psi = np.asarray(psi, complex)
    return write_field(path, psi.reshape(1, -1, 1), np.zeros((2, 2)), t)


def write_sites(path, sites) -> Path:
    """Sidecar table of site positions for lattice state containers."""
    return write_csv(path, ["x_angstrom", "y_angstrom", "layer_index", "sublattice_index"],
                     zip(sites.positions[:, 0], sites.positions[:, 1], sites.layer.tolist(),
                         sites.sublattice.tolist()))


def read_tb_state(path):
    data, _, t = read_field(path)
    if data.shape[0] != 1 or data.shape[2] != 1:
        raise ValueError("not a lattice state container")
    return data[0, :, 0], t


def fmt(x) -> str:
    """Shortest round-trip text for numbers; integers and strings pass through."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows) -> Path:
    """UTF-8, '.' decimal, LF line endings, header row first."""
    path = Path(path)
    lines = [",".join(header)]
    for r in rows:
        r = list(r)
        if len(r) != len(header):
            raise ValueError("row length does not match the header")
        lines.append(",".join(fmt(x) for x in r))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_columns(path, columns: dict) -> Path:
    keys = list(columns)
    n = {len(v) for v in columns.values()}
    if len(n) > 1:
        raise ValueError("columns have different lengths")
    return write_csv(path, keys, zip(*(columns[k] for k in keys)))


def read_csv(path):
    """Header list and a list of rows (strings)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else str(x)
    if isinstance(x, (complex, np.complexfloating)):
        return {"re": float(x.real), "im": float(x.imag)}
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunReport:
    command: str
    config_hash: str
    version: str
    seed: int
    threads: int
    wall_time_s: float = 0.0
    stages: dict = field(default_factory=dict)
    manifest: list = field(default_factory=list)
    status: str = "ok"
    exit_code: int = 0
    error: str = ""
    checks: dict = field(default_factory=dict)

    def add_file(self, path, root):
        path = Path(path)
        self.manifest.append({"path": os.path.relpath(path, root), "bytes": path.stat().st_size,
                              "sha256": sha256_file(path)})

    def to_dict(self):
        return {"command": self.command, "config_sha256": self.config_hash,
                "version": self.version, "seed": self.seed, "threads": self.threads,
                "wall_time_s": self.wall_time_s, "stages_s": self.stages,
                "manifest": self.manifest, "status": self.status, "exit_code": self.exit_code,
                "error": self.error, "checks": self.checks}
