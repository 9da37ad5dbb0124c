"""
Artifact files: plain-text fields, CSV tables, and the run record.

Field files carry one scalar per dof with its physical position, header
`# field <name> dims=<nx> <nz> k=<k>`, so any lattice (volume, surface
trace, basal parameter) uses the same format and stays diffable.  All
numbers are written with 17 significant digits, which round-trips IEEE
doubles exactly; rerunning a stage with the same seed must reproduce
CSVs byte for byte.  The record is an append-merge key=value store with
sorted keys and no timestamps.
"""

import os
from dataclasses import dataclass

import numpy as np

from .mesh import ConfigurationError
from .adjoint import ObservationSet


def fmt(v):
    """Canonical decimal for one value (floats at 17 significant digits)."""
    if isinstance(v, bool) or isinstance(v, np.bool_):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


@dataclass
class FieldFile:
    """One parsed field dump."""
    name: str
    nx: int
    nz: int
    k: int
    x: np.ndarray
    z: np.ndarray
    values: np.ndarray


def write_field(path, name, dims, x, z, values):
    """dims = (nx, nz, k) of the generating mesh."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    values = np.asarray(values, dtype=float)
    if not (x.shape == z.shape == values.shape and x.ndim == 1):
        raise ConfigurationError("field dump arrays must be equal-length 1D")
    nx, nz, k = dims
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# field {name} dims={nx} {nz} k={k}\n")
        for xi, zi, vi in zip(x, z, values):
            fh.write(f"{fmt(xi)} {fmt(zi)} {fmt(vi)}\n")


def read_field(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if (len(header) != 6 or header[:2] != ["#", "field"]
                or not header[3].startswith("dims=")
                or not header[5].startswith("k=")):
            raise ConfigurationError(f"not a field file: {path}")
        name = header[2]
        nx = int(header[3][len("dims="):])
        nz = int(header[4])
        k = int(header[5][len("k="):])
        data = np.loadtxt(fh, ndmin=2)
    if data.shape[1] != 3:
        raise ConfigurationError(f"field file rows must be `x z value`: {path}")
    return FieldFile(name=name, nx=nx, nz=nz, k=k,
                     x=data[:, 0], z=data[:, 1], values=data[:, 2])


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    return header, rows


def update_record(path, mapping):
    """Merge key=value pairs into the run record, keeping keys sorted."""
    rec = read_record(path) if os.path.exists(path) else {}
    rec.update({str(k): fmt(v) for k, v in mapping.items()})
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k in sorted(rec):
            fh.write(f"{k}={rec[k]}\n")


def read_record(path):
    rec = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, val = line.partition("=")
            rec[key] = val
    return rec


# -- observation bundles ----------------------------------------------

_OBS_PARTS = ("obs_vx", "obs_vz", "obs_sigma")


def write_observations(out_dir, dims, x, z, obs):
    for name, vals in zip(_OBS_PARTS, (obs.vx, obs.vz, obs.sigma)):
        write_field(os.path.join(out_dir, name + ".dat"), name, dims, x, z, vals)


def read_observations(out_dir, eps_norm=1e-9):
    parts = []
    for name in _OBS_PARTS:
        path = os.path.join(out_dir, name + ".dat")
        if not os.path.exists(path):
            raise ConfigurationError(f"missing observation file {path}")
        parts.append(read_field(path))
    vx, vz, sg = parts
    if not (np.array_equal(vx.x, vz.x) and np.array_equal(vx.x, sg.x)):
        raise ConfigurationError("observation files disagree on positions")
    return ObservationSet(x=vx.x, vx=vx.values, vz=vz.values,
                          sigma=sg.values, eps_norm=eps_norm)
