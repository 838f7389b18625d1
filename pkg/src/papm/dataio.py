"""Dataset serialization: manifest.json plus one checksummed blob per sample.

Blob layout: 4-byte magic "PAPM", u32 version, u32 m, ny, nx, T, the
trajectory payload (T*m*ny*nx little-endian floats), u32 n_xf and an optional
source-field payload (n_xf*ny*nx floats), then a u32 CRC32 of everything
before the footer. Payload dtype is float64 unless the manifest says the set
was written with precision float32.
"""

import json
import os
import struct
import zlib

import numpy as np

from .fields import BCSpec, ConditionSet, Field, GridSpec, TrajectoryDataset

MAGIC = b"PAPM"
VERSION = 1


class DatasetFormatError(Exception):
    pass


def _blob_bytes(traj, x_f, dtype):
    m, ny, nx = traj.shape[1:]
    head = MAGIC + struct.pack("<5I", VERSION, m, ny, nx, traj.shape[0])
    body = np.ascontiguousarray(traj, dtype=dtype).tobytes()
    n_xf = 0 if x_f is None else x_f.shape[0]
    body += struct.pack("<I", n_xf)
    if x_f is not None:
        body += np.ascontiguousarray(x_f, dtype=dtype).tobytes()
    payload = head + body
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def save_dataset(ds, path, precision="float64"):
    """Write a TrajectoryDataset directory; float32 only on explicit request."""
    if precision not in ("float64", "float32"):
        raise ValueError("precision must be float64 or float32")
    dtype = "<f8" if precision == "float64" else "<f4"
    os.makedirs(path, exist_ok=True)
    manifest = {
        "schema_version": VERSION,
        "precision": precision,
        "grid": ds.grid.to_dict(),
        "channel_names": ds.channel_names,
        "t0": ds.t0,
        "t_train": ds.t_train,
        "t_total": ds.t_total,
        "split_tags": ds.split_tags,
        "samples": [],
    }
    for k, (cond, traj) in enumerate(zip(ds.conditions, ds.trajectories)):
        name = "sample_%04d.bin" % k
        x_f = cond.x_f.data if cond.x_f is not None else None
        with open(os.path.join(path, name), "wb") as f:
            f.write(_blob_bytes(traj, x_f, dtype))
        manifest["samples"].append({
            "file": name,
            "lam": cond.lam.tolist(),
            "bcs": {edge: bc.to_dict() for edge, bc in cond.bcs.items()},
        })
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def _read_blob(path, dtype):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 28 or raw[:4] != MAGIC:
        raise DatasetFormatError("bad magic in %s" % path)
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise DatasetFormatError("checksum failure in %s" % path)
    version, m, ny, nx, t = struct.unpack("<5I", raw[4:24])
    if version != VERSION:
        raise DatasetFormatError("version %d unsupported (want %d)" % (version, VERSION))
    itot = t * m * ny * nx
    isize = np.dtype(dtype).itemsize
    off = 24
    traj = np.frombuffer(raw, dtype=dtype, count=itot, offset=off)
    traj = traj.reshape(t, m, ny, nx).astype(np.float64)
    off += itot * isize
    (n_xf,) = struct.unpack("<I", raw[off:off + 4])
    off += 4
    x_f = None
    if n_xf:
        x_f = np.frombuffer(raw, dtype=dtype, count=n_xf * ny * nx, offset=off)
        x_f = x_f.reshape(n_xf, ny, nx).astype(np.float64)
        off += n_xf * ny * nx * isize
    if off + 4 != len(raw):
        raise DatasetFormatError("size mismatch in %s" % path)
    return traj, x_f


def load_dataset(path):
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise DatasetFormatError("missing manifest.json in %s" % path)
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("schema_version") != VERSION:
        raise DatasetFormatError("manifest schema version mismatch")
    grid = GridSpec.from_dict(manifest["grid"])
    dtype = "<f8" if manifest.get("precision", "float64") == "float64" else "<f4"
    conds, trajs = [], []
    for rec in manifest["samples"]:
        traj, x_f = _read_blob(os.path.join(path, rec["file"]), dtype)
        if traj.shape[-2:] != (grid.ny, grid.nx):
            raise DatasetFormatError("blob grid does not match manifest")
        bcs = {edge: BCSpec.from_dict(d) for edge, d in rec["bcs"].items()}
        cond = ConditionSet(
            initial=Field(traj[0], grid), bcs=bcs,
            lam=np.asarray(rec["lam"]),
            x_f=Field(x_f, grid) if x_f is not None else None)
        conds.append(cond)
        trajs.append(traj)
    return TrajectoryDataset(grid, conds, trajs, manifest["t0"],
                             manifest["t_train"], manifest["split_tags"],
                             manifest["channel_names"])
