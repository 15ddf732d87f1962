"""On-disk formats: tensor containers, 16-bit PGM, parameter checkpoints, CSV.

Tensor container layout (all little endian)::

    bytes 0..7    magic  b"TDVTENSR"
    bytes 8..11   u32 format version (1)
    bytes 12..15  u32 reserved (0)
    bytes 16..31  4 x u32 dims (batch, channels, height, width)
    bytes 32..    float64 data, row-major
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, ShapeError
from .regularizer import TdvParams, param_names

MAGIC = b"TDVTENSR"
VERSION = 1
_HEADER = struct.Struct("<8sII4I")


def tensor_bytes(x) -> bytes:
    x = np.asarray(x, dtype="<f8")
    if x.ndim > 4:
        raise ShapeError("tensor containers hold at most 4 dims")
    dims = (1,) * (4 - x.ndim) + x.shape
    return _HEADER.pack(MAGIC, VERSION, 0, *dims) + np.ascontiguousarray(x).tobytes()


def save_tensor(path, x):
    Path(path).write_bytes(tensor_bytes(x))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise ContractError(f"{path}: truncated header")
    magic, version, _, *dims = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ContractError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ContractError(f"{path}: unsupported version {version}")
    n = int(np.prod(dims))
    if len(buf) != _HEADER.size + 8 * n:
        raise ContractError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).reshape(dims).astype(np.float64)


# --------------------------------------------------------------------------
# PGM


def write_pgm(path, img):
    """Write an image in [0, 1] as a 16-bit binary PGM (values are clipped)."""
    img = np.asarray(img, dtype=float)
    img = img.reshape(img.shape[-2:])
    data = np.round(np.clip(img, 0.0, 1.0) * 65535).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (8- or 16-bit) into a float array in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ContractError(f"{path}: only binary PGM (P5) is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return data.astype(float) / maxval


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, theta: TdvParams, T=None, extra=None) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    h = hashlib.sha256()
    entries = []
    for name in theta.names:
        blob = tensor_bytes(theta[name])
        (d / f"{name}.tdvt").write_bytes(blob)
        h.update(name.encode())
        h.update(blob)
        entries.append({"name": name, "file": f"{name}.tdvt", "shape": list(theta[name].shape)})
    manifest = {"format": "tdv-checkpoint", "version": 1, "nu": theta.nu, "m": theta.m, "l": theta.l,
                "C": theta.C, "T": T, "tensors": entries, "sha256": h.hexdigest()}
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_checkpoint(directory):
    """Returns (theta, T, manifest); verifies the content hash."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    h = hashlib.sha256()
    arrays = {}
    for e in manifest["tensors"]:
        blob = (d / e["file"]).read_bytes()
        h.update(e["name"].encode())
        h.update(blob)
        arrays[e["name"]] = load_tensor(d / e["file"]).reshape(e["shape"])
    if h.hexdigest() != manifest["sha256"]:
        raise ContractError(f"{d}: checkpoint content hash mismatch")
    if set(arrays) != set(param_names(manifest["l"])):
        raise ContractError(f"{d}: checkpoint tensors do not match the architecture")
    theta = TdvParams(arrays, float(manifest["nu"]), int(manifest["m"]), int(manifest["l"]), int(manifest["C"]))
    return theta, manifest.get("T"), manifest


# --------------------------------------------------------------------------
# trajectories and tables


def dump_trajectory(directory, traj) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for s, x in enumerate(traj.states):
        name = f"state_{s:04d}.tdvt"
        save_tensor(d / name, x)
        files.append(name)
    save_tensor(d / "z.tdvt", traj.z)
    index = {"T": traj.config.T, "S": traj.config.S, "operator": traj.config.op.describe(),
             "lam": traj.config.lam, "states": files, "z": "z.tdvt"}
    (d / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    return index


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v
