"""Trajectory binary format plus its JSON sidecar.

Layout: 7-byte magic ``FDATRJ1``; four little-endian uint32 dims
(T, H, W, V); a uint32 length-prefixed UTF-8 block of newline-joined
variable names; then T*H*W*V little-endian float32 values in (t, h, w, v)
row-major order. A ``<path>.meta.json`` sidecar duplicates the dims and
records the dynamics config and seed, which the binary does not carry.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from ..dynamics import DynamicsConfig, Trajectory
from ..errors import FormatError
from ..grid import GridState

TRAJ_MAGIC = b"FDATRJ1"


def sidecar_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def save_trajectory(traj: Trajectory, path) -> None:
    names = traj[0].variable_names
    for name in names:
        if "\n" in name:
            raise ValueError(f"variable name {name!r} not serializable")
    t, (h, w, v) = len(traj), traj[0].shape
    name_blob = "\n".join(names).encode("utf-8")
    data = np.stack([s.values for s in traj.states]).astype("<f4")
    with open(path, "wb") as f:
        f.write(TRAJ_MAGIC)
        f.write(struct.pack("<IIII", t, h, w, v))
        f.write(struct.pack("<I", len(name_blob)))
        f.write(name_blob)
        f.write(data.tobytes())
    meta = {
        "T": t,
        "H": h,
        "W": w,
        "V": v,
        "variables": list(names),
        "seed": traj.seed,
        "config": dataclasses.asdict(traj.config),
    }
    with open(sidecar_path(path), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_trajectory(path) -> Trajectory:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(TRAJ_MAGIC)] != TRAJ_MAGIC:
        raise FormatError(f"{path}: bad trajectory magic {blob[:len(TRAJ_MAGIC)]!r}")
    off = len(TRAJ_MAGIC)
    if len(blob) < off + 20:
        raise FormatError(f"{path}: truncated trajectory header")
    t, h, w, v, name_len = struct.unpack_from("<IIIII", blob, off)
    off += 20
    if len(blob) < off + name_len:
        raise FormatError(f"{path}: truncated variable-name block")
    names = tuple(blob[off : off + name_len].decode("utf-8").split("\n"))
    off += name_len
    if len(names) != v:
        raise FormatError(f"{path}: {len(names)} variable names for V={v}")
    expected = 4 * t * h * w * v
    if len(blob) - off != expected:
        raise FormatError(
            f"{path}: expected {expected} data bytes, found {len(blob) - off}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=off).astype(np.float64)
    data = data.reshape(t, h, w, v)

    meta_file = sidecar_path(path)
    if not meta_file.exists():
        raise FormatError(f"{meta_file}: sidecar missing (holds the dynamics config)")
    try:
        meta = json.loads(meta_file.read_text())
        cfg = DynamicsConfig(**meta["config"])
        seed = int(meta["seed"])
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        raise FormatError(f"{meta_file}: invalid sidecar ({e})") from e
    if (cfg.H, cfg.W, cfg.V) != (h, w, v):
        raise FormatError(f"{path}: sidecar config dims disagree with the binary")
    states = tuple(GridState(data[i], names) for i in range(t))
    return Trajectory(states, cfg, seed)
