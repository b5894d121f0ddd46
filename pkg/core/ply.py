from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional

import numpy as np

_PLY_TYPES = {
    "double": "<f8",
    "float": "<f4",
    "uchar": "u1",
    "int": "<i4",
    "uint": "<u4",
}


def write_ply(
    path: str | Path,
    xyz: np.ndarray,
    colors: Optional[np.ndarray] = None,
    segment_ids: Optional[np.ndarray] = None,
) -> None:
    """Binary little-endian PLY with double coordinates and optional rgb / segment id properties."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    props = ["double x", "double y", "double z"]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        props += ["uchar red", "uchar green", "uchar blue"]
    if segment_ids is not None:
        fields += [("segment_id", "<i4")]
        props += ["int segment_id"]
    recs = np.zeros(xyz.shape[0], dtype=np.dtype(fields))
    recs["x"], recs["y"], recs["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    if colors is not None:
        rgb = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        recs["red"], recs["green"], recs["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    if segment_ids is not None:
        recs["segment_id"] = np.asarray(segment_ids, dtype=np.int32)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {xyz.shape[0]}"]
    header += [f"property {p}" for p in props]
    header.append("end_header")
    p = Path(path)
    tmp = p.with_name(p.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(recs.tobytes())
    tmp.replace(p)


def read_ply(path: str | Path) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path} is not a PLY file.")
    lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError(f"{path}: only binary little-endian PLY is supported.")
    count = 0
    fields = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "property":
            if parts[1] not in _PLY_TYPES:
                raise ValueError(f"{path}: unsupported property type {parts[1]}.")
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
    dtype = np.dtype(fields)
    if count == 0:
        recs = np.zeros(0, dtype=dtype)
    else:
        recs = np.frombuffer(data, dtype=dtype, count=count, offset=end + len(b"end_header\n"))
    out = {name: recs[name].copy() for name, _ in fields}
    out["xyz"] = np.stack([recs["x"], recs["y"], recs["z"]], axis=1).astype(np.float64)
    return out


def segment_colors(segment_ids: np.ndarray) -> np.ndarray:
    """Stable pseudo-random color per segment id; unlabeled points (-1) are grey."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    h = (ids.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)) >> np.uint64(40)
    rgb = np.stack([(h >> np.uint64(s)) & np.uint64(0xFF) for s in (0, 8, 16)], axis=1).astype(np.uint8)
    rgb[ids < 0] = 128
    return rgb
