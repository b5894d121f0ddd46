from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import RayMeasurement

STRIP_MAGIC = b"LSASTRIP"
STRIP_VERSION = 1
STRIP_HEADER = struct.Struct("<8sHIIIII")  # magic, version, strip_id, scanner_id, rows, cols, trajectory_id
STRIP_RECORD = np.dtype([("xyz", "<f8", (3,)), ("t0", "<f8", (3,)), ("arc", "<f8")])
DEFAULT_ROWS = 3000
MAX_COLS = 1 << 20

POINT_RECORD_DTYPE = np.dtype(
    [
        ("xyz", "<f8", (3,)),
        ("t0", "<f8", (3,)),
        ("arc", "<f8"),
        ("trajectory_id", "<u4"),
        ("strip_id", "<u4"),
        ("segment_id", "<i4"),
        ("row", "<u4"),
        ("col", "<u4"),
        ("normal", "<f8", (3,)),
    ]
)
NO_SEGMENT = -1


class StripFormatError(ValueError):
    pass


class BadMagicError(StripFormatError):
    pass


class VersionMismatchError(StripFormatError):
    pass


class TruncatedStripError(StripFormatError):
    pass


@dataclass(frozen=True)
class StripPoint:
    xyz: np.ndarray
    t0: np.ndarray
    arc: float
    row: int
    col: int
    trajectory_id: int = 0


@dataclass(frozen=True)
class PointRecord:
    xyz: np.ndarray
    t0: np.ndarray
    arc: float
    trajectory_id: int
    strip_id: int
    segment_id: Optional[int]
    row: int
    col: int
    normal: np.ndarray

    @classmethod
    def from_row(cls, row: np.void) -> "PointRecord":
        seg = int(row["segment_id"])
        return cls(
            xyz=np.array(row["xyz"], dtype=np.float64),
            t0=np.array(row["t0"], dtype=np.float64),
            arc=float(row["arc"]),
            trajectory_id=int(row["trajectory_id"]),
            strip_id=int(row["strip_id"]),
            segment_id=None if seg == NO_SEGMENT else seg,
            row=int(row["row"]),
            col=int(row["col"]),
            normal=np.array(row["normal"], dtype=np.float64),
        )


@dataclass
class ScanStrip:
    """
    Raster of one scanner's measurements along one drive: rows are positions within a
    scan-head revolution, columns are profiles in acquisition order.
    """

    strip_id: int
    scanner_id: int
    trajectory_id: int
    xyz: np.ndarray
    t0: np.ndarray
    arc: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.valid = np.asarray(self.valid, dtype=bool)
        rows, cols = self.valid.shape
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(rows, cols, 3)
        self.t0 = np.asarray(self.t0, dtype=np.float64).reshape(rows, cols, 3)
        self.arc = np.asarray(self.arc, dtype=np.float64).reshape(rows, cols)
        if cols > MAX_COLS:
            raise ValueError(f"Strip has {cols} columns; cut acquisitions to at most {MAX_COLS}.")

    @classmethod
    def empty(cls, strip_id: int, scanner_id: int, trajectory_id: int, rows: int, cols: int) -> "ScanStrip":
        return cls(
            strip_id=strip_id,
            scanner_id=scanner_id,
            trajectory_id=trajectory_id,
            xyz=np.zeros((rows, cols, 3)),
            t0=np.zeros((rows, cols, 3)),
            arc=np.zeros((rows, cols)),
            valid=np.zeros((rows, cols), dtype=bool),
        )

    @property
    def rows(self) -> int:
        return int(self.valid.shape[0])

    @property
    def cols(self) -> int:
        return int(self.valid.shape[1])

    @property
    def point_count(self) -> int:
        return int(np.count_nonzero(self.valid))

    def point_at(self, row: int, col: int) -> Optional[StripPoint]:
        if not self.valid[row, col]:
            return None
        return StripPoint(
            xyz=self.xyz[row, col].copy(),
            t0=self.t0[row, col].copy(),
            arc=float(self.arc[row, col]),
            row=int(row),
            col=int(col),
            trajectory_id=self.trajectory_id,
        )

    def point_records(
        self,
        labels: Optional[np.ndarray] = None,
        normals: Optional[np.ndarray] = None,
        *,
        labeled_only: bool = False,
    ) -> np.ndarray:
        mask = self.valid.copy()
        if labels is not None and labeled_only:
            mask &= labels != NO_SEGMENT
        rows, cols = np.nonzero(mask)
        out = np.zeros(rows.size, dtype=POINT_RECORD_DTYPE)
        out["xyz"] = self.xyz[rows, cols]
        out["t0"] = self.t0[rows, cols]
        out["arc"] = self.arc[rows, cols]
        out["trajectory_id"] = self.trajectory_id
        out["strip_id"] = self.strip_id
        out["segment_id"] = labels[rows, cols] if labels is not None else NO_SEGMENT
        out["row"] = rows
        out["col"] = cols
        if normals is not None:
            out["normal"] = normals[rows, cols]
        return out


def ray_of(point: StripPoint) -> RayMeasurement:
    return RayMeasurement(
        t0=point.t0,
        r=np.asarray(point.xyz, dtype=np.float64) - np.asarray(point.t0, dtype=np.float64),
        arc=float(point.arc),
        trajectory_id=int(point.trajectory_id),
    )


def sort_point_records(records: np.ndarray) -> np.ndarray:
    order = np.lexsort((records["col"], records["row"], records["strip_id"]))
    return records[order]


def strip_to_bytes(strip: ScanStrip) -> bytes:
    header = STRIP_HEADER.pack(
        STRIP_MAGIC,
        STRIP_VERSION,
        strip.strip_id,
        strip.scanner_id,
        strip.rows,
        strip.cols,
        strip.trajectory_id,
    )
    bitmap = np.packbits(strip.valid.ravel(), bitorder="little")
    recs = np.zeros(strip.point_count, dtype=STRIP_RECORD)
    recs["xyz"] = strip.xyz[strip.valid]
    recs["t0"] = strip.t0[strip.valid]
    recs["arc"] = strip.arc[strip.valid]
    return header + bitmap.tobytes() + recs.tobytes()


def strip_from_bytes(data: bytes) -> ScanStrip:
    if len(data) < STRIP_HEADER.size:
        raise TruncatedStripError(f"Strip header needs {STRIP_HEADER.size} bytes, got {len(data)}.")
    magic, version, strip_id, scanner_id, rows, cols, trajectory_id = STRIP_HEADER.unpack_from(data, 0)
    if magic != STRIP_MAGIC:
        raise BadMagicError(f"Not a strip file (magic {magic!r}).")
    if version != STRIP_VERSION:
        raise VersionMismatchError(f"Strip format version {version} is not supported (expected {STRIP_VERSION}).")
    if rows < 1 or cols < 1 or cols > MAX_COLS:
        raise StripFormatError(f"Invalid strip raster {rows}x{cols}.")

    cells = rows * cols
    bitmap_len = (cells + 7) // 8
    offset = STRIP_HEADER.size
    if len(data) < offset + bitmap_len:
        raise TruncatedStripError("Strip presence bitmap is truncated.")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=bitmap_len, offset=offset), bitorder="little")
    valid = bits[:cells].astype(bool).reshape(rows, cols)
    if np.any(bits[cells:]):
        raise StripFormatError("Presence bitmap has bits set past the last cell.")
    offset += bitmap_len

    count = int(np.count_nonzero(valid))
    payload_len = count * STRIP_RECORD.itemsize
    if len(data) < offset + payload_len:
        raise TruncatedStripError(f"Strip payload truncated: expected {payload_len} bytes for {count} points.")
    if len(data) > offset + payload_len:
        raise StripFormatError(f"Strip has {len(data) - offset - payload_len} trailing bytes.")
    recs = np.frombuffer(data, dtype=STRIP_RECORD, count=count, offset=offset)

    strip = ScanStrip.empty(strip_id, scanner_id, trajectory_id, rows, cols)
    strip.valid = valid
    strip.xyz[valid] = recs["xyz"]
    strip.t0[valid] = recs["t0"]
    strip.arc[valid] = recs["arc"]
    return strip


def write_strip(strip: ScanStrip, path: str | Path) -> None:
    p = Path(path)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_bytes(strip_to_bytes(strip))
    tmp.replace(p)


def read_strip(path: str | Path) -> ScanStrip:
    return strip_from_bytes(Path(path).read_bytes())

