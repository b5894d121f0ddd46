from __future__ import annotations

import csv
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from .geometry import AnchorChain, correct_points, interpolate_corrections

CORR_MAGIC = b"LSACORR\x00"
CORR_VERSION = 1
CORR_HEADER = struct.Struct("<8sHII")  # magic, version, iteration, trajectory count
CHAIN_HEADER = struct.Struct("<IddI")  # trajectory_id, spacing, arc_origin, anchor count
ANCHOR_RECORD = np.dtype(
    [("trajectory_id", "<u4"), ("anchor", "<u4"), ("arc", "<f8"), ("values", "<f8", (6,)), ("std", "<f8", (6,))]
)
DIGEST_SIZE = 32


class CorrectionsFormatError(ValueError):
    pass


@dataclass
class CorrectionsSet:
    chains: Dict[int, AnchorChain]
    iteration: int = 0
    std: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for tid, chain in self.chains.items():
            if chain.trajectory_id != tid:
                raise ValueError(f"Chain keyed {tid} belongs to trajectory {chain.trajectory_id}.")
            if tid not in self.std:
                self.std[tid] = np.zeros((chain.n, 6))

    @classmethod
    def zeros(cls, arc_ranges: Dict[int, tuple], spacing: float = 0.5) -> "CorrectionsSet":
        chains = {
            int(tid): AnchorChain.covering(int(tid), float(lo), float(hi), spacing)
            for tid, (lo, hi) in sorted(arc_ranges.items())
        }
        return cls(chains)

    @property
    def trajectory_ids(self) -> List[int]:
        return sorted(self.chains)

    def chain(self, trajectory_id: int) -> AnchorChain:
        try:
            return self.chains[int(trajectory_id)]
        except KeyError as exc:
            raise KeyError(f"No anchor chain for trajectory {trajectory_id}.") from exc

    def copy(self) -> "CorrectionsSet":
        return CorrectionsSet(
            {tid: c.copy() for tid, c in self.chains.items()},
            self.iteration,
            {tid: s.copy() for tid, s in self.std.items()},
        )

    def accumulate(self, increments: Dict[int, tuple]) -> "CorrectionsSet":
        """Add per-anchor increments {tid: (start, x (k, 6), std (k, 6))}; returns a new set one iteration on."""
        out = self.copy()
        for tid, (start, x, std) in sorted(increments.items()):
            chain = out.chain(tid)
            stop = start + x.shape[0]
            if start < 0 or stop > chain.n:
                raise ValueError(f"Increment anchors [{start}, {stop}) outside chain of trajectory {tid}.")
            chain.values[start:stop] += x
            out.std[tid][start:stop] = std
        out.iteration = self.iteration + 1
        return out

    def correct(self, xyz: np.ndarray, t0: np.ndarray, arc: np.ndarray, trajectory_ids: np.ndarray):
        """Corrected positions plus the in-chain mask; points outside their chain keep their position."""
        xyz = np.asarray(xyz, dtype=np.float64)
        out = xyz.copy()
        ok = np.zeros(xyz.shape[0], dtype=bool)
        idx = np.zeros(xyz.shape[0], dtype=np.int64)
        alpha = np.zeros(xyz.shape[0])
        tids = np.asarray(trajectory_ids)
        for tid in np.unique(tids):
            sel = np.flatnonzero(tids == tid)
            i, a, values, inside = interpolate_corrections(self.chain(int(tid)), np.asarray(arc)[sel])
            out[sel] = correct_points(xyz[sel], np.asarray(t0)[sel], values)
            ok[sel] = inside
            idx[sel] = i
            alpha[sel] = a
        return out, ok, idx, alpha

    def _body(self) -> bytes:
        parts = [CORR_HEADER.pack(CORR_MAGIC, CORR_VERSION, self.iteration, len(self.chains))]
        for tid in self.trajectory_ids:
            chain = self.chains[tid]
            parts.append(CHAIN_HEADER.pack(tid, chain.spacing, chain.arc_origin, chain.n))
            recs = np.zeros(chain.n, dtype=ANCHOR_RECORD)
            recs["trajectory_id"] = tid
            recs["anchor"] = np.arange(chain.n)
            recs["arc"] = chain.anchor_arcs()
            recs["values"] = chain.values
            recs["std"] = self.std[tid]
            parts.append(recs.tobytes())
        return b"".join(parts)

    def to_bytes(self) -> bytes:
        body = self._body()
        return body + hashlib.sha256(body).digest()

    @property
    def provenance(self) -> str:
        return hashlib.sha256(self._body()).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CorrectionsSet":
        if len(data) < CORR_HEADER.size + DIGEST_SIZE:
            raise CorrectionsFormatError("Corrections payload is truncated.")
        body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
        if hashlib.sha256(body).digest() != digest:
            raise CorrectionsFormatError("Corrections checksum mismatch.")
        magic, version, iteration, count = CORR_HEADER.unpack_from(body, 0)
        if magic != CORR_MAGIC:
            raise CorrectionsFormatError(f"Not a corrections file (magic {magic!r}).")
        if version != CORR_VERSION:
            raise CorrectionsFormatError(f"Corrections version {version} is not supported.")
        offset = CORR_HEADER.size
        chains: Dict[int, AnchorChain] = {}
        std: Dict[int, np.ndarray] = {}
        for _ in range(count):
            if len(body) < offset + CHAIN_HEADER.size:
                raise CorrectionsFormatError("Chain header truncated.")
            tid, spacing, origin, n = CHAIN_HEADER.unpack_from(body, offset)
            offset += CHAIN_HEADER.size
            if len(body) < offset + n * ANCHOR_RECORD.itemsize:
                raise CorrectionsFormatError(f"Anchor records of trajectory {tid} truncated.")
            recs = np.frombuffer(body, dtype=ANCHOR_RECORD, count=n, offset=offset)
            offset += n * ANCHOR_RECORD.itemsize
            chains[tid] = AnchorChain(tid, recs["values"].copy(), spacing, origin)
            std[tid] = recs["std"].copy()
        if offset != len(body):
            raise CorrectionsFormatError("Trailing bytes after the last chain.")
        return cls(chains, iteration, std)


def write_corrections(corrections: CorrectionsSet, path: str | Path) -> None:
    p = Path(path)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_bytes(corrections.to_bytes())
    os.replace(tmp, p)


def read_corrections(path: str | Path) -> CorrectionsSet:
    return CorrectionsSet.from_bytes(Path(path).read_bytes())


def corrections_table(corrections: CorrectionsSet) -> List[Dict[str, float]]:
    rows: List[Dict[str, float]] = []
    for tid in corrections.trajectory_ids:
        chain = corrections.chains[tid]
        for k, arc in enumerate(chain.anchor_arcs()):
            row: Dict[str, float] = {"trajectory_id": tid, "anchor": k, "arc": float(arc)}
            for name, v, s in zip(("tx", "ty", "tz", "omega", "phi", "kappa"), chain.values[k], corrections.std[tid][k]):
                row[name] = float(v)
                row[f"std_{name}"] = float(s)
            rows.append(row)
    return rows


def write_corrections_table(corrections: CorrectionsSet, path: str | Path) -> int:
    rows = corrections_table(corrections)
    fields = ["trajectory_id", "anchor", "arc"]
    for name in ("tx", "ty", "tz", "omega", "phi", "kappa"):
        fields += [name, f"std_{name}"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return len(rows)
