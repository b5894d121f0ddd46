from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .geometry import AnchorChain, RayMeasurement, interpolate_correction, jacobian_rows, residual_jacobian
from .latent_map import Correspondence

DIAG = 0
OFFDIAG = 1

BLOCK_MAGIC = b"NBLK"
BLOCK_VERSION = 1
BLOCK_HEADER = struct.Struct("<4sHI")  # magic, version, record count
BLOCK_RECORD = np.dtype(
    [
        ("trajectory_id", "<u4"),
        ("i", "<u4"),
        ("kind", "u1"),
        ("pad", "u1", (3,)),
        ("m", "<f8", (6, 6)),
        ("rhs", "<f8", (6,)),
    ]
)

DEFAULT_SIGMA_PRIOR = (0.02, 0.02, 0.05, 9e-5, 9e-5, 2.6e-4)
DEFAULT_SIGMA_SMOOTH = (0.002, 0.002, 0.002, 2e-5, 2e-5, 2e-5)


class BlockFormatError(ValueError):
    pass


@dataclass
class NoiseConfig:
    sigma_dist: float = 0.005
    sigma_prior: Tuple[float, ...] = DEFAULT_SIGMA_PRIOR
    sigma_smooth: Tuple[float, ...] = DEFAULT_SIGMA_SMOOTH

    def __post_init__(self) -> None:
        if not self.sigma_dist > 0.0:
            raise ValueError("sigma_dist must be positive.")
        for name in ("sigma_prior", "sigma_smooth"):
            values = tuple(float(v) for v in getattr(self, name))
            if len(values) != 6 or min(values) <= 0.0:
                raise ValueError(f"{name} needs 6 positive entries.")
            setattr(self, name, values)

    @property
    def dist_weight(self) -> float:
        return 1.0 / (self.sigma_dist * self.sigma_dist)

    def prior_information(self) -> np.ndarray:
        return np.diag(1.0 / np.square(np.asarray(self.sigma_prior)))

    def smooth_information(self) -> np.ndarray:
        return np.diag(1.0 / np.square(np.asarray(self.sigma_smooth)))


@dataclass
class NormalBlock:
    trajectory_id: int
    i: int
    kind: int
    m: np.ndarray
    rhs: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self) -> None:
        if self.kind not in (DIAG, OFFDIAG):
            raise ValueError(f"Unknown block kind {self.kind}.")
        self.m = np.asarray(self.m, dtype=np.float64).reshape(6, 6)
        self.rhs = np.asarray(self.rhs, dtype=np.float64).reshape(6)

    @property
    def key(self) -> Tuple[int, int, int]:
        return self.trajectory_id, self.i, self.kind


def distance_blocks(c: Correspondence, m: RayMeasurement, chain: AnchorChain, noise: NoiseConfig) -> List[NormalBlock]:
    i, alpha, _ = interpolate_correction(chain, m.arc)
    j_i, j_ip1 = residual_jacobian(c.target, m, alpha)
    p = noise.dist_weight
    l = c.distance
    tid = chain.trajectory_id
    out = [NormalBlock(tid, i, DIAG, p * np.outer(j_i, j_i), p * j_i * l)]
    if alpha > 0.0:
        out.append(NormalBlock(tid, i + 1, DIAG, p * np.outer(j_ip1, j_ip1), p * j_ip1 * l))
        out.append(NormalBlock(tid, i, OFFDIAG, p * np.outer(j_i, j_ip1)))
    return out


def distance_blocks_batch(
    trajectory_id: int,
    idx: np.ndarray,
    alpha: np.ndarray,
    w: np.ndarray,
    r: np.ndarray,
    distance: np.ndarray,
    noise: NoiseConfig,
) -> List[NormalBlock]:
    """Per-anchor sums of the distance blocks of many observations, accumulated in input order."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        return []
    alpha = np.asarray(alpha, dtype=np.float64)
    rows = jacobian_rows(w, r)
    outer = rows[:, :, None] * rows[:, None, :]
    p = noise.dist_weight
    a0 = 1.0 - alpha
    a1 = alpha
    l = np.asarray(distance, dtype=np.float64)
    upper = alpha > 0.0

    anchors = np.unique(np.concatenate([idx, idx[upper] + 1]))
    pos0 = np.searchsorted(anchors, idx)
    pos1 = np.searchsorted(anchors, idx[upper] + 1)
    diag_m = np.zeros((anchors.size, 6, 6))
    diag_b = np.zeros((anchors.size, 6))
    np.add.at(diag_m, pos0, (p * a0 * a0)[:, None, None] * outer)
    np.add.at(diag_b, pos0, (p * a0 * l)[:, None] * rows)
    np.add.at(diag_m, pos1, (p * a1 * a1)[upper, None, None] * outer[upper])
    np.add.at(diag_b, pos1, (p * a1 * l)[upper, None] * rows[upper])

    off_anchors = np.unique(idx[upper])
    off_pos = np.searchsorted(off_anchors, idx[upper])
    off_m = np.zeros((off_anchors.size, 6, 6))
    np.add.at(off_m, off_pos, (p * a0 * a1)[upper, None, None] * outer[upper])

    blocks = [NormalBlock(trajectory_id, int(a), DIAG, diag_m[k], diag_b[k]) for k, a in enumerate(anchors)]
    blocks += [NormalBlock(trajectory_id, int(a), OFFDIAG, off_m[k]) for k, a in enumerate(off_anchors)]
    return sort_blocks(blocks)


def prior_blocks(
    n: int,
    noise: NoiseConfig,
    current: Optional[np.ndarray] = None,
    trajectory_id: int = 0,
    start: int = 0,
    scale: float = 1.0,
) -> List[NormalBlock]:
    """Zero-mean prior on anchors start..start+n-1; `current` linearizes at accumulated corrections."""
    if n < 1:
        raise ValueError("prior_blocks needs at least one anchor.")
    info = noise.prior_information() * scale
    out = []
    for k in range(n):
        rhs = np.zeros(6) if current is None else -info @ np.asarray(current[k], dtype=np.float64)
        out.append(NormalBlock(trajectory_id, start + k, DIAG, info.copy(), rhs))
    return out


def smooth_blocks(
    n: int,
    noise: NoiseConfig,
    current: Optional[np.ndarray] = None,
    trajectory_id: int = 0,
    start: int = 0,
) -> List[NormalBlock]:
    if n < 2:
        raise ValueError("smooth_blocks needs at least two anchors.")
    w = noise.smooth_information()
    out = []
    for k in range(n - 1):
        if current is None:
            step = np.zeros(6)
        else:
            step = w @ (np.asarray(current[k + 1], dtype=np.float64) - np.asarray(current[k], dtype=np.float64))
        out.append(NormalBlock(trajectory_id, start + k, DIAG, w.copy(), step))
        out.append(NormalBlock(trajectory_id, start + k + 1, DIAG, w.copy(), -step))
        out.append(NormalBlock(trajectory_id, start + k, OFFDIAG, -w))
    return out


def sort_blocks(blocks: Iterable[NormalBlock]) -> List[NormalBlock]:
    return sorted(blocks, key=lambda b: (b.trajectory_id, b.i, b.kind))


def combine_blocks(blocks: Iterable[NormalBlock]) -> List[NormalBlock]:
    """Sum blocks sharing (trajectory, anchor, kind); summation follows the input order per key."""
    acc: Dict[Tuple[int, int, int], NormalBlock] = {}
    for b in blocks:
        cur = acc.get(b.key)
        if cur is None:
            acc[b.key] = NormalBlock(b.trajectory_id, b.i, b.kind, b.m.copy(), b.rhs.copy())
        else:
            cur.m += b.m
            cur.rhs += b.rhs
    return sort_blocks(acc.values())


def pack_blocks(blocks: List[NormalBlock]) -> bytes:
    recs = np.zeros(len(blocks), dtype=BLOCK_RECORD)
    for k, b in enumerate(blocks):
        recs[k]["trajectory_id"] = b.trajectory_id
        recs[k]["i"] = b.i
        recs[k]["kind"] = b.kind
        recs[k]["m"] = b.m
        recs[k]["rhs"] = b.rhs
    return BLOCK_HEADER.pack(BLOCK_MAGIC, BLOCK_VERSION, len(blocks)) + recs.tobytes()


def unpack_blocks(data: bytes) -> List[NormalBlock]:
    if len(data) < BLOCK_HEADER.size:
        raise BlockFormatError("Block payload shorter than its header.")
    magic, version, count = BLOCK_HEADER.unpack_from(data, 0)
    if magic != BLOCK_MAGIC:
        raise BlockFormatError(f"Bad block magic {magic!r}.")
    if version != BLOCK_VERSION:
        raise BlockFormatError(f"Block format version {version} is not supported.")
    expected = BLOCK_HEADER.size + count * BLOCK_RECORD.itemsize
    if len(data) != expected:
        raise BlockFormatError(f"Block payload has {len(data)} bytes, expected {expected}.")
    recs = np.frombuffer(data, dtype=BLOCK_RECORD, count=count, offset=BLOCK_HEADER.size)
    out = []
    for rec in recs:
        kind = int(rec["kind"])
        if kind not in (DIAG, OFFDIAG):
            raise BlockFormatError(f"Unknown block kind {kind}.")
        if not (np.all(np.isfinite(rec["m"])) and np.all(np.isfinite(rec["rhs"]))):
            raise BlockFormatError("Block holds non-finite values.")
        out.append(NormalBlock(int(rec["trajectory_id"]), int(rec["i"]), kind, rec["m"].copy(), rec["rhs"].copy()))
    return out
