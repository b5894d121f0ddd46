from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .corrections import CorrectionsSet, write_corrections, write_corrections_table
from .diagnostics import DEFAULT_BIN_WIDTH, DistanceHistogram, write_histogram_csv
from .engine import JobError, JobSpec, broadcast_read, read_output, register_map, register_reduce, run_job
from .latent_map import CorrespondenceBatch, LatentMap, LatentMapConfig, build_map
from .normal_blocks import (
    DIAG,
    NoiseConfig,
    NormalBlock,
    combine_blocks,
    distance_blocks_batch,
    pack_blocks,
    prior_blocks,
    smooth_blocks,
    unpack_blocks,
)
from .segmentation import RansacParams, SegmentationConfig, segment_strip
from .strip import POINT_RECORD_DTYPE, ScanStrip, read_strip, sort_point_records
from .trajectory_solver import SingularChainError, assemble, solve

TILE_INDEX_NAME = "tiles.json"
FIXED_PRIOR_SCALE = 1e12  # sigma * 1e-6
_KEY_TILE = b"T"
_KEY_ARC = b"A"
_KEY_STATS = b"S"
_TILE_KEY = struct.Struct("<ii")
_TRAJ_KEY = struct.Struct(">I")
_INCREMENT_HEADER = struct.Struct("<II")  # start anchor, anchor count
_LEN = struct.Struct("<I")

DEFAULT_PLAN: Tuple[Tuple[float, float], ...] = (
    ((0.3, 0.10),) * 2
    + tuple((round(float(t), 6), 0.02) for t in np.linspace(0.2, 0.03, 12))
    + ((0.02, 0.02), (0.01, 0.01), (0.007, 0.01), (0.007, 0.01))
)


class PlanError(ValueError):
    pass


class IterationError(RuntimeError):
    def __init__(self, message: str, trajectory_id: Optional[int] = None):
        self.trajectory_id = trajectory_id
        super().__init__(message)


@dataclass
class TilingConfig:
    tile_size: float = 15.0
    overlap: float = 0.3


@dataclass
class AnchorConfig:
    spacing: float = 0.5


@dataclass
class EngineConfig:
    workers: int = 1
    partitions: int = 0  # 0: same as workers
    scratch: str = "scratch"
    max_retries: int = 2
    spill_mb: int = 256


@dataclass
class ScheduleConfig:
    steps: Tuple[Tuple[float, float], ...] = DEFAULT_PLAN


@dataclass
class PipelineParams:
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    latent_map: LatentMapConfig = field(default_factory=LatentMapConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    fixed_trajectories: Tuple[int, ...] = ()

    def to_json(self) -> Dict[str, object]:
        return {
            "noise": asdict(self.noise),
            "segmentation": asdict(self.segmentation),
            "latent_map": asdict(self.latent_map),
            "tiling": asdict(self.tiling),
            "anchors": asdict(self.anchors),
            "fixed_trajectories": [int(t) for t in self.fixed_trajectories],
        }

    @classmethod
    def from_json(cls, raw: Dict[str, object]) -> "PipelineParams":
        seg = dict(raw.get("segmentation", {}))
        ransac = RansacParams(**seg.pop("ransac", {}))
        return cls(
            noise=NoiseConfig(**raw.get("noise", {})),
            segmentation=SegmentationConfig(ransac=ransac, **seg),
            latent_map=LatentMapConfig(**raw.get("latent_map", {})),
            tiling=TilingConfig(**raw.get("tiling", {})),
            anchors=AnchorConfig(**raw.get("anchors", {})),
            fixed_trajectories=tuple(int(t) for t in raw.get("fixed_trajectories", [])),
        )

    def partitions(self) -> int:
        return self.engine.partitions if self.engine.partitions >= 1 else max(1, self.engine.workers)


@dataclass(frozen=True, order=True)
class TileKey:
    tx: int
    ty: int
    tile_size: float = 15.0

    def to_bytes(self) -> bytes:
        return _KEY_TILE + _TILE_KEY.pack(self.tx, self.ty)

    @classmethod
    def from_bytes(cls, data: bytes, tile_size: float) -> "TileKey":
        tx, ty = _TILE_KEY.unpack(data[1:])
        return cls(tx, ty, tile_size)

    @property
    def filename(self) -> str:
        return f"tile_{self.tx:+05d}_{self.ty:+05d}.npy"

    def contains(self, x: float, y: float) -> bool:
        return math.floor(x / self.tile_size) == self.tx and math.floor(y / self.tile_size) == self.ty


@dataclass
class TileEntry:
    tx: int
    ty: int
    path: str
    count: int


@dataclass
class TileIndex:
    tile_size: float
    overlap: float
    tiles: List[TileEntry]
    trajectories: Dict[int, Tuple[float, float]]

    def save(self, path: Path) -> None:
        payload = {
            "tile_size": self.tile_size,
            "overlap": self.overlap,
            "tiles": [asdict(t) for t in self.tiles],
            "trajectories": {str(k): list(v) for k, v in sorted(self.trajectories.items())},
        }
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: Path) -> "TileIndex":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            tile_size=float(raw["tile_size"]),
            overlap=float(raw["overlap"]),
            tiles=[TileEntry(**t) for t in raw["tiles"]],
            trajectories={int(k): (float(v[0]), float(v[1])) for k, v in raw["trajectories"].items()},
        )


@dataclass
class IterationPlan:
    steps: List[Tuple[float, float]]

    @classmethod
    def default(cls) -> "IterationPlan":
        return cls([tuple(s) for s in DEFAULT_PLAN])

    @property
    def total(self) -> int:
        return len(self.steps)

    def validate(self) -> "IterationPlan":
        prev = math.inf
        for k, step in enumerate(self.steps):
            if len(step) != 2:
                raise PlanError(f"Step {k} must be (threshold, lsm_pitch).")
            threshold, pitch = float(step[0]), float(step[1])
            if not (threshold > 0.0 and pitch > 0.0):
                raise PlanError(f"Step {k}: threshold and lsm_pitch must be positive.")
            if threshold > prev:
                raise PlanError(f"Step {k}: threshold {threshold} exceeds previous {prev}; thresholds must not increase.")
            if threshold < 0.5 * pitch:
                raise PlanError(f"Step {k}: threshold {threshold} below half the LSM pitch {pitch}.")
            prev = threshold
        return self

    def truncated(self, iterations: Optional[int]) -> "IterationPlan":
        if iterations is None:
            return IterationPlan(list(self.steps))
        return IterationPlan(list(self.steps[: max(0, int(iterations))]))


@dataclass
class IterationStats:
    iteration: int
    threshold: float
    lsm_pitch: float
    kept: int
    accepted: int
    rejected: Dict[str, int]
    dropped_exit: int
    outside_chain: int
    distance_count: int
    distance_mean: float
    distance_std: float
    pixel_std_mean: float
    pixel_std_median: float
    pixel_std_p90: float
    max_increment_t: float
    max_increment_theta: float
    trajectories_solved: List[int]
    corrections_sha256: str
    histogram_csv: str = ""

    def to_json(self) -> Dict[str, object]:
        return asdict(self)


def tile_memberships(xyz: np.ndarray, tile_size: float, overlap: float) -> List[Tuple[TileKey, np.ndarray]]:
    """For each tile touched, the indices of the points it receives (containing tile plus overlap borders)."""
    if not overlap < tile_size / 2.0:
        raise ValueError("Overlap must be smaller than half the tile size.")
    xy = np.asarray(xyz, dtype=np.float64)[:, :2]
    base = np.floor(xy / tile_size).astype(np.int64)
    frac = xy - base * tile_size
    near_lo = frac <= overlap
    near_hi = (tile_size - frac) <= overlap
    keys: List[np.ndarray] = []
    idx: List[np.ndarray] = []
    all_idx = np.arange(xy.shape[0])
    for dx in (-1, 0, 1):
        mx = np.ones(xy.shape[0], dtype=bool) if dx == 0 else (near_lo[:, 0] if dx < 0 else near_hi[:, 0])
        for dy in (-1, 0, 1):
            my = np.ones(xy.shape[0], dtype=bool) if dy == 0 else (near_lo[:, 1] if dy < 0 else near_hi[:, 1])
            sel = mx & my
            keys.append(base[sel] + np.array([dx, dy]))
            idx.append(all_idx[sel])
    if not keys:
        return []
    k = np.concatenate(keys)
    i = np.concatenate(idx)
    if k.size == 0:
        return []
    uniq, inverse = np.unique(k, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    out = []
    for u, (tx, ty) in enumerate(uniq.tolist()):
        members = np.sort(i[inverse == u])
        out.append((TileKey(int(tx), int(ty), tile_size), members))
    return out


def emit_tiles(xyz: np.ndarray, tile_size: float = 15.0, overlap: float = 0.3) -> List[TileKey]:
    return [key for key, _ in tile_memberships(np.asarray(xyz, dtype=np.float64).reshape(1, 3), tile_size, overlap)]


def _reach_mask(orig_xy: np.ndarray, target: np.ndarray, tile_size: float, overlap: float) -> np.ndarray:
    """True where tile `target` (N, 2) is one of the tiles a point at orig_xy was emitted to."""
    base = np.floor(orig_xy / tile_size).astype(np.int64)
    frac = orig_xy - base * tile_size
    d = target - base
    ok = (d == 0) | ((d == -1) & (frac <= overlap)) | ((d == 1) & ((tile_size - frac) <= overlap))
    return ok[:, 0] & ok[:, 1]


def _pack_json_payload(meta: Dict[str, object], *arrays: np.ndarray) -> bytes:
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [_LEN.pack(len(head)), head]
    for arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        parts += [_LEN.pack(len(raw)), raw]
    return b"".join(parts)


def _unpack_json_payload(data: bytes) -> Tuple[Dict[str, object], List[np.ndarray]]:
    (n,) = _LEN.unpack_from(data, 0)
    meta = json.loads(data[4 : 4 + n].decode("utf-8"))
    offset = 4 + n
    arrays = []
    while offset < len(data):
        (m,) = _LEN.unpack_from(data, offset)
        offset += 4
        arrays.append(np.frombuffer(data, dtype="<f8", count=m // 8, offset=offset).copy())
        offset += m
    return meta, arrays


def _encode_broadcast(params: Dict[str, object], corrections: Optional[CorrectionsSet] = None) -> bytes:
    head = json.dumps(params, sort_keys=True).encode("utf-8")
    tail = corrections.to_bytes() if corrections is not None else b""
    return _LEN.pack(len(head)) + head + tail


def _decode_broadcast(data: bytes) -> Tuple[Dict[str, object], Optional[CorrectionsSet]]:
    (n,) = _LEN.unpack_from(data, 0)
    params = json.loads(data[4 : 4 + n].decode("utf-8"))
    tail = data[4 + n :]
    return params, (CorrectionsSet.from_bytes(tail) if tail else None)


def _save_npy(path: Path, records: np.ndarray) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.save(fh, records, allow_pickle=False)
    os.replace(tmp, path)


def load_tile(path: str | Path) -> np.ndarray:
    recs = np.load(path, allow_pickle=False)
    if recs.dtype != POINT_RECORD_DTYPE:
        raise ValueError(f"Tile file {path} does not hold point records.")
    return recs


# preprocessing job


@register_map("preprocess.map")
def _preprocess_map(split: str) -> Iterator[Tuple[bytes, bytes]]:
    params, _ = _decode_broadcast(broadcast_read())
    cfg = PipelineParams.from_json(params)
    strip = read_strip(split)
    if strip.point_count:
        arcs = strip.arc[strip.valid]
        yield _KEY_ARC + _TRAJ_KEY.pack(strip.trajectory_id), np.array([arcs.min(), arcs.max()]).tobytes()
    for key, recs in segment_to_tiles(strip, cfg):
        yield key.to_bytes(), recs.tobytes()


def segment_to_tiles(strip: ScanStrip, cfg: PipelineParams) -> List[Tuple[TileKey, np.ndarray]]:
    normals, labels = segment_strip(strip, cfg.segmentation)
    recs = strip.point_records(labels.labels, normals.normals, labeled_only=True)
    if recs.size == 0:
        return []
    return [(key, recs[idx]) for key, idx in tile_memberships(recs["xyz"], cfg.tiling.tile_size, cfg.tiling.overlap)]


@register_reduce("preprocess.reduce")
def _preprocess_reduce(key: bytes, values: Iterator[bytes]) -> Iterator[Tuple[bytes, bytes]]:
    params, _ = _decode_broadcast(broadcast_read())
    if key[:1] == _KEY_ARC:
        ranges = np.array([np.frombuffer(v, dtype=np.float64) for v in values])
        yield key, np.array([ranges[:, 0].min(), ranges[:, 1].max()]).tobytes()
        return
    tile = TileKey.from_bytes(key, float(params["tiling"]["tile_size"]))
    recs = sort_point_records(np.concatenate([np.frombuffer(v, dtype=POINT_RECORD_DTYPE) for v in values]))
    path = Path(params["tiles_dir"]) / tile.filename
    _save_npy(path, recs)
    summary = {"tx": tile.tx, "ty": tile.ty, "path": str(path), "count": int(recs.size)}
    yield key, json.dumps(summary, sort_keys=True).encode("utf-8")


def preprocess_job(
    strip_paths: Sequence[str | Path],
    params: PipelineParams,
    tiles_dir: str | Path,
    log_fn: Optional[Callable[[str], None]] = None,
) -> TileIndex:
    out = Path(tiles_dir)
    out.mkdir(parents=True, exist_ok=True)
    for stale in out.glob("tile_*.npy"):
        stale.unlink()
    payload = params.to_json()
    payload["tiles_dir"] = str(out)
    spec = JobSpec(
        name="preprocess",
        inputs=[str(p) for p in strip_paths],
        map_fn="preprocess.map",
        reduce_fn="preprocess.reduce",
        partitions=params.partitions(),
        broadcast=_encode_broadcast(payload),
        scratch=Path(params.engine.scratch),
        max_retries=params.engine.max_retries,
        spill_bytes=params.engine.spill_mb * 1024 * 1024,
    )
    result = run_job(spec, params.engine.workers, log_fn)
    tiles: List[TileEntry] = []
    trajectories: Dict[int, Tuple[float, float]] = {}
    for rec in read_output(result.outputs):
        if rec.key[:1] == _KEY_ARC:
            (tid,) = _TRAJ_KEY.unpack(rec.key[1:])
            lo, hi = np.frombuffer(rec.value, dtype=np.float64)
            trajectories[int(tid)] = (float(lo), float(hi))
        else:
            tiles.append(TileEntry(**json.loads(rec.value.decode("utf-8"))))
    tiles.sort(key=lambda t: (t.tx, t.ty))
    index = TileIndex(params.tiling.tile_size, params.tiling.overlap, tiles, trajectories)
    index.save(out / TILE_INDEX_NAME)
    return index


# estimation job


@register_map("estimate.map")
def _estimate_map(split: Tuple[int, int, str]) -> Iterator[Tuple[bytes, bytes]]:
    params, corrections = _decode_broadcast(broadcast_read())
    if corrections is None:
        raise ValueError("Estimation broadcast carries no corrections.")
    tx, ty, path = split
    cfg = PipelineParams.from_json(params)
    result = estimate_tile(
        load_tile(path), TileKey(int(tx), int(ty), cfg.tiling.tile_size), corrections, cfg,
        float(params["threshold"]), float(params["lsm_pitch"]),
    )
    for tid, blocks in sorted(result["blocks"].items()):
        yield _KEY_TILE + _TRAJ_KEY.pack(tid), pack_blocks(blocks)
    yield _KEY_STATS, _pack_stats(
        result["counts"],
        DistanceHistogram.from_distances(result["distances"]),
        DistanceHistogram.from_distances(result["pixel_std"]),
    )


def _pack_stats(counts: Dict[str, object], distances: DistanceHistogram, pixel_std: DistanceHistogram) -> bytes:
    d_meta, d_bins, d_counts = distances.to_payload()
    p_meta, p_bins, p_counts = pixel_std.to_payload()
    meta = {"counts": counts, "distance": d_meta, "pixel_std": p_meta}
    return _pack_json_payload(meta, d_bins, d_counts, p_bins, p_counts)


def _unpack_stats(data: bytes) -> Tuple[Dict[str, int], DistanceHistogram, DistanceHistogram]:
    meta, arrays = _unpack_json_payload(data)
    distances = DistanceHistogram.from_payload(meta["distance"], arrays[0], arrays[1])
    pixel_std = DistanceHistogram.from_payload(meta["pixel_std"], arrays[2], arrays[3])
    return {k: int(v) for k, v in meta["counts"].items()}, distances, pixel_std


def _tile_core(recs: np.ndarray, tile: TileKey, corrections: CorrectionsSet, cfg: PipelineParams) -> Dict[str, object]:
    """Correct a tile's records and select the ones this tile owns (corrected position in its core, in-chain)."""
    ts = cfg.tiling.tile_size
    tids = recs["trajectory_id"].astype(np.int64)
    unknown = sorted(set(np.unique(tids).tolist()) - set(corrections.trajectory_ids))
    if unknown:
        raise KeyError(f"Tile ({tile.tx}, {tile.ty}) references unknown trajectories {unknown}.")
    corrected, in_chain, idx, alpha = corrections.correct(recs["xyz"], recs["t0"], recs["arc"], tids)
    here = np.array([tile.tx, tile.ty])
    orig_tile = np.floor(recs["xyz"][:, :2] / ts).astype(np.int64)
    new_tile = np.floor(corrected[:, :2] / ts).astype(np.int64)
    home = np.all(orig_tile == here, axis=1)
    core = np.all(new_tile == here, axis=1)
    reach = _reach_mask(recs["xyz"][:, :2], new_tile, ts, cfg.tiling.overlap)
    return {
        "corrected": corrected,
        "keep": core & in_chain,
        "idx": idx,
        "alpha": alpha,
        "tids": tids,
        "outside_chain": int(np.count_nonzero(home & ~in_chain)),
        "dropped_exit": int(np.count_nonzero(home & in_chain & ~reach)),
    }


def tile_latent_map(
    recs: np.ndarray,
    tile: TileKey,
    corrections: CorrectionsSet,
    cfg: PipelineParams,
    threshold: float,
    lsm_pitch: float,
) -> Tuple[Optional[LatentMap], Optional[CorrespondenceBatch]]:
    """The latent map one estimation map task builds for a tile, with its correspondences."""
    return _build_tile_map(recs, _tile_core(recs, tile, corrections, cfg), cfg, threshold, lsm_pitch)


def _build_tile_map(
    recs: np.ndarray, sel: Dict[str, object], cfg: PipelineParams, threshold: float, lsm_pitch: float
) -> Tuple[Optional[LatentMap], Optional[CorrespondenceBatch]]:
    keep = sel["keep"]
    if not np.any(keep):
        return None, None
    pts = sel["corrected"][keep]
    normals = recs["normal"][keep]
    latent_cfg = LatentMapConfig(cfg.latent_map.cell_size, cfg.latent_map.normal_gate_deg, lsm_pitch)
    latent = build_map(pts, normals, latent_cfg, cfg.noise.sigma_dist)
    return latent, latent.correspond_batch(pts, normals, threshold)


def estimate_tile(
    recs: np.ndarray,
    tile: TileKey,
    corrections: CorrectionsSet,
    cfg: PipelineParams,
    threshold: float,
    lsm_pitch: float,
) -> Dict[str, object]:
    sel = _tile_core(recs, tile, corrections, cfg)
    keep = sel["keep"]
    counts: Dict[str, object] = {
        "kept": int(np.count_nonzero(keep)),
        "accepted": 0,
        "threshold": 0,
        "normal_gate": 0,
        "low_confidence": 0,
        "outside_chain": sel["outside_chain"],
        "dropped_exit": sel["dropped_exit"],
    }
    blocks: Dict[int, list] = {}
    latent, batch = _build_tile_map(recs, sel, cfg, threshold, lsm_pitch)
    if latent is None:
        return {
            "blocks": blocks,
            "counts": counts,
            "accepted": np.zeros(recs.shape[0], dtype=bool),
            "distances": np.zeros(0),
            "pixel_std": np.zeros(0),
        }
    counts.update(batch.counts())

    acc = batch.accepted
    r = recs["xyz"][keep] - recs["t0"][keep]
    k_tid = sel["tids"][keep]
    idx = sel["idx"][keep]
    alpha = sel["alpha"][keep]
    for tid in np.unique(k_tid[acc]).tolist():
        m = acc & (k_tid == tid)
        blocks[int(tid)] = distance_blocks_batch(
            int(tid), idx[m], alpha[m], batch.w[m], r[m], batch.distance[m], cfg.noise
        )
    var = latent.variance[latent.count >= 2]
    accepted = np.zeros(recs.shape[0], dtype=bool)
    accepted[np.flatnonzero(keep)[acc]] = True
    return {
        "blocks": blocks,
        "counts": counts,
        "accepted": accepted,
        "distances": batch.distance[acc],
        "pixel_std": np.sqrt(var),
    }


@register_reduce("estimate.reduce")
def _estimate_reduce(key: bytes, values: Iterator[bytes]) -> Iterator[Tuple[bytes, bytes]]:
    params, corrections = _decode_broadcast(broadcast_read())
    if key[:1] == _KEY_STATS:
        # folded one tile at a time; only histogram bins and sums are held
        total: Dict[str, int] = {}
        distances = DistanceHistogram(DEFAULT_BIN_WIDTH)
        pixel_std = DistanceHistogram(DEFAULT_BIN_WIDTH)
        for v in values:
            counts, d_hist, p_hist = _unpack_stats(v)
            for name, count in counts.items():
                total[name] = total.get(name, 0) + count
            distances = DistanceHistogram.merge([distances, d_hist])
            pixel_std = DistanceHistogram.merge([pixel_std, p_hist])
        yield key, _pack_stats(total, distances, pixel_std)
        return

    cfg = PipelineParams.from_json(params)
    (tid,) = _TRAJ_KEY.unpack(key[1:])
    lidar = (block for v in values for block in unpack_blocks(v))
    sol = solve_trajectory(int(tid), lidar, corrections, cfg)
    head = _INCREMENT_HEADER.pack(sol.start, sol.n)
    yield key, head + np.ascontiguousarray(sol.x, dtype="<f8").tobytes() + np.ascontiguousarray(sol.std, dtype="<f8").tobytes()


def solve_trajectory(tid: int, lidar_blocks: Iterable[NormalBlock], corrections: CorrectionsSet, cfg: PipelineParams):
    """Add prior and smoothness over the anchors the LiDAR blocks touch, then solve the chain."""
    chain = corrections.chain(tid)
    lidar = combine_blocks(lidar_blocks)
    if not lidar:
        raise ValueError(f"No LiDAR blocks for trajectory {tid}.")
    lo = min(b.i for b in lidar)
    hi = max(b.i if b.kind == DIAG else b.i + 1 for b in lidar)
    n = hi - lo + 1
    current = chain.values[lo : hi + 1]
    scale = FIXED_PRIOR_SCALE if tid in cfg.fixed_trajectories else 1.0
    extra = prior_blocks(n, cfg.noise, current, tid, lo, scale)
    if n >= 2:
        extra += smooth_blocks(n, cfg.noise, current, tid, lo)
    return solve(assemble(lidar + extra, cfg.noise))


def _increments_from(data: bytes) -> Tuple[int, np.ndarray, np.ndarray]:
    start, n = _INCREMENT_HEADER.unpack_from(data, 0)
    off = _INCREMENT_HEADER.size
    x = np.frombuffer(data, dtype="<f8", count=6 * n, offset=off).reshape(n, 6).copy()
    std = np.frombuffer(data, dtype="<f8", count=6 * n, offset=off + 48 * n).reshape(n, 6).copy()
    return int(start), x, std


def estimate_iteration(
    tiles: TileIndex,
    corrections: CorrectionsSet,
    step: Tuple[float, float],
    params: PipelineParams,
    log_fn: Optional[Callable[[str], None]] = None,
) -> Tuple[CorrectionsSet, IterationStats, DistanceHistogram]:
    threshold, pitch = float(step[0]), float(step[1])
    payload = params.to_json()
    payload["threshold"] = threshold
    payload["lsm_pitch"] = pitch
    spec = JobSpec(
        name=f"estimate-{corrections.iteration + 1:03d}",
        inputs=[(t.tx, t.ty, t.path) for t in tiles.tiles],
        map_fn="estimate.map",
        reduce_fn="estimate.reduce",
        partitions=params.partitions(),
        broadcast=_encode_broadcast(payload, corrections),
        scratch=Path(params.engine.scratch),
        max_retries=params.engine.max_retries,
        spill_bytes=params.engine.spill_mb * 1024 * 1024,
    )
    try:
        result = run_job(spec, params.engine.workers, log_fn)
    except JobError as exc:
        cause = exc.__cause__
        if isinstance(cause, SingularChainError):
            raise IterationError(f"Iteration {corrections.iteration + 1}: {cause}", cause.trajectory_id) from cause
        if isinstance(cause, KeyError):
            raise IterationError(f"Iteration {corrections.iteration + 1}: {cause.args[0]}") from cause
        raise

    increments: Dict[int, tuple] = {}
    counts: Dict[str, int] = {}
    hist = DistanceHistogram(DEFAULT_BIN_WIDTH)
    pixel_std = DistanceHistogram(DEFAULT_BIN_WIDTH)
    for rec in read_output(result.outputs):
        if rec.key[:1] == _KEY_STATS:
            counts, hist, pixel_std = _unpack_stats(rec.value)
        else:
            (tid,) = _TRAJ_KEY.unpack(rec.key[1:])
            increments[int(tid)] = _increments_from(rec.value)

    updated = corrections.accumulate(increments)
    max_t = max((float(np.max(np.linalg.norm(x[:, :3], axis=1))) for _, x, _ in increments.values()), default=0.0)
    max_r = max((float(np.max(np.linalg.norm(x[:, 3:], axis=1))) for _, x, _ in increments.values()), default=0.0)
    stats = IterationStats(
        iteration=updated.iteration,
        threshold=threshold,
        lsm_pitch=pitch,
        kept=int(counts.get("kept", 0)),
        accepted=int(counts.get("accepted", 0)),
        rejected={k: int(counts.get(k, 0)) for k in ("threshold", "normal_gate", "low_confidence")},
        dropped_exit=int(counts.get("dropped_exit", 0)),
        outside_chain=int(counts.get("outside_chain", 0)),
        distance_count=hist.count,
        distance_mean=hist.mean,
        distance_std=hist.std,
        pixel_std_mean=pixel_std.mean,
        pixel_std_median=pixel_std.quantile(0.5),
        pixel_std_p90=pixel_std.quantile(0.9),
        max_increment_t=max_t,
        max_increment_theta=max_r,
        trajectories_solved=sorted(increments),
        corrections_sha256=updated.provenance,
    )
    return updated, stats, hist


class StripAdjustment:
    """Sequential coordinator of the estimation iterations; everything heavy runs inside engine jobs."""

    def __init__(
        self,
        tiles: TileIndex,
        params: PipelineParams,
        out_dir: str | Path,
        log_fn: Optional[Callable[[str], None]] = None,
    ):
        self.tiles = tiles
        self.params = params
        self.out_dir = Path(out_dir)
        self.log_fn = log_fn
        self.logs: List[Dict[str, str]] = []

    def _log(self, level: str, message: str, stage: str) -> None:
        self.logs.append(
            {
                "timestamp_utc": datetime.now(timezone.utc).isoformat(),
                "level": level,
                "stage": stage,
                "message": message,
            }
        )
        if len(self.logs) > 2000:
            self.logs = self.logs[-1000:]
        if self.log_fn is not None:
            self.log_fn(f"[{level}] {stage}: {message}")

    def initial_corrections(self) -> CorrectionsSet:
        if not self.tiles.trajectories:
            raise ValueError("Tile index lists no trajectories; run preprocess first.")
        return CorrectionsSet.zeros(self.tiles.trajectories, self.params.anchors.spacing)

    def run(
        self, plan: IterationPlan, corrections: Optional[CorrectionsSet] = None
    ) -> Tuple[CorrectionsSet, List[IterationStats]]:
        plan.validate()
        current = corrections if corrections is not None else self.initial_corrections()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        history: List[IterationStats] = []
        for k, step in enumerate(plan.steps, start=1):
            self._log("INFO", f"threshold={step[0]:.4f} m, lsm_pitch={step[1]:.3f} m", f"iteration {k}")
            current, stats, hist = estimate_iteration(self.tiles, current, step, self.params, self.log_fn)
            hist_path = self.out_dir / f"histogram_{stats.iteration:02d}.csv"
            write_histogram_csv(hist, hist_path)
            stats.histogram_csv = hist_path.name
            self._write_json(self.out_dir / f"stats_{stats.iteration:02d}.json", stats.to_json())
            write_corrections(current, self.out_dir / f"corrections_{stats.iteration:02d}.bin")
            if stats.dropped_exit:
                self._log("WARN", f"{stats.dropped_exit} points left all emitted tiles", f"iteration {k}")
            if stats.outside_chain:
                self._log("WARN", f"{stats.outside_chain} points outside their anchor chain", f"iteration {k}")
            self._log(
                "INFO",
                f"accepted={stats.accepted} std={stats.distance_std * 1000:.3f} mm "
                f"max|dt|={stats.max_increment_t * 1000:.3f} mm",
                f"iteration {k}",
            )
            history.append(stats)
        write_corrections(current, self.out_dir / "corrections.bin")
        write_corrections_table(current, self.out_dir / "corrections.csv")
        summary = {
            "iterations": len(history),
            "accepted": [s.accepted for s in history],
            "distance_std": [s.distance_std for s in history],
            "corrections_sha256": current.provenance,
        }
        self._write_json(self.out_dir / "schedule_summary.json", summary)
        self._write_json(self.out_dir / "run_log.json", {"logs": self.logs})
        return current, history

    @staticmethod
    def _write_json(path: Path, payload: Dict[str, object]) -> None:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)


def run_schedule(
    tiles: TileIndex,
    plan: IterationPlan,
    params: PipelineParams,
    out_dir: str | Path,
    corrections: Optional[CorrectionsSet] = None,
    log_fn: Optional[Callable[[str], None]] = None,
) -> Tuple[CorrectionsSet, List[IterationStats]]:
    return StripAdjustment(tiles, params, out_dir, log_fn).run(plan, corrections)


def corrected_strip(strip: ScanStrip, corrections: CorrectionsSet) -> Tuple[np.ndarray, np.ndarray]:
    """Corrected coordinates of every valid strip point (row-major) and the in-chain mask."""
    xyz = strip.xyz[strip.valid]
    t0 = strip.t0[strip.valid]
    arc = strip.arc[strip.valid]
    tids = np.full(xyz.shape[0], strip.trajectory_id)
    out, ok, _, _ = corrections.correct(xyz, t0, arc, tids)
    return out, ok
