from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

DEFAULT_BIN_WIDTH = 0.0001
PPM_MAGIC = b"P6"


@dataclass
class DistanceHistogram:
    """Sparse histogram plus running sums; mergeable so partial results never hold raw samples."""

    bin_width: float
    bins: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    count: int = 0
    total: float = 0.0
    total_sq: float = 0.0

    @classmethod
    def from_distances(cls, distances: np.ndarray, bin_width: float = DEFAULT_BIN_WIDTH) -> "DistanceHistogram":
        if not bin_width > 0.0:
            raise ValueError("bin_width must be positive.")
        d = np.asarray(distances, dtype=np.float64).reshape(-1)
        if d.size == 0:
            return cls(bin_width)
        # half-open bins [k*w, (k+1)*w)
        k = np.floor(d / bin_width).astype(np.int64)
        bins, counts = np.unique(k, return_counts=True)
        return cls(bin_width, bins, counts.astype(np.int64), int(d.size), float(np.sum(d)), float(np.sum(d * d)))

    @classmethod
    def merge(cls, parts: Iterable["DistanceHistogram"], bin_width: float = DEFAULT_BIN_WIDTH) -> "DistanceHistogram":
        """Fold partial histograms one at a time; memory stays bounded by the number of occupied bins."""
        out = cls(bin_width)
        for part in parts:
            if part.bin_width != bin_width:
                raise ValueError(f"Cannot merge bin width {part.bin_width:g} into {bin_width:g}.")
            if part.count == 0:
                continue
            keys = np.concatenate([out.bins, part.bins])
            bins, inverse = np.unique(keys, return_inverse=True)
            counts = np.bincount(inverse, weights=np.concatenate([out.counts, part.counts]), minlength=bins.size)
            out = cls(
                bin_width,
                bins,
                counts.astype(np.int64),
                out.count + part.count,
                out.total + part.total,
                out.total_sq + part.total_sq,
            )
        return out

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else 0.0

    @property
    def std(self) -> float:
        if not self.count:
            return 0.0
        mean = self.mean
        return float(np.sqrt(max(self.total_sq / self.count - mean * mean, 0.0)))

    def quantile(self, q: float) -> float:
        """Bin center holding the q-th sample; exact to half a bin."""
        if not self.count:
            return 0.0
        if not 0.0 <= q <= 1.0:
            raise ValueError("q must lie in [0, 1].")
        cumulative = np.cumsum(self.counts)
        rank = min(int(np.ceil(q * self.count)), self.count)
        idx = int(np.searchsorted(cumulative, max(rank, 1)))
        return float((self.bins[idx] + 0.5) * self.bin_width)

    def to_payload(self) -> Tuple[Dict[str, float], np.ndarray, np.ndarray]:
        meta = {"count": self.count, "total": self.total, "total_sq": self.total_sq, "bin_width": self.bin_width}
        return meta, self.bins.astype(np.float64), self.counts.astype(np.float64)

    @classmethod
    def from_payload(cls, meta: Dict[str, float], bins: np.ndarray, counts: np.ndarray) -> "DistanceHistogram":
        return cls(
            float(meta["bin_width"]),
            np.asarray(bins).astype(np.int64),
            np.asarray(counts).astype(np.int64),
            int(meta["count"]),
            float(meta["total"]),
            float(meta["total_sq"]),
        )

    def centers(self) -> np.ndarray:
        return (self.bins + 0.5) * self.bin_width

    def summary(self) -> Dict[str, float]:
        return {"count": self.count, "mean": self.mean, "std": self.std, "bin_width": self.bin_width}


def write_histogram_csv(hist: DistanceHistogram, path: str | Path) -> None:
    p = Path(path)
    tmp = p.with_name(p.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# count={hist.count} mean={hist.mean:.9e} std={hist.std:.9e} bin_width={hist.bin_width:g}\n")
        writer = csv.writer(fh)
        writer.writerow(["bin_center", "count"])
        for center, count in zip(hist.centers().tolist(), hist.counts.tolist()):
            writer.writerow([f"{center:.6e}", count])
    os.replace(tmp, p)


def read_histogram_csv(path: str | Path) -> Tuple[Dict[str, float], List[Tuple[float, int]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    meta: Dict[str, float] = {}
    for item in lines[0].lstrip("# ").split():
        key, value = item.split("=")
        meta[key] = float(value)
    rows = [(float(a), int(b)) for a, b in csv.reader(lines[2:])]
    return meta, rows


def temperature_colors(values: np.ndarray, scale_max: float) -> np.ndarray:
    """Blue (0) through cyan, green and yellow to red (>= scale_max) by hue."""
    if not scale_max > 0.0:
        raise ValueError("scale_max must be positive.")
    t = np.clip(np.asarray(values, dtype=np.float64) / scale_max, 0.0, 1.0)
    h6 = (1.0 - t) * 4.0
    x = 1.0 - np.abs(np.mod(h6, 2.0) - 1.0)
    sector = np.minimum(np.floor(h6).astype(np.int64), 4)
    zero = np.zeros_like(t)
    one = np.ones_like(t)
    r = np.select([sector == 0, sector == 1, sector == 2, sector == 3, sector == 4], [one, x, zero, zero, x])
    g = np.select([sector == 0, sector == 1, sector == 2, sector == 3, sector == 4], [x, one, one, x, zero])
    b = np.select([sector == 0, sector == 1, sector == 2, sector == 3, sector == 4], [zero, zero, x, one, one])
    return np.round(np.stack([r, g, b], axis=-1) * 255.0).astype(np.uint8)


def std_map_render(dump: Dict[str, np.ndarray], scale_max: float = 0.007, resolution: float = 0.05) -> np.ndarray:
    """Top view of per-pixel std; each image cell shows the largest std that falls in it, empty cells are black."""
    x = dump["x"]
    y = dump["y"]
    std = dump["std"]
    use = np.isfinite(std)
    if not np.any(use):
        raise ValueError("Map dump holds no pixel with a defined std.")
    x, y, std = x[use], y[use], std[use]
    col = np.floor((x - x.min()) / resolution + 0.5).astype(np.int64)
    row = np.floor((y.max() - y) / resolution + 0.5).astype(np.int64)
    height, width = int(row.max()) + 1, int(col.max()) + 1
    grid = np.full(height * width, -np.inf)
    np.maximum.at(grid, row * width + col, std)
    image = np.zeros((height * width, 3), dtype=np.uint8)
    filled = np.isfinite(grid)
    image[filled] = temperature_colors(grid[filled], scale_max)
    return image.reshape(height, width, 3)


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    height, width = img.shape[:2]
    Path(path).write_bytes(PPM_MAGIC + f"\n{width} {height}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != PPM_MAGIC:
        raise ValueError(f"{path} is not a binary PPM.")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=width * height * 3).reshape(height, width, 3)


ROTATION_LEVER_M = 10.0


def _skew(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def fit_rigid_gauge(diff: np.ndarray, positions: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Least-squares rigid motion (T, Omega) shared by all samples of diff (N, 6).
    A rigid motion about the sample centroid shifts an anchor at p by T + Omega x (p - c) and
    rotates it by Omega. Rotation rows are scaled by ROTATION_LEVER_M to weigh them like metres.
    Without positions only the constant offset is fitted.
    """
    n = diff.shape[0]
    p = np.zeros((n, 3)) if positions is None else np.asarray(positions, dtype=np.float64)
    p = p - p.mean(axis=0)
    A = np.zeros((n, 6, 6))
    A[:, :3, :3] = np.eye(3)
    A[:, :3, 3:] = -_skew(p)
    A[:, 3:, 3:] = ROTATION_LEVER_M * np.eye(3)
    b = np.concatenate([diff[:, :3], ROTATION_LEVER_M * diff[:, 3:]], axis=1)
    gauge, *_ = np.linalg.lstsq(A.reshape(-1, 6), b.reshape(-1), rcond=None)
    return gauge


def truth_report(
    estimated: Dict[int, Tuple[np.ndarray, np.ndarray]],
    truth: Dict[int, Tuple[np.ndarray, np.ndarray]],
    positions: Optional[Dict[int, np.ndarray]] = None,
    fixed_gauge: bool = False,
) -> Dict[str, object]:
    """
    Compare estimated and true corrections sampled at the truth arcs.

    Both maps are {trajectory_id: (arcs (N,), values (N, 6))}. The block is only determined up
    to one rigid motion of the whole scene, so a single gauge shared by every trajectory is fitted
    and removed; offsets between trajectories stay in the error. positions maps trajectory ids to
    the (N, 3) sensor positions at the truth arcs and enables the rotational part of the gauge.
    With fixed_gauge (fixed trajectories pin the frame) nothing is removed.
    """
    tids = [tid for tid in sorted(truth) if tid in estimated]
    diffs: List[np.ndarray] = []
    where: List[np.ndarray] = []
    for tid in tids:
        arcs, true_values = truth[tid]
        est_arcs, est_values = estimated[tid]
        est = np.stack([np.interp(arcs, est_arcs, est_values[:, c]) for c in range(6)], axis=1)
        diffs.append(est - true_values)
        if positions is not None:
            where.append(np.asarray(positions[tid], dtype=np.float64).reshape(-1, 3))
    gauge = np.zeros(6)
    if diffs and not fixed_gauge:
        stacked = np.concatenate(diffs)
        gauge = fit_rigid_gauge(stacked, np.concatenate(where) if where else None)
        centroid = np.concatenate(where).mean(axis=0) if where else np.zeros(3)
        for k, diff in enumerate(diffs):
            lever = (where[k] - centroid) if where else np.zeros((diff.shape[0], 3))
            shift = gauge[:3] + np.cross(gauge[3:], lever)
            diffs[k] = diff - np.concatenate([shift, np.broadcast_to(gauge[3:], shift.shape)], axis=1)

    per_traj: Dict[str, Dict[str, float]] = {}
    all_pos: List[np.ndarray] = []
    for tid, diff in zip(tids, diffs):
        pos = np.linalg.norm(diff[:, :3], axis=1)
        rot = np.linalg.norm(diff[:, 3:], axis=1)
        per_traj[str(tid)] = {
            "samples": int(diff.shape[0]),
            "rms_position_m": float(np.sqrt(np.mean(pos**2))),
            "rms_rotation_rad": float(np.sqrt(np.mean(rot**2))),
        }
        all_pos.append(pos)
    pos_all = np.concatenate(all_pos) if all_pos else np.zeros(0)
    percentiles = {
        f"p{q}": float(np.percentile(pos_all, q)) if pos_all.size else 0.0 for q in (50, 90, 99)
    }
    return {
        "trajectories": per_traj,
        "gauge": [float(v) for v in gauge],
        "gauge_removed": not fixed_gauge,
        "rms_position_m": float(np.sqrt(np.mean(pos_all**2))) if pos_all.size else 0.0,
        "position_error_percentiles_m": percentiles,
    }


def write_report(report: Dict[str, object], path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
