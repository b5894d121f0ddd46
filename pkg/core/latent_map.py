from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .geometry import PlaneTarget

CellIndex = Tuple[int, int, int]

_CELL_BIAS = 1 << 20
_PIX_SHIFT = np.int64(20)
_LSM_SHIFT = np.int64(40)
_FACE_OFFSETS = ((0, 0, 0), (-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1))

ACCEPTED = 0
REJECT_THRESHOLD = 1
REJECT_NORMAL_GATE = 2
REJECT_LOW_CONFIDENCE = 3


@dataclass
class LatentMapConfig:
    cell_size: float = 1.0
    normal_gate_deg: float = 30.0
    lsm_pitch: float = 0.02


@dataclass(frozen=True)
class HeightPixel:
    sum_w: float
    sum_wh: float
    sum_wh2: float
    mean_height: float
    variance: float
    count: int

    @property
    def low_confidence(self) -> bool:
        return self.count < 2

    @classmethod
    def from_samples(cls, heights: List[float], weights: Optional[List[float]] = None) -> "HeightPixel":
        h = np.asarray(heights, dtype=np.float64)
        w = np.ones_like(h) if weights is None else np.asarray(weights, dtype=np.float64)
        mean, var = pixel_statistics(
            np.array([w.sum()]), np.array([(w * h).sum()]), np.array([(w * h * h).sum()]),
            np.array([(w * w).sum()]), np.array([h.size]),
        )
        return cls(float(w.sum()), float((w * h).sum()), float((w * h * h).sum()), float(mean[0]), float(var[0]), int(h.size))


@dataclass
class LocalSurfaceModel:
    cell: CellIndex
    base_normal: np.ndarray
    base_point: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    pitch: float
    u_min: float
    v_min: float
    shape: Tuple[int, int]
    normal_sum: List[float]
    members: int = 0

    @property
    def mean_normal(self) -> np.ndarray:
        n = np.asarray(self.normal_sum, dtype=np.float64)
        return n / np.linalg.norm(n)


@dataclass(frozen=True)
class Correspondence:
    target: PlaneTarget
    distance: float
    cell: CellIndex
    lsm: int
    pixel: Tuple[int, int]


@dataclass
class CorrespondenceBatch:
    status: np.ndarray
    distance: np.ndarray
    w: np.ndarray
    s: np.ndarray
    lsm: np.ndarray

    @property
    def accepted(self) -> np.ndarray:
        return self.status == ACCEPTED

    def counts(self) -> Dict[str, int]:
        return {
            "accepted": int(np.count_nonzero(self.status == ACCEPTED)),
            "threshold": int(np.count_nonzero(self.status == REJECT_THRESHOLD)),
            "normal_gate": int(np.count_nonzero(self.status == REJECT_NORMAL_GATE)),
            "low_confidence": int(np.count_nonzero(self.status == REJECT_LOW_CONFIDENCE)),
        }


def cell_of(p: np.ndarray, cell_size: float) -> CellIndex:
    if not cell_size > 0.0:
        raise ValueError("cell_size must be positive.")
    ix, iy, iz = np.floor(np.asarray(p, dtype=np.float64).reshape(3) / cell_size).astype(np.int64)
    return int(ix), int(iy), int(iz)


def cells_of(xyz: np.ndarray, cell_size: float) -> np.ndarray:
    if not cell_size > 0.0:
        raise ValueError("cell_size must be positive.")
    return np.floor(np.asarray(xyz, dtype=np.float64) / cell_size).astype(np.int64)


def _cell_codes(cells: np.ndarray) -> np.ndarray:
    c = cells.astype(np.int64) + _CELL_BIAS
    return (c[..., 0] << np.int64(42)) | (c[..., 1] << np.int64(21)) | c[..., 2]


def pixel_statistics(
    sum_w: np.ndarray, sum_wh: np.ndarray, sum_wh2: np.ndarray, sum_w2: np.ndarray, count: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Weighted mean (count >= 1) and unbiased weighted variance (count >= 2); NaN where undefined."""
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = np.where(count >= 1, sum_wh / sum_w, np.nan)
        denom = sum_w - sum_w2 / sum_w
        var = np.where(count >= 2, (sum_wh2 - sum_wh * sum_wh / sum_w) / denom, np.nan)
    var = np.where(np.isnan(var), np.nan, np.maximum(var, 0.0))
    return mean, var


def frame_axes(normal: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n = np.asarray(normal, dtype=np.float64)
    e = np.zeros(3)
    e[int(np.argmin(np.abs(n)))] = 1.0
    u = e - np.dot(e, n) * n
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return u, v


class LatentMap:
    """
    Voxel-hashed surface map for one tile. Points are inserted, then estimate() finalizes
    per-pixel statistics and normals; correspondences are only issued after that.
    """

    def __init__(self, cfg: Optional[LatentMapConfig] = None, sigma_dist: float = 0.005):
        self.cfg = cfg or LatentMapConfig()
        if not self.cfg.cell_size > 0.0 or not self.cfg.lsm_pitch > 0.0:
            raise ValueError("cell_size and lsm_pitch must be positive.")
        if not sigma_dist > 0.0:
            raise ValueError("sigma_dist must be positive.")
        self.weight = 1.0 / (sigma_dist * sigma_dist)
        self.cos_gate = math.cos(math.radians(self.cfg.normal_gate_deg))
        self.cells: Dict[CellIndex, List[int]] = {}
        self.lsms: List[LocalSurfaceModel] = []
        self._pending: List[Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
        self._estimated = False

    @property
    def lsm_count(self) -> int:
        return len(self.lsms)

    def _new_lsm(self, cell: CellIndex, point: np.ndarray, normal: np.ndarray) -> int:
        cs = self.cfg.cell_size
        n = normal / np.linalg.norm(normal)
        center = (np.asarray(cell, dtype=np.float64) + 0.5) * cs
        base_point = center - np.dot(center - point, n) * n
        u, v = frame_axes(n)
        corners = np.array(
            [[(cell[0] + a) * cs, (cell[1] + b) * cs, (cell[2] + c) * cs] for a in (0, 1) for b in (0, 1) for c in (0, 1)]
        ) - base_point
        pu = corners @ u
        pv = corners @ v
        pitch = self.cfg.lsm_pitch
        nu = max(1, int(math.ceil((pu.max() - pu.min()) / pitch)))
        nv = max(1, int(math.ceil((pv.max() - pv.min()) / pitch)))
        self.lsms.append(
            LocalSurfaceModel(
                cell=cell,
                base_normal=n,
                base_point=base_point,
                u_axis=u,
                v_axis=v,
                pitch=pitch,
                u_min=float(pu.min()),
                v_min=float(pv.min()),
                shape=(nu, nv),
                normal_sum=[0.0, 0.0, 0.0],
            )
        )
        lsm_id = len(self.lsms) - 1
        self.cells.setdefault(cell, []).append(lsm_id)
        return lsm_id

    def _assign(self, cell: CellIndex, point: np.ndarray, normal: np.ndarray) -> int:
        nx, ny, nz = float(normal[0]), float(normal[1]), float(normal[2])
        best = -1
        best_cos = self.cos_gate
        for lsm_id in self.cells.get(cell, ()):
            sx, sy, sz = self.lsms[lsm_id].normal_sum
            norm = math.sqrt(sx * sx + sy * sy + sz * sz)
            cos = (nx * sx + ny * sy + nz * sz) / norm
            if cos > best_cos:
                best, best_cos = lsm_id, cos
        if best < 0:
            best = self._new_lsm(cell, point, normal)
        lsm = self.lsms[best]
        acc = lsm.normal_sum
        acc[0] += nx
        acc[1] += ny
        acc[2] += nz
        lsm.members += 1
        return best

    def insert_points(self, xyz: np.ndarray, normals: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Insert points in the given order. Returns (cells (N, 3), lsm ids, pixel indices (N, 2))."""
        if self._estimated:
            raise RuntimeError("Latent map already estimated; build a new map for new points.")
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(normals, axis=1)
        if np.any(~np.isfinite(norms) | (norms < 0.5)):
            raise ValueError("Every inserted point needs a defined unit normal.")
        cells = cells_of(xyz, self.cfg.cell_size)
        ids = np.empty(xyz.shape[0], dtype=np.int64)
        cell_list = cells.tolist()
        for i in range(xyz.shape[0]):
            ids[i] = self._assign(tuple(cell_list[i]), xyz[i], normals[i] / norms[i])

        geo = self._geometry()
        rel = xyz - geo["bp"][ids]
        heights = np.einsum("ij,ij->i", rel, geo["bn"][ids])
        iu = np.floor((np.einsum("ij,ij->i", rel, geo["ua"][ids]) - geo["umin"][ids]) / geo["pitch"][ids]).astype(np.int64)
        iv = np.floor((np.einsum("ij,ij->i", rel, geo["va"][ids]) - geo["vmin"][ids]) / geo["pitch"][ids]).astype(np.int64)
        iu = np.clip(iu, 0, geo["nu"][ids] - 1)
        iv = np.clip(iv, 0, geo["nv"][ids] - 1)
        self._pending.append((ids, iu, iv, heights))
        return cells, ids, np.stack([iu, iv], axis=1)

    def insert_point(self, xyz: np.ndarray, normal: Optional[np.ndarray]) -> Tuple[CellIndex, int, Tuple[int, int]]:
        if normal is None:
            raise ValueError("Point has no normal; only segmented points enter the map.")
        cells, ids, pix = self.insert_points(np.asarray(xyz).reshape(1, 3), np.asarray(normal).reshape(1, 3))
        return tuple(int(c) for c in cells[0]), int(ids[0]), (int(pix[0, 0]), int(pix[0, 1]))

    def _geometry(self) -> Dict[str, np.ndarray]:
        lsms = self.lsms
        if not lsms:
            empty3 = np.zeros((0, 3))
            empty = np.zeros(0)
            return {"bn": empty3, "bp": empty3, "ua": empty3, "va": empty3, "mn": empty3, "umin": empty,
                    "vmin": empty, "pitch": empty, "nu": empty.astype(np.int64), "nv": empty.astype(np.int64),
                    "cell": np.zeros((0, 3), dtype=np.int64)}
        return {
            "bn": np.array([m.base_normal for m in lsms]),
            "bp": np.array([m.base_point for m in lsms]),
            "ua": np.array([m.u_axis for m in lsms]),
            "va": np.array([m.v_axis for m in lsms]),
            "mn": np.array([m.mean_normal for m in lsms]),
            "umin": np.array([m.u_min for m in lsms]),
            "vmin": np.array([m.v_min for m in lsms]),
            "pitch": np.array([m.pitch for m in lsms]),
            "nu": np.array([m.shape[0] for m in lsms], dtype=np.int64),
            "nv": np.array([m.shape[1] for m in lsms], dtype=np.int64),
            "cell": np.array([m.cell for m in lsms], dtype=np.int64),
        }

    def estimate(self) -> None:
        """Finalize per-pixel mean, variance and normals from everything inserted so far."""
        if self._pending:
            ids = np.concatenate([p[0] for p in self._pending])
            iu = np.concatenate([p[1] for p in self._pending])
            iv = np.concatenate([p[2] for p in self._pending])
            heights = np.concatenate([p[3] for p in self._pending])
        else:
            ids = iu = iv = np.zeros(0, dtype=np.int64)
            heights = np.zeros(0)
        codes = (ids << _LSM_SHIFT) | (iu << _PIX_SHIFT) | iv
        self.pix_codes, inverse = np.unique(codes, return_inverse=True)
        inverse = inverse.reshape(-1)
        size = self.pix_codes.size
        w = np.full(heights.size, self.weight)
        self.sum_w = np.bincount(inverse, weights=w, minlength=size)
        self.sum_wh = np.bincount(inverse, weights=w * heights, minlength=size)
        self.sum_wh2 = np.bincount(inverse, weights=w * heights * heights, minlength=size)
        self.sum_w2 = np.bincount(inverse, weights=w * w, minlength=size)
        self.count = np.bincount(inverse, minlength=size).astype(np.int64)
        self.mean, self.variance = pixel_statistics(self.sum_w, self.sum_wh, self.sum_wh2, self.sum_w2, self.count)
        self.pix_lsm = self.pix_codes >> _LSM_SHIFT
        self.pix_u = (self.pix_codes >> _PIX_SHIFT) & ((1 << 20) - 1)
        self.pix_v = self.pix_codes & ((1 << 20) - 1)
        self.geo = self._geometry()
        self.pix_normals = self._pixel_normals()

        lsm_codes = _cell_codes(self.geo["cell"])
        self._lsm_order = np.lexsort((np.arange(lsm_codes.size), lsm_codes))
        self._lsm_codes_sorted = lsm_codes[self._lsm_order]
        self._estimated = True

    def _lookup(self, codes: np.ndarray) -> np.ndarray:
        if self.pix_codes.size == 0:
            return np.full(codes.shape, -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(self.pix_codes, codes), self.pix_codes.size - 1)
        return np.where(self.pix_codes[pos] == codes, pos, -1)

    def _pixel_normals(self) -> np.ndarray:
        size = self.pix_codes.size
        bn = self.geo["bn"][self.pix_lsm] if size else np.zeros((0, 3))
        out = bn.copy()
        if size == 0:
            return out
        nu = self.geo["nu"][self.pix_lsm]
        nv = self.geo["nv"][self.pix_lsm]
        defined = self.count >= 1
        mat = np.zeros((size, 3, 3))
        rhs = np.zeros((size, 3))
        neighbours = np.zeros(size, dtype=np.int64)
        for du in (-1, 0, 1):
            for dv in (-1, 0, 1):
                qu = self.pix_u + du
                qv = self.pix_v + dv
                inside = (qu >= 0) & (qv >= 0) & (qu < nu) & (qv < nv)
                code = (self.pix_lsm << _LSM_SHIFT) | (np.maximum(qu, 0) << _PIX_SHIFT) | np.maximum(qv, 0)
                idx = self._lookup(code)
                use = inside & (idx >= 0) & defined
                use &= defined[np.maximum(idx, 0)]
                h = np.where(use, self.mean[np.maximum(idx, 0)], 0.0)
                basis = np.array([1.0, du, dv])
                mat += use[:, None, None] * np.outer(basis, basis)[None, :, :]
                rhs += use[:, None] * h[:, None] * basis[None, :]
                if du or dv:
                    neighbours += use
        det = np.linalg.det(mat)
        ok = defined & (neighbours >= 3) & (np.abs(det) > 1e-9)
        if not np.any(ok):
            return out
        coef = np.linalg.solve(mat[ok], rhs[ok][..., None])[..., 0]
        pitch = self.geo["pitch"][self.pix_lsm[ok]]
        gu = coef[:, 1] / pitch
        gv = coef[:, 2] / pitch
        lsm = self.pix_lsm[ok]
        n = self.geo["bn"][lsm] - gu[:, None] * self.geo["ua"][lsm] - gv[:, None] * self.geo["va"][lsm]
        out[ok] = n / np.linalg.norm(n, axis=1)[:, None]
        return out

    def pixel(self, lsm: int, iu: int, iv: int) -> Optional[HeightPixel]:
        self._require_estimated()
        code = np.array([(int(lsm) << 40) | (int(iu) << 20) | int(iv)], dtype=np.int64)
        idx = int(self._lookup(code)[0])
        if idx < 0:
            return None
        return HeightPixel(
            float(self.sum_w[idx]), float(self.sum_wh[idx]), float(self.sum_wh2[idx]),
            float(self.mean[idx]), float(self.variance[idx]), int(self.count[idx]),
        )

    def pixel_normal(self, lsm: int, iu: int, iv: int) -> np.ndarray:
        self._require_estimated()
        code = np.array([(int(lsm) << 40) | (int(iu) << 20) | int(iv)], dtype=np.int64)
        idx = int(self._lookup(code)[0])
        if idx < 0:
            return self.lsms[lsm].base_normal.copy()
        return self.pix_normals[idx].copy()

    def raster(self, lsm: int, field: str = "mean") -> np.ndarray:
        """Dense (nu, nv) view of one LSM; untouched pixels are NaN (0 for count)."""
        self._require_estimated()
        nu, nv = self.lsms[lsm].shape
        sel = self.pix_lsm == lsm
        values = {"mean": self.mean, "variance": self.variance, "count": self.count}[field]
        out = np.zeros((nu, nv), dtype=np.int64) if field == "count" else np.full((nu, nv), np.nan)
        out[self.pix_u[sel], self.pix_v[sel]] = values[sel]
        return out

    def _require_estimated(self) -> None:
        if not self._estimated:
            raise RuntimeError("Latent map not estimated yet.")

    def defined_pixel_count(self) -> int:
        self._require_estimated()
        return int(np.count_nonzero(self.count >= 1))

    def correspond_batch(self, xyz: np.ndarray, normals: np.ndarray, threshold: float) -> CorrespondenceBatch:
        self._require_estimated()
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        n_pts = xyz.shape[0]
        status = np.full(n_pts, REJECT_NORMAL_GATE, dtype=np.int8)
        distance = np.full(n_pts, np.nan)
        w_out = np.zeros((n_pts, 3))
        s_out = np.zeros((n_pts, 3))
        lsm_out = np.full(n_pts, -1, dtype=np.int64)
        if n_pts == 0 or not self.lsms:
            return CorrespondenceBatch(status, distance, w_out, s_out, lsm_out)

        cells = cells_of(xyz, self.cfg.cell_size)
        pts_parts: List[np.ndarray] = []
        lsm_parts: List[np.ndarray] = []
        for off in _FACE_OFFSETS:
            q = _cell_codes(cells + np.asarray(off, dtype=np.int64))
            lo = np.searchsorted(self._lsm_codes_sorted, q, side="left")
            hi = np.searchsorted(self._lsm_codes_sorted, q, side="right")
            cnt = hi - lo
            total = int(cnt.sum())
            if total == 0:
                continue
            starts = np.repeat(lo, cnt)
            within = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            pts_parts.append(np.repeat(np.arange(n_pts), cnt))
            lsm_parts.append(self._lsm_order[starts + within])
        if not pts_parts:
            return CorrespondenceBatch(status, distance, w_out, s_out, lsm_out)
        pt = np.concatenate(pts_parts)
        lsm = np.concatenate(lsm_parts)

        geo = self.geo
        gate = np.einsum("ij,ij->i", normals[pt], geo["mn"][lsm]) > self.cos_gate
        rel = xyz[pt] - geo["bp"][lsm]
        h = np.einsum("ij,ij->i", rel, geo["bn"][lsm])
        iu = np.floor((np.einsum("ij,ij->i", rel, geo["ua"][lsm]) - geo["umin"][lsm]) / geo["pitch"][lsm]).astype(np.int64)
        iv = np.floor((np.einsum("ij,ij->i", rel, geo["va"][lsm]) - geo["vmin"][lsm]) / geo["pitch"][lsm]).astype(np.int64)
        inside = (iu >= 0) & (iv >= 0) & (iu < geo["nu"][lsm]) & (iv < geo["nv"][lsm])
        code = (lsm << _LSM_SHIFT) | (np.maximum(iu, 0) << _PIX_SHIFT) | np.maximum(iv, 0)
        idx = np.where(gate & inside, self._lookup(code), -1)
        confident = (idx >= 0) & (self.count[np.maximum(idx, 0)] >= 2)

        gated_pts = np.unique(pt[gate])
        status[gated_pts] = REJECT_LOW_CONFIDENCE
        if not np.any(confident):
            return CorrespondenceBatch(status, distance, w_out, s_out, lsm_out)

        pt_c = pt[confident]
        lsm_c = lsm[confident]
        idx_c = idx[confident]
        bn = geo["bn"][lsm_c]
        s = xyz[pt_c] + (self.mean[idx_c] - h[confident])[:, None] * bn
        w = self.pix_normals[idx_c]
        d = np.einsum("ij,ij->i", w, s - xyz[pt_c])
        order = np.lexsort((np.arange(pt_c.size), np.abs(d), pt_c))
        first_pts, first = np.unique(pt_c[order], return_index=True)
        pick = order[first]

        distance[first_pts] = d[pick]
        w_out[first_pts] = w[pick]
        s_out[first_pts] = s[pick]
        lsm_out[first_pts] = lsm_c[pick]
        status[first_pts] = np.where(np.abs(d[pick]) <= threshold, ACCEPTED, REJECT_THRESHOLD)
        return CorrespondenceBatch(status, distance, w_out, s_out, lsm_out)

    def correspond(self, p: np.ndarray, n: np.ndarray, threshold: float) -> Optional[Correspondence]:
        batch = self.correspond_batch(np.asarray(p).reshape(1, 3), np.asarray(n).reshape(1, 3), threshold)
        if batch.status[0] != ACCEPTED:
            return None
        lsm_id = int(batch.lsm[0])
        lsm = self.lsms[lsm_id]
        rel = np.asarray(p, dtype=np.float64).reshape(3) - lsm.base_point
        iu = int(np.floor((np.dot(rel, lsm.u_axis) - lsm.u_min) / lsm.pitch))
        iv = int(np.floor((np.dot(rel, lsm.v_axis) - lsm.v_min) / lsm.pitch))
        return Correspondence(
            target=PlaneTarget(batch.w[0], batch.s[0]),
            distance=float(batch.distance[0]),
            cell=lsm.cell,
            lsm=lsm_id,
            pixel=(iu, iv),
        )

    def dump_rows(self) -> List[Dict[str, float]]:
        self._require_estimated()
        rows: List[Dict[str, float]] = []
        geo = self.geo
        for k in np.flatnonzero(self.count >= 1):
            lsm = int(self.pix_lsm[k])
            iu, iv = int(self.pix_u[k]), int(self.pix_v[k])
            uc = geo["umin"][lsm] + (iu + 0.5) * geo["pitch"][lsm]
            vc = geo["vmin"][lsm] + (iv + 0.5) * geo["pitch"][lsm]
            pos = geo["bp"][lsm] + uc * geo["ua"][lsm] + vc * geo["va"][lsm] + self.mean[k] * geo["bn"][lsm]
            var = self.variance[k]
            ix, iy, iz = self.lsms[lsm].cell
            rows.append(
                {
                    "ix": ix, "iy": iy, "iz": iz, "lsm": lsm, "u": iu, "v": iv,
                    "x": float(pos[0]), "y": float(pos[1]), "z": float(pos[2]),
                    "mean": float(self.mean[k]),
                    "std": float(np.sqrt(var)) if np.isfinite(var) else float("nan"),
                    "count": int(self.count[k]),
                }
            )
        return rows


DUMP_FIELDS = ["ix", "iy", "iz", "lsm", "u", "v", "x", "y", "z", "mean", "std", "count"]


def write_map_dump(latent: LatentMap | Iterable[LatentMap], path: str | Path) -> int:
    maps = [latent] if isinstance(latent, LatentMap) else list(latent)
    rows = [row for m in maps for row in m.dump_rows()]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=DUMP_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return len(rows)


def read_map_dump(path: str | Path) -> Dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {key: np.array([float(r[key]) for r in rows], dtype=np.float64) for key in DUMP_FIELDS}


def build_map(
    xyz: np.ndarray, normals: np.ndarray, cfg: Optional[LatentMapConfig] = None, sigma_dist: float = 0.005
) -> LatentMap:
    latent = LatentMap(cfg, sigma_dist)
    latent.insert_points(xyz, normals)
    latent.estimate()
    return latent
