from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from .strip import ScanStrip, write_strip

TRUTH_FIELDS = ["arc", "tx", "ty", "tz", "omega", "phi", "kappa"]
MAX_RANGE_M = 60.0
_CHUNK_RAYS = 1 << 18


@dataclass
class PlanarPrimitive:
    """Rectangle origin + a*edge_u + b*edge_v for a, b in [0, 1]."""

    name: str
    origin: Tuple[float, float, float]
    edge_u: Tuple[float, float, float]
    edge_v: Tuple[float, float, float]

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(np.asarray(self.edge_u, dtype=np.float64), np.asarray(self.edge_v, dtype=np.float64))
        return n / np.linalg.norm(n)

    def signed_distance(self, xyz: np.ndarray) -> np.ndarray:
        return (np.asarray(xyz, dtype=np.float64) - np.asarray(self.origin)) @ self.normal


@dataclass
class SceneSpec:
    primitives: List[PlanarPrimitive]

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        corners = []
        for p in self.primitives:
            o, u, v = (np.asarray(x, dtype=np.float64) for x in (p.origin, p.edge_u, p.edge_v))
            corners += [o, o + u, o + v, o + u + v]
        c = np.array(corners)
        return c.min(axis=0), c.max(axis=0)

    def to_json(self) -> Dict[str, object]:
        return {"primitives": [asdict(p) for p in self.primitives]}


@dataclass
class TrajectoryPath:
    trajectory_id: int
    waypoints: np.ndarray

    def __post_init__(self) -> None:
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 3)
        if self.waypoints.shape[0] < 2:
            raise ValueError("A trajectory path needs at least two waypoints.")
        seg = np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)
        self._cum = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def pose(self, arcs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Position and unit heading at each arc-length."""
        s = np.clip(np.asarray(arcs, dtype=np.float64), 0.0, self.length)
        k = np.clip(np.searchsorted(self._cum, s, side="right") - 1, 0, len(self._cum) - 2)
        seg = self.waypoints[k + 1] - self.waypoints[k]
        seg_len = self._cum[k + 1] - self._cum[k]
        t = (s - self._cum[k]) / seg_len
        pos = self.waypoints[k] + t[:, None] * seg
        heading = seg / seg_len[:, None]
        return pos, heading


@dataclass
class ScannerSpec:
    rows: int = 1000
    profile_spacing: float = 0.15
    yaw_deg: Tuple[float, ...] = (45.0, -45.0)


@dataclass
class ErrorSpec:
    knot_spacing: float = 10.0
    max_translation: float = 0.2
    max_rotation_deg: float = 0.2
    noise_sigma: float = 0.003
    seed: int = 7
    constant: Optional[Tuple[float, ...]] = None  # fixed (t, theta) pose error instead of splines

    def error_field(self, trajectory_id: int, length: float):
        """Callable arcs -> (N, 6) pose error (translation, omega/phi/kappa) of one trajectory."""
        if self.constant is not None:
            const = np.asarray(self.constant, dtype=np.float64).reshape(6)
            return lambda arcs: np.repeat(const[None, :], np.asarray(arcs).size, axis=0)
        if self.max_translation == 0.0 and self.max_rotation_deg == 0.0:
            return lambda arcs: np.zeros((np.asarray(arcs).size, 6))
        rng = np.random.default_rng([int(self.seed), int(trajectory_id)])
        knots = np.arange(0.0, length + self.knot_spacing, self.knot_spacing)
        if knots.size < 2:
            knots = np.array([0.0, max(length, self.knot_spacing)])
        bound = np.array([self.max_translation] * 3 + [np.radians(self.max_rotation_deg)] * 3)
        values = rng.uniform(-1.0, 1.0, size=(knots.size, 6)) * bound
        spline = CubicSpline(knots, values, axis=0, bc_type="natural")
        fine = spline(np.linspace(0.0, knots[-1], 20 * knots.size))
        peak = np.max(np.abs(fine), axis=0)
        shrink = np.where(peak > bound, bound / np.maximum(peak, 1e-300), 1.0)
        return lambda arcs: spline(np.asarray(arcs, dtype=np.float64)) * shrink


@dataclass
class SynthConfig:
    scene: str = "standard"  # standard | canyon
    length: float = 60.0
    rows: int = 1000
    profile_spacing: float = 0.15
    noise_sigma: float = 0.003
    max_translation: float = 0.2
    max_rotation_deg: float = 0.2
    knot_spacing: float = 10.0
    seed: int = 7


@dataclass
class GeneratedData:
    strips: List[ScanStrip]
    truth: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    paths: Dict[int, np.ndarray] = field(default_factory=dict)


def _rect(name: str, origin, edge_u, edge_v) -> PlanarPrimitive:
    return PlanarPrimitive(name, tuple(float(v) for v in origin), tuple(float(v) for v in edge_u), tuple(float(v) for v in edge_v))


def street_canyon(length: float = 60.0) -> SceneSpec:
    """Road slab and two facades; no steps anywhere."""
    x0, x1 = -10.0, length + 10.0
    span = x1 - x0
    return SceneSpec(
        [
            _rect("road", (x0, -8.5, 0.5), (span, 0, 0), (0, 17.0, 0)),
            _rect("facade_south", (x0, -8.5, 0.5), (0, 0, 10.0), (span, 0, 0)),
            _rect("facade_north", (x0, 8.5, 0.5), (span, 0, 0), (0, 0, 10.0)),
        ]
    )


BUILDING_LENGTH_M = 8.0
ALLEY_WIDTH_M = 3.0
ALLEY_DEPTH_M = 3.0
FACADE_HEIGHT_M = 10.0


def _frontage(side: int, x0: float, x1: float, base_z: float, phase: float) -> List[PlanarPrimitive]:
    """
    Buildings along y = side * 8.5 separated by recessed alleys. The alley side walls face
    along the street and tie down the along-track pose components.
    """
    name = "south" if side < 0 else "north"
    y_front = side * 8.5
    y_back = side * (8.5 + ALLEY_DEPTH_M)
    h = FACADE_HEIGHT_M
    depth = ALLEY_DEPTH_M
    prims: List[PlanarPrimitive] = []
    start = x0
    gap_at = x0 + phase
    while start < x1:
        end = min(gap_at, x1)
        if end > start:
            span = end - start
            if side < 0:
                prims.append(_rect(f"facade_{name}", (start, y_front, base_z), (0, 0, h), (span, 0, 0)))
            else:
                prims.append(_rect(f"facade_{name}", (start, y_front, base_z), (span, 0, 0), (0, 0, h)))
        a, b = end, end + ALLEY_WIDTH_M
        if b > x1:
            break
        y_lo = min(y_front, y_back)
        prims += [
            _rect(f"alley_{name}_wall", (a, y_lo, base_z), (0, depth, 0), (0, 0, h)),
            _rect(f"alley_{name}_wall", (b, y_lo, base_z), (0, 0, h), (0, depth, 0)),
            _rect(f"alley_{name}_floor", (a, y_lo, base_z), (ALLEY_WIDTH_M, 0, 0), (0, depth, 0)),
        ]
        if side < 0:
            prims.append(_rect(f"alley_{name}_back", (a, y_back, base_z), (0, 0, h), (ALLEY_WIDTH_M, 0, 0)))
        else:
            prims.append(_rect(f"alley_{name}_back", (a, y_back, base_z), (ALLEY_WIDTH_M, 0, 0), (0, 0, h)))
        start = b
        gap_at = b + BUILDING_LENGTH_M
    return prims


def street_block(length: float = 60.0) -> SceneSpec:
    """Road with curbs and sidewalks between two rows of buildings broken by alleys."""
    x0, x1 = -10.0, length + 10.0
    span = x1 - x0
    curb = 0.15
    period = BUILDING_LENGTH_M + ALLEY_WIDTH_M
    prims = [
        _rect("road", (x0, -5.5, 0.5), (span, 0, 0), (0, 11.0, 0)),
        _rect("curb_south", (x0, -5.5, 0.5), (0, 0, curb), (span, 0, 0)),
        _rect("curb_north", (x0, 5.5, 0.5), (span, 0, 0), (0, 0, curb)),
        _rect("sidewalk_south", (x0, -8.5, 0.5 + curb), (span, 0, 0), (0, 3.0, 0)),
        _rect("sidewalk_north", (x0, 5.5, 0.5 + curb), (span, 0, 0), (0, 3.0, 0)),
    ]
    # north alleys sit half a period later so along-track constraints interleave
    prims += _frontage(-1, x0, x1, 0.5 + curb, BUILDING_LENGTH_M)
    prims += _frontage(1, x0, x1, 0.5 + curb, BUILDING_LENGTH_M + 0.5 * period)
    return SceneSpec(prims)


def street_paths(length: float = 60.0, head_z: float = 2.5, passes: int = 2) -> List[TrajectoryPath]:
    """Two directions times `passes` drives along the street."""
    paths = []
    lanes = [(-2.0, 1.0), (2.0, -1.0), (-1.5, 1.0), (1.5, -1.0)][: 2 * passes]
    for tid, (y, direction) in enumerate(lanes):
        start, end = (0.0, length) if direction > 0 else (length, 0.0)
        paths.append(TrajectoryPath(tid, [[start, y, head_z], [end, y, head_z]]))
    return paths


def standard_scene(seed: int = 7) -> Tuple[SceneSpec, List[TrajectoryPath], ErrorSpec]:
    """Street block, four drives, default scanner: about 2M points over 8 strips."""
    return street_block(60.0), street_paths(60.0), ErrorSpec(seed=seed)


def scene_from_config(cfg: SynthConfig) -> Tuple[SceneSpec, List[TrajectoryPath], ScannerSpec, ErrorSpec]:
    scene = street_block(cfg.length) if cfg.scene == "standard" else street_canyon(cfg.length)
    err = ErrorSpec(cfg.knot_spacing, cfg.max_translation, cfg.max_rotation_deg, cfg.noise_sigma, cfg.seed)
    return scene, street_paths(cfg.length), ScannerSpec(cfg.rows, cfg.profile_spacing), err


def cast_rays(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Range to the nearest primitive along each ray; inf on a miss."""
    best = np.full(origins.shape[0], np.inf)
    for prim in scene.primitives:
        o = np.asarray(prim.origin, dtype=np.float64)
        eu = np.asarray(prim.edge_u, dtype=np.float64)
        ev = np.asarray(prim.edge_v, dtype=np.float64)
        n = prim.normal
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = ((o - origins) @ n) / denom
        hit = origins + lam[:, None] * dirs - o
        a = hit @ eu / (eu @ eu)
        b = hit @ ev / (ev @ ev)
        ok = (np.abs(denom) > 1e-12) & (lam > 1e-6) & (lam <= MAX_RANGE_M) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
        best = np.where(ok & (lam < best), lam, best)
    return best


def _simulate_strip(
    scene: SceneSpec,
    path: TrajectoryPath,
    scanner: ScannerSpec,
    yaw_deg: float,
    scanner_id: int,
    err_fn,
    noise_sigma: float,
    rng: np.random.Generator,
) -> Tuple[ScanStrip, np.ndarray, np.ndarray]:
    arcs = np.arange(0.0, path.length + 1e-9, scanner.profile_spacing)
    cols = arcs.size
    rows = int(scanner.rows)
    pos, heading = path.pose(arcs)
    up = np.array([0.0, 0.0, 1.0])
    left = np.cross(up, heading)
    yaw = Rotation.from_euler("z", yaw_deg, degrees=True)
    across = yaw.apply(left)
    phi = 2.0 * np.pi * (np.arange(rows) + 0.5) / rows
    # (rows, cols, 3) true ray directions in the tilted scan plane
    dirs = np.cos(phi)[:, None, None] * across[None, :, :] + np.sin(phi)[:, None, None] * up[None, None, :]
    heads = np.broadcast_to(pos[None, :, :], (rows, cols, 3))

    flat_dirs = dirs.reshape(-1, 3)
    flat_heads = heads.reshape(-1, 3)
    ranges = np.empty(flat_dirs.shape[0])
    for start in range(0, flat_dirs.shape[0], _CHUNK_RAYS):
        stop = start + _CHUNK_RAYS
        ranges[start:stop] = cast_rays(scene, flat_heads[start:stop], flat_dirs[start:stop])
    ranges = ranges.reshape(rows, cols)
    valid = np.isfinite(ranges)
    noise = rng.normal(0.0, noise_sigma, size=ranges.shape) if noise_sigma > 0.0 else np.zeros(ranges.shape)
    rho = np.where(valid, ranges + noise, 0.0)

    error = err_fn(arcs)
    rot = Rotation.from_euler("xyz", error[:, 3:])
    rel = rho[:, :, None] * dirs
    measured_rel = np.stack([rot.apply(rel[r]) for r in range(rows)]) if np.any(error[:, 3:]) else rel
    t0 = pos + error[:, :3]
    xyz = np.where(valid[:, :, None], t0[None, :, :] + measured_rel, 0.0)
    t0_grid = np.where(valid[:, :, None], np.broadcast_to(t0[None, :, :], (rows, cols, 3)), 0.0)
    arc_grid = np.where(valid, np.broadcast_to(arcs[None, :], (rows, cols)), 0.0)
    strip = ScanStrip(
        strip_id=2 * path.trajectory_id + scanner_id,
        scanner_id=scanner_id,
        trajectory_id=path.trajectory_id,
        xyz=xyz,
        t0=t0_grid,
        arc=arc_grid,
        valid=valid,
    )
    return strip, arcs, -error


def generate(
    scene: SceneSpec,
    paths: List[TrajectoryPath],
    scanner: ScannerSpec,
    err: ErrorSpec,
) -> GeneratedData:
    """
    Scan the scene from each path with every scanner. Points are placed with the perturbed
    pose; the truth holds the correction (negated pose error) that maps them back.
    """
    lo, hi = scene.bounds()
    out = GeneratedData(strips=[])
    for path in paths:
        if np.any(path.waypoints[:, :2] < lo[:2]) or np.any(path.waypoints[:, :2] > hi[:2]):
            raise ValueError(f"Path of trajectory {path.trajectory_id} leaves the scene bounds.")
        out.paths[path.trajectory_id] = path.waypoints
        err_fn = err.error_field(path.trajectory_id, path.length)
        for scanner_id, yaw in enumerate(scanner.yaw_deg):
            rng = np.random.default_rng([int(err.seed), int(path.trajectory_id), scanner_id])
            strip, arcs, truth = _simulate_strip(scene, path, scanner, yaw, scanner_id, err_fn, err.noise_sigma, rng)
            out.strips.append(strip)
            out.truth[path.trajectory_id] = (arcs, truth)
    return out


def write_truth_csv(arcs: np.ndarray, values: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRUTH_FIELDS)
        for arc, row in zip(arcs.tolist(), values.tolist()):
            writer.writerow([repr(arc)] + [repr(v) for v in row])


def read_truth_csv(path: str | Path) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    arcs = np.array([float(r["arc"]) for r in rows])
    values = np.array([[float(r[k]) for k in TRUTH_FIELDS[1:]] for r in rows]).reshape(-1, 6)
    return arcs, values


def write_generated(data: GeneratedData, scene: SceneSpec, out_dir: str | Path, meta: Optional[dict] = None) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    strip_paths = []
    for strip in data.strips:
        p = out / f"strip_{strip.strip_id:03d}.strip"
        write_strip(strip, p)
        strip_paths.append(p)
    for tid, (arcs, values) in sorted(data.truth.items()):
        write_truth_csv(arcs, values, out / f"truth_traj{tid:03d}.csv")
    payload = scene.to_json()
    payload["paths"] = {str(tid): wp.tolist() for tid, wp in sorted(data.paths.items())}
    if meta:
        payload["generator"] = meta
    (out / "scene.json").write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return strip_paths


def read_truth_dir(directory: str | Path) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    out: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    for p in sorted(Path(directory).glob("truth_traj*.csv")):
        tid = int(p.stem.replace("truth_traj", ""))
        out[tid] = read_truth_csv(p)
    return out


def read_scene_paths(directory: str | Path) -> Dict[int, TrajectoryPath]:
    """Drive paths recorded next to the truth sidecars; empty when scene.json has none."""
    p = Path(directory) / "scene.json"
    if not p.exists():
        return {}
    payload = json.loads(p.read_text(encoding="utf-8"))
    return {int(tid): TrajectoryPath(int(tid), wp) for tid, wp in payload.get("paths", {}).items()}
