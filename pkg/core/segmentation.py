from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .strip import NO_SEGMENT, ScanStrip

Pixel = Tuple[int, int]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
# keeps (rows, window-columns, window, 3) work arrays around a few million entries
_CHUNK_CELLS = 1 << 21


@dataclass
class RansacParams:
    iterations: int = 64
    inlier_dist: float = 0.01
    min_inliers: int = 6


@dataclass
class SegmentationConfig:
    window: int = 2
    ransac: RansacParams = field(default_factory=RansacParams)
    c0_scale: float = 0.05
    c1_scale: float = 0.3
    k: float = 0.5
    min_region_px: int = 50


@dataclass
class NormalField:
    xyz: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray
    defined: np.ndarray

    def normal_at(self, row: int, col: int) -> Optional[np.ndarray]:
        if not self.defined[row, col]:
            return None
        return self.normals[row, col].copy()


@dataclass
class SegmentLabels:
    labels: np.ndarray
    sizes: np.ndarray

    @property
    def count(self) -> int:
        return int(self.sizes.size)

    def label_at(self, row: int, col: int) -> Optional[int]:
        lab = int(self.labels[row, col])
        return None if lab == NO_SEGMENT else lab


class DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n
        self.size = [1] * n

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        if self.rank[a] < self.rank[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        if self.rank[a] == self.rank[b]:
            self.rank[a] += 1
        return a


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def pixel_seeds(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    key = (rows.astype(np.uint64) << np.uint64(21)) | cols.astype(np.uint64)
    return _splitmix64(_splitmix64(key))


def _uniform_keys(seeds: np.ndarray, iteration: int, slots: int) -> np.ndarray:
    counter = np.arange(slots, dtype=np.uint64) + np.uint64(iteration * slots + 1)
    bits = _splitmix64(seeds[..., None] ^ (counter * _GOLDEN))
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / float(1 << 53))


def estimate_normals(strip: ScanStrip, window: int = 2, ransac: Optional[RansacParams] = None) -> NormalField:
    """
    Per-pixel RANSAC plane over the (2*window+1)^2 raster neighbourhood. A hypothesis only
    counts when the centre pixel is one of its inliers, so normals do not bleed across creases.
    """
    if window < 1:
        raise ValueError("RANSAC window half-width must be >= 1.")
    params = ransac or RansacParams()
    if params.iterations < 1:
        raise ValueError("RANSAC needs at least one iteration.")

    rows, cols = strip.rows, strip.cols
    normals = np.zeros((rows, cols, 3), dtype=np.float64)
    offsets = np.zeros((rows, cols), dtype=np.float64)
    defined = np.zeros((rows, cols), dtype=bool)

    offs = [(dr, dc) for dr in range(-window, window + 1) for dc in range(-window, window + 1)]
    xyz_p = np.pad(strip.xyz, ((window, window), (window, window), (0, 0)))
    valid_p = np.pad(strip.valid, ((window, window), (window, window)), constant_values=False)
    chunk = max(1, _CHUNK_CELLS // max(rows * len(offs), 1))

    for c0 in range(0, cols, chunk):
        c1 = min(cols, c0 + chunk)
        n, off, ok = _ransac_chunk(strip, xyz_p, valid_p, offs, window, c0, c1, params)
        normals[:, c0:c1] = n
        offsets[:, c0:c1] = off
        defined[:, c0:c1] = ok

    return NormalField(xyz=strip.xyz, normals=normals, offsets=offsets, defined=defined)


def _ransac_chunk(
    strip: ScanStrip,
    xyz_p: np.ndarray,
    valid_p: np.ndarray,
    offs: List[Pixel],
    window: int,
    c0: int,
    c1: int,
    params: RansacParams,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = strip.rows
    width = c1 - c0
    slots = len(offs)
    nb_xyz = np.stack(
        [xyz_p[window + dr : window + dr + rows, window + c0 + dc : window + c0 + dc + width] for dr, dc in offs],
        axis=2,
    )
    nb_valid = np.stack(
        [valid_p[window + dr : window + dr + rows, window + c0 + dc : window + c0 + dc + width] for dr, dc in offs],
        axis=2,
    )
    center = strip.xyz[:, c0:c1]
    center_valid = strip.valid[:, c0:c1]
    nb_valid &= center_valid[..., None]
    rel = nb_xyz - center[:, :, None, :]
    n_valid = nb_valid.sum(axis=-1)

    rr, cc = np.meshgrid(np.arange(rows), np.arange(c0, c1), indexing="ij")
    seeds = pixel_seeds(rr, cc)

    best_count = np.full((rows, width), -1, dtype=np.int64)
    best_inliers = np.zeros((rows, width, slots), dtype=bool)
    tol = float(params.inlier_dist)
    for it in range(int(params.iterations)):
        keys = np.where(nb_valid, _uniform_keys(seeds, it, slots), 2.0)
        pick = np.argpartition(keys, 2, axis=-1)[..., :3]
        p = np.take_along_axis(rel, pick[..., None], axis=2)
        nvec = np.cross(p[..., 1, :] - p[..., 0, :], p[..., 2, :] - p[..., 0, :])
        norm = np.linalg.norm(nvec, axis=-1)
        usable = (norm > 1e-12) & (n_valid >= 3)
        unit = nvec / np.where(usable, norm, 1.0)[..., None]
        dist = np.abs(np.einsum("hckj,hcj->hck", rel - p[..., :1, :], unit))
        inl = (dist <= tol) & nb_valid
        center_in = np.abs(np.einsum("hcj,hcj->hc", p[..., 0, :], unit)) <= tol
        count = np.where(usable & center_in, inl.sum(axis=-1), -1)
        better = count > best_count
        best_count = np.where(better, count, best_count)
        best_inliers[better] = inl[better]

    ok = best_count >= int(params.min_inliers)
    members = best_inliers & ok[..., None]
    cnt = np.maximum(members.sum(axis=-1), 1)[..., None]
    centroid = (rel * members[..., None]).sum(axis=2) / cnt
    dev = (rel - centroid[:, :, None, :]) * members[..., None]
    cov = np.einsum("hcki,hckj->hcij", dev, dev)
    _, vecs = np.linalg.eigh(cov)
    normal = vecs[..., :, 0]

    to_head = strip.t0[:, c0:c1] - center
    flip = np.einsum("hcj,hcj->hc", normal, to_head) < 0.0
    normal = np.where(flip[..., None], -normal, normal)
    normal = np.where(ok[..., None], normal, 0.0)
    offset = np.where(ok, np.einsum("hcj,hcj->hc", normal, center + centroid), 0.0)
    return normal, offset, ok


def edge_weight(a: Pixel, b: Pixel, normals: NormalField, params: SegmentationConfig) -> Optional[float]:
    """C0/C1 homogeneity between 4-neighbours, measured against the plane of pixel a."""
    if abs(a[0] - b[0]) + abs(a[1] - b[1]) != 1:
        raise ValueError(f"Pixels {a} and {b} are not 4-neighbours.")
    if not (normals.defined[a] and normals.defined[b]):
        return None
    n_a = normals.normals[a]
    n_b = normals.normals[b]
    gap = abs(float(np.dot(n_a, normals.xyz[b] - normals.xyz[a])))
    bend = max(0.0, 1.0 - float(np.dot(n_a, n_b)))
    return gap / params.c0_scale + bend / params.c1_scale


def raster_edges(normals: NormalField, params: SegmentationConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    4-neighbour edges between pixels with defined normals, in edge index order (row-major
    source pixel, right edge before down edge), with weights averaged over both directions.
    """
    rows, cols = normals.defined.shape
    ids = np.arange(rows * cols, dtype=np.int64).reshape(rows, cols)
    src = np.stack([ids, ids], axis=-1)
    dst = np.stack([np.roll(ids, -1, axis=1), np.roll(ids, -1, axis=0)], axis=-1)
    exists = np.zeros((rows, cols, 2), dtype=bool)
    exists[:, :-1, 0] = normals.defined[:, :-1] & normals.defined[:, 1:]
    exists[:-1, :, 1] = normals.defined[:-1, :] & normals.defined[1:, :]

    src = src[exists]
    dst = dst[exists]
    n_flat = normals.normals.reshape(-1, 3)
    p_flat = normals.xyz.reshape(-1, 3)
    delta = p_flat[dst] - p_flat[src]
    gap = 0.5 * (np.abs(np.einsum("ij,ij->i", n_flat[src], delta)) + np.abs(np.einsum("ij,ij->i", n_flat[dst], delta)))
    bend = np.maximum(0.0, 1.0 - np.einsum("ij,ij->i", n_flat[src], n_flat[dst]))
    weights = gap / params.c0_scale + bend / params.c1_scale
    return np.stack([src, dst], axis=1), weights


def felzenszwalb(num_nodes: int, edges: np.ndarray, weights: np.ndarray, k: float) -> np.ndarray:
    """Graph segmentation with threshold k/|C|; returns the component root of every node."""
    if not k > 0.0:
        raise ValueError("Segmentation threshold k must be positive.")
    order = np.argsort(weights, kind="stable")
    ds = DisjointSet(num_nodes)
    thresh = [float(k)] * num_nodes
    src = edges[order, 0].tolist()
    dst = edges[order, 1].tolist()
    wts = weights[order].tolist()
    for a, b, w in zip(src, dst, wts):
        ra = ds.find(a)
        rb = ds.find(b)
        if ra == rb:
            continue
        if w <= thresh[ra] and w <= thresh[rb]:
            root = ds.union(ra, rb)
            thresh[root] = w + k / ds.size[root]
    return np.array([ds.find(i) for i in range(num_nodes)], dtype=np.int64)


def segment(
    strip: ScanStrip,
    normals: NormalField,
    k: float = 0.5,
    min_region_px: int = 50,
    params: Optional[SegmentationConfig] = None,
) -> SegmentLabels:
    cfg = params or SegmentationConfig()
    rows, cols = strip.rows, strip.cols
    edges, weights = raster_edges(normals, cfg)
    roots = felzenszwalb(rows * cols, edges, weights, k)

    defined = normals.defined.reshape(-1) & strip.valid.reshape(-1)
    roots = np.where(defined, roots, -1)
    uniq, first, counts = np.unique(roots, return_index=True, return_counts=True)
    keep = (uniq >= 0) & (counts >= int(min_region_px))
    # dense ids in order of first appearance (row-major)
    kept_roots = uniq[keep][np.argsort(first[keep], kind="stable")]
    lookup = {int(r): i for i, r in enumerate(kept_roots.tolist())}
    labels = np.full(rows * cols, NO_SEGMENT, dtype=np.int32)
    if lookup:
        mapped = np.array([lookup.get(int(r), NO_SEGMENT) for r in uniq.tolist()], dtype=np.int32)
        labels = mapped[np.searchsorted(uniq, roots)]
        labels = np.where(defined, labels, NO_SEGMENT).astype(np.int32)
    sizes = np.bincount(labels[labels >= 0], minlength=len(lookup)).astype(np.int64)
    return SegmentLabels(labels=labels.reshape(rows, cols), sizes=sizes)


def segment_strip(strip: ScanStrip, cfg: Optional[SegmentationConfig] = None) -> Tuple[NormalField, SegmentLabels]:
    cfg = cfg or SegmentationConfig()
    normals = estimate_normals(strip, cfg.window, cfg.ransac)
    labels = segment(strip, normals, cfg.k, cfg.min_region_px, cfg)
    return normals, labels
