from __future__ import annotations

from collections import deque

import numpy as np
import pytest

from core.segmentation import (
    DisjointSet,
    NormalField,
    RansacParams,
    SegmentationConfig,
    edge_weight,
    estimate_normals,
    felzenszwalb,
    raster_edges,
    segment,
    segment_strip,
)
from core.strip import NO_SEGMENT, ScanStrip

PITCH = 0.0625


def _surface_strip(height, rows: int = 20, cols: int = 20, strip_id: int = 1, shift=(0.0, 0.0, 0.0)) -> ScanStrip:
    """Raster sampling z = height(x, y) on a regular grid, scan head 2 m above each point."""
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    x = cc * PITCH
    y = rr * PITCH
    z = height(x, y)
    strip = ScanStrip.empty(strip_id, 0, 0, rows, cols)
    strip.valid[:] = True
    strip.xyz[:] = np.stack([x, y, z], axis=-1) + np.asarray(shift)
    strip.t0[:] = np.stack([x, y, np.full_like(x, 2.0)], axis=-1) + np.asarray(shift)
    strip.arc[:] = x
    return strip


def _flat(x, y):
    return np.zeros_like(x)


def _step(x, y):
    # two parallel planes 1 m apart, split at the middle column
    return np.where(x >= 10 * PITCH, 1.0, 0.0)


def _crease(x, y):
    return np.where(x >= 10 * PITCH, x - 10 * PITCH, 0.0)


def _reference_fh(num_nodes: int, edges: np.ndarray, weights: np.ndarray, k: float) -> list:
    parent = list(range(num_nodes))
    size = [1] * num_nodes
    internal = [0.0] * num_nodes

    def find(x: int) -> int:
        while parent[x] != x:
            x = parent[x]
        return x

    order = sorted(range(len(weights)), key=lambda e: weights[e])
    for e in order:
        a, b = find(int(edges[e, 0])), find(int(edges[e, 1]))
        if a == b:
            continue
        w = float(weights[e])
        if w <= internal[a] + k / size[a] and w <= internal[b] + k / size[b]:
            parent[b] = a
            size[a] += size[b]
            internal[a] = w
    return [find(i) for i in range(num_nodes)]


def _canonical(roots) -> list:
    seen: dict = {}
    return [seen.setdefault(int(r), len(seen)) for r in roots]


def _grid_edges(rows: int, cols: int) -> np.ndarray:
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((i, i + 1))
            if r + 1 < rows:
                edges.append((i, i + cols))
    return np.array(edges, dtype=np.int64)


def _is_connected(mask: np.ndarray) -> bool:
    cells = list(zip(*np.nonzero(mask)))
    if not cells:
        return True
    seen = {cells[0]}
    queue = deque([cells[0]])
    while queue:
        r, c = queue.popleft()
        for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
            n = (r + dr, c + dc)
            if 0 <= n[0] < mask.shape[0] and 0 <= n[1] < mask.shape[1] and mask[n] and n not in seen:
                seen.add(n)
                queue.append(n)
    return len(seen) == len(cells)


def test_flat_plane_normals_point_up():
    normals = estimate_normals(_surface_strip(_flat), window=2)
    assert normals.defined.all()
    assert np.allclose(normals.normals, [0.0, 0.0, 1.0], atol=1e-12)
    assert normals.normal_at(3, 4).tolist() == normals.normals[3, 4].tolist()


def test_normals_face_scan_head():
    strip = _surface_strip(_crease)
    normals = estimate_normals(strip)
    facing = np.einsum("hcj,hcj->hc", normals.normals, strip.t0 - strip.xyz)
    assert np.all(facing[normals.defined] >= 0.0)


def test_normals_robust_to_gross_outliers():
    rng = np.random.default_rng(21)
    strip = _surface_strip(_flat, rows=40, cols=40)
    outlier = rng.random((40, 40)) < 0.2
    strip.xyz[outlier, 2] += 1.0
    normals = estimate_normals(strip, window=2, ransac=RansacParams(iterations=100, inlier_dist=0.01))
    good = normals.defined & ~outlier
    assert good.sum() >= 0.95 * (~outlier).sum()
    cos = normals.normals[good] @ np.array([0.0, 0.0, 1.0])
    assert np.mean(cos >= np.cos(np.radians(1.0))) >= 0.99


def test_sparse_neighbourhood_is_undefined():
    strip = _surface_strip(_flat, rows=5, cols=5)
    strip.valid[:] = False
    strip.valid[2, 1:4] = True
    normals = estimate_normals(strip)
    assert not normals.defined.any()
    assert normals.normal_at(2, 2) is None


def test_normal_estimation_is_deterministic():
    rng = np.random.default_rng(4)
    strip = _surface_strip(_crease)
    strip.xyz[..., 2] += rng.normal(0.0, 0.002, size=(20, 20))
    a = estimate_normals(strip)
    b = estimate_normals(strip)
    assert np.array_equal(a.normals, b.normals)


def test_estimate_normals_rejects_bad_window():
    with pytest.raises(ValueError):
        estimate_normals(_surface_strip(_flat), window=0)


def _field(xyz, normals) -> NormalField:
    xyz = np.asarray(xyz, dtype=np.float64).reshape(1, 2, 3)
    normals = np.asarray(normals, dtype=np.float64).reshape(1, 2, 3)
    return NormalField(xyz=xyz, normals=normals, offsets=np.zeros((1, 2)), defined=np.ones((1, 2), dtype=bool))


def test_edge_weight_coplanar_is_zero():
    f = _field([[0, 0, 0], [0.05, 0, 0]], [[0, 0, 1], [0, 0, 1]])
    assert edge_weight((0, 0), (0, 1), f, SegmentationConfig()) == 0.0


def test_edge_weight_right_angle_crease():
    cfg = SegmentationConfig()
    f = _field([[0, 0, 0], [0, 0, 0]], [[0, 0, 1], [1, 0, 0]])
    assert edge_weight((0, 0), (0, 1), f, cfg) == pytest.approx(1.0 / cfg.c1_scale)


def test_edge_weight_depth_gap():
    f = _field([[0, 0, 0], [0, 0, 0.05]], [[0, 0, 1], [0, 0, 1]])
    assert edge_weight((0, 0), (0, 1), f, SegmentationConfig(c0_scale=0.05)) == pytest.approx(1.0)


def test_edge_weight_needs_neighbours_and_normals():
    f = _field([[0, 0, 0], [0, 0, 0]], [[0, 0, 1], [0, 0, 1]])
    with pytest.raises(ValueError):
        edge_weight((0, 0), (0, 0), f, SegmentationConfig())
    f.defined[0, 1] = False
    assert edge_weight((0, 0), (0, 1), f, SegmentationConfig()) is None


def test_raster_edge_weights_symmetric():
    rng = np.random.default_rng(6)
    strip = _surface_strip(_crease, rows=8, cols=8)
    strip.xyz[..., 2] += rng.normal(0.0, 0.01, size=(8, 8))
    normals = estimate_normals(strip)
    cfg = SegmentationConfig()
    edges, weights = raster_edges(normals, cfg)
    cols = strip.cols
    for (a, b), w in zip(edges.tolist(), weights.tolist()):
        pa, pb = divmod(a, cols), divmod(b, cols)
        both = 0.5 * (edge_weight(pa, pb, normals, cfg) + edge_weight(pb, pa, normals, cfg))
        assert w == pytest.approx(both, abs=1e-12)


def test_single_plane_gives_one_segment():
    strip = _surface_strip(_flat)
    normals, labels = segment_strip(strip, SegmentationConfig())
    assert labels.count == 1
    assert np.all(labels.labels == 0)
    assert labels.sizes.tolist() == [400]


def test_gapped_planes_give_two_segments():
    strip = _surface_strip(_step)
    _, labels = segment_strip(strip, SegmentationConfig())
    assert labels.count == 2
    assert set(np.unique(labels.labels[:, :10]).tolist()) == {0}
    assert set(np.unique(labels.labels[:, 10:]).tolist()) == {1}
    assert labels.label_at(2, 15) == 1


def test_small_regions_are_unlabeled():
    strip = _surface_strip(_step, rows=4, cols=20)
    _, labels = segment_strip(strip, SegmentationConfig(min_region_px=50))
    assert labels.count == 0
    assert np.all(labels.labels == NO_SEGMENT)
    assert labels.label_at(0, 0) is None


def test_segments_are_connected_and_large_enough():
    rng = np.random.default_rng(13)
    strip = _surface_strip(_crease, rows=30, cols=30)
    strip.xyz[..., 2] += rng.normal(0.0, 0.003, size=(30, 30))
    _, labels = segment_strip(strip, SegmentationConfig(min_region_px=20))
    for seg in range(labels.count):
        mask = labels.labels == seg
        assert mask.sum() >= 20
        assert _is_connected(mask)


def test_segmentation_invariant_to_strip_id_and_translation():
    rng = np.random.default_rng(17)
    noise = np.round(rng.normal(0.0, 0.004, size=(20, 20)) * 1024.0) / 1024.0
    a = _surface_strip(_crease, strip_id=1)
    a.xyz[..., 2] += noise
    b = _surface_strip(_crease, strip_id=99, shift=(1024.0, -512.0, 256.0))
    b.xyz[..., 2] += noise
    _, la = segment_strip(a)
    _, lb = segment_strip(b)
    assert np.array_equal(la.labels, lb.labels)


def test_felzenszwalb_matches_reference_on_random_graphs():
    rng = np.random.default_rng(99)
    edges = _grid_edges(10, 10)
    for trial in range(50):
        weights = rng.random(len(edges))
        k = float(rng.uniform(0.05, 3.0))
        ours = felzenszwalb(100, edges, weights, k)
        ref = _reference_fh(100, edges, weights, k)
        assert _canonical(ours) == _canonical(ref), f"trial {trial}"


def test_larger_k_never_adds_segments_on_creased_surface():
    strip = _surface_strip(_crease)
    normals = estimate_normals(strip)
    counts = [segment(strip, normals, k, min_region_px=1).count for k in (0.05, 0.5, 5.0, 500.0)]
    assert counts == sorted(counts, reverse=True)
    assert counts[-1] == 1


def test_felzenszwalb_rejects_non_positive_k():
    with pytest.raises(ValueError):
        felzenszwalb(4, np.array([[0, 1]]), np.array([0.1]), 0.0)


def test_disjoint_set_tracks_sizes():
    ds = DisjointSet(5)
    root = ds.union(0, 1)
    root = ds.union(root, ds.find(2))
    assert ds.size[ds.find(2)] == 3
    assert ds.find(0) == ds.find(1) == ds.find(2)
    assert ds.find(3) != ds.find(4)
