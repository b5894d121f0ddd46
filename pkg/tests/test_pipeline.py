from __future__ import annotations

import json
import tracemalloc
from pathlib import Path

import numpy as np
import pytest

from core.corrections import CorrectionsSet, read_corrections
from core.diagnostics import truth_report
from core.engine import JobError
from core.normal_blocks import NoiseConfig
from core.pipeline import (
    DEFAULT_PLAN,
    EngineConfig,
    IterationError,
    IterationPlan,
    PipelineParams,
    PlanError,
    StripAdjustment,
    TileIndex,
    TileKey,
    TilingConfig,
    emit_tiles,
    estimate_iteration,
    estimate_tile,
    load_tile,
    preprocess_job,
    run_schedule,
    tile_latent_map,
    tile_memberships,
)
from core.segmentation import SegmentationConfig
from core.strip import POINT_RECORD_DTYPE
from core.synth import (
    ErrorSpec,
    ScannerSpec,
    generate,
    read_scene_paths,
    read_truth_dir,
    street_block,
    street_canyon,
    street_paths,
    write_generated,
)

LENGTH = 12.0
SCANNER = ScannerSpec(rows=360, profile_spacing=0.25)
COARSE = [(0.3, 0.25), (0.3, 0.25), (0.2, 0.25), (0.15, 0.25), (0.15, 0.25)]


def _params(scratch: Path, workers: int = 1, fixed=()) -> PipelineParams:
    return PipelineParams(
        tiling=TilingConfig(tile_size=10.0, overlap=0.3),
        engine=EngineConfig(workers=workers, scratch=str(scratch)),
        fixed_trajectories=tuple(fixed),
    )


def _preprocessed(root: Path, strips) -> TileIndex:
    return preprocess_job(strips, _params(root / "scratch"), root / "tiles")


@pytest.fixture(scope="module")
def clean_tiles(tmp_path_factory) -> TileIndex:
    root = tmp_path_factory.mktemp("clean")
    scene = street_canyon(LENGTH)
    data = generate(scene, street_paths(LENGTH, passes=1), SCANNER, ErrorSpec(max_translation=0.0, max_rotation_deg=0.0))
    strips = write_generated(data, scene, root / "data")
    return _preprocessed(root, strips)


@pytest.fixture(scope="module")
def exact_tiles(tmp_path_factory) -> TileIndex:
    """No pose error and no range noise: every point lies exactly on its plane."""
    root = tmp_path_factory.mktemp("exact")
    scene = street_canyon(LENGTH)
    exact = ErrorSpec(max_translation=0.0, max_rotation_deg=0.0, noise_sigma=0.0)
    data = generate(scene, street_paths(LENGTH, passes=1), SCANNER, exact)
    return _preprocessed(root, write_generated(data, scene, root / "data"))


def _lifted_pair(root: Path, lift: float) -> TileIndex:
    """Trajectory 0 error free, trajectory 1 scanned `lift` metres too high."""
    scene = street_canyon(LENGTH)
    path0, path1 = street_paths(LENGTH, passes=1)
    clean = generate(scene, [path0], SCANNER, ErrorSpec(max_translation=0.0, max_rotation_deg=0.0))
    lifted = generate(scene, [path1], SCANNER, ErrorSpec(constant=(0.0, 0.0, lift, 0.0, 0.0, 0.0)))
    clean.strips += lifted.strips
    clean.truth.update(lifted.truth)
    return _preprocessed(root, write_generated(clean, scene, root / "data"))


@pytest.fixture(scope="module")
def shifted_tiles(tmp_path_factory) -> TileIndex:
    return _lifted_pair(tmp_path_factory.mktemp("shifted"), 0.05)


@pytest.fixture(scope="module")
def anchored_run(shifted_tiles: TileIndex, tmp_path_factory):
    root = tmp_path_factory.mktemp("anchored")
    return run_schedule(shifted_tiles, IterationPlan(COARSE), _params(root / "scratch", fixed=(0,)), root / "out")


def test_emit_tiles_examples():
    assert emit_tiles(np.array([7.0, 7.0, 0.0])) == [TileKey(0, 0)]
    assert emit_tiles(np.array([14.8, 7.0, 0.0])) == [TileKey(0, 0), TileKey(1, 0)]
    assert emit_tiles(np.array([14.8, 14.9, 0.0])) == [TileKey(0, 0), TileKey(0, 1), TileKey(1, 0), TileKey(1, 1)]
    assert emit_tiles(np.array([0.1, -0.1, 0.0])) == [TileKey(-1, -1), TileKey(-1, 0), TileKey(0, -1), TileKey(0, 0)]
    assert emit_tiles(np.array([-0.1, 5.0, 0.0])) == [TileKey(-1, 0), TileKey(0, 0)]


def test_tile_memberships_cover_home_and_respect_overlap():
    rng = np.random.default_rng(4)
    xyz = np.column_stack([rng.uniform(-40.0, 40.0, 3000), rng.uniform(-40.0, 40.0, 3000), np.zeros(3000)])
    ts, ov = 15.0, 0.3
    seen_home = np.zeros(3000, dtype=bool)
    for key, members in tile_memberships(xyz, ts, ov):
        x = xyz[members, 0]
        y = xyz[members, 1]
        assert np.all((x >= key.tx * ts - ov) & (x <= (key.tx + 1) * ts + ov))
        assert np.all((y >= key.ty * ts - ov) & (y <= (key.ty + 1) * ts + ov))
        home = np.all(np.floor(xyz[members, :2] / ts) == [key.tx, key.ty], axis=1)
        seen_home[members[home]] = True
        assert np.array_equal(members, np.sort(members))
    assert seen_home.all()


def test_overlap_must_stay_below_half_tile():
    with pytest.raises(ValueError):
        tile_memberships(np.zeros((1, 3)), 10.0, 5.0)


def test_tile_key_helpers():
    key = TileKey(-2, 3, 15.0)
    assert key.filename == "tile_-0002_+0003.npy"
    assert key.contains(-29.0, 45.0)
    assert not key.contains(-29.0, 60.0)
    assert TileKey.from_bytes(key.to_bytes(), 15.0) == key


def test_default_plan_shape():
    plan = IterationPlan.default().validate()
    assert plan.total == 18
    assert plan.steps[0] == (0.3, 0.1)
    assert plan.steps[-1] == (0.007, 0.01)
    assert len(DEFAULT_PLAN) == 18


@pytest.mark.parametrize(
    "steps",
    [
        [(0.1, 0.02), (0.2, 0.02)],
        [(0.004, 0.01)],
        [(0.0, 0.01)],
        [(0.1, -0.01)],
        [(0.1,)],
    ],
)
def test_invalid_plans_rejected(steps):
    with pytest.raises(PlanError):
        IterationPlan(steps).validate()


def test_plan_truncation():
    plan = IterationPlan.default()
    assert plan.truncated(3).total == 3
    assert plan.truncated(None).steps == plan.steps
    assert plan.truncated(0).validate().total == 0


def test_params_round_trip_through_json():
    params = PipelineParams(
        noise=NoiseConfig(sigma_dist=0.004),
        segmentation=SegmentationConfig(k=0.7),
        tiling=TilingConfig(tile_size=20.0, overlap=0.5),
        fixed_trajectories=(3,),
    )
    back = PipelineParams.from_json(json.loads(json.dumps(params.to_json())))
    assert back.noise == params.noise
    assert back.segmentation == params.segmentation
    assert back.tiling == params.tiling
    assert back.fixed_trajectories == (3,)


def test_partitions_default_to_workers():
    assert PipelineParams(engine=EngineConfig(workers=4, partitions=0)).partitions() == 4
    assert PipelineParams(engine=EngineConfig(workers=4, partitions=2)).partitions() == 2


def test_preprocess_writes_sorted_tiles(clean_tiles: TileIndex):
    assert sorted(clean_tiles.trajectories) == [0, 1]
    for lo, hi in clean_tiles.trajectories.values():
        assert lo == pytest.approx(0.0) and hi == pytest.approx(LENGTH)
    assert len(clean_tiles.tiles) > 1
    for entry in clean_tiles.tiles:
        recs = load_tile(entry.path)
        assert recs.dtype == POINT_RECORD_DTYPE
        assert recs.size == entry.count > 0
        keys = list(zip(recs["strip_id"].tolist(), recs["row"].tolist(), recs["col"].tolist()))
        assert keys == sorted(keys)
        assert np.all(recs["segment_id"] >= 0)
    stored = TileIndex.load(Path(clean_tiles.tiles[0].path).parent / "tiles.json")
    assert stored.tiles == clean_tiles.tiles


def test_preprocess_is_deterministic_across_workers(clean_tiles: TileIndex, tmp_path: Path):
    data_dir = Path(clean_tiles.tiles[0].path).parents[1] / "data"
    strips = sorted(data_dir.glob("*.strip"))
    index = preprocess_job(strips, _params(tmp_path / "scratch", workers=8), tmp_path / "tiles")
    assert [(t.tx, t.ty, t.count) for t in index.tiles] == [(t.tx, t.ty, t.count) for t in clean_tiles.tiles]
    for a, b in zip(index.tiles, clean_tiles.tiles):
        assert Path(a.path).read_bytes() == Path(b.path).read_bytes()


def test_error_free_data_is_a_fixed_point(clean_tiles: TileIndex, tmp_path: Path):
    out = tmp_path / "out"
    corrections, history = run_schedule(clean_tiles, IterationPlan(COARSE[:3]), _params(tmp_path / "scratch"), out)
    assert corrections.iteration == 3
    assert all(s.accepted > 0 for s in history)
    for tid in corrections.trajectory_ids:
        values = corrections.chain(tid).values
        assert np.max(np.abs(values[:, :3])) < 0.005
        assert np.max(np.abs(values[:, 3:])) < 5e-4
    for name in ("corrections.bin", "corrections.csv", "stats_01.json", "histogram_03.csv", "schedule_summary.json"):
        assert (out / name).exists()
    summary = json.loads((out / "schedule_summary.json").read_text(encoding="utf-8"))
    assert summary["corrections_sha256"] == corrections.provenance
    assert read_corrections(out / "corrections.bin").provenance == corrections.provenance


def test_estimation_is_deterministic_across_workers(clean_tiles: TileIndex, tmp_path: Path):
    outputs = []
    for workers in (1, 2, 8):
        params = _params(tmp_path / f"scratch{workers}", workers=workers)
        corrections, _ = run_schedule(clean_tiles, IterationPlan(COARSE[:2]), params, tmp_path / f"out{workers}")
        outputs.append(corrections.to_bytes())
    assert outputs[0] == outputs[1] == outputs[2]


def test_fixed_trajectory_anchors_the_shift(anchored_run):
    corrections, history = anchored_run
    assert len(history) == 5
    assert np.max(np.abs(corrections.chain(0).values)) < 1e-6
    tz = corrections.chain(1).values[:, 2]
    assert np.median(tz) == pytest.approx(-0.05, abs=0.01)
    assert history[-1].distance_std < history[0].distance_std


def test_distance_spread_settles_over_the_last_iterations(anchored_run):
    _, history = anchored_run
    tail = [s.distance_std for s in history[-3:]]
    for before, after in zip(tail, tail[1:]):
        assert after <= 1.05 * before


def test_participation_rises_then_drops_with_tighter_threshold(tmp_path: Path):
    index = _lifted_pair(tmp_path / "lifted", 0.2)
    plan = IterationPlan([(0.15, 0.25)] * 3 + [(0.05, 0.1)])
    _, history = run_schedule(index, plan, _params(tmp_path / "scratch", fixed=(0,)), tmp_path / "out")
    accepted = [s.accepted for s in history]
    peak = int(np.argmax(accepted))
    assert peak > 0
    assert all(a < b for a, b in zip(accepted[:peak], accepted[1 : peak + 1]))
    assert accepted[-1] < accepted[peak]


def test_exact_data_is_a_strict_fixed_point(exact_tiles: TileIndex, tmp_path: Path):
    zeros = CorrectionsSet.zeros(exact_tiles.trajectories)
    updated, stats, hist = estimate_iteration(exact_tiles, zeros, COARSE[0], _params(tmp_path / "scratch"))
    assert stats.accepted > 0
    assert stats.max_increment_t <= 1e-9
    assert stats.max_increment_theta <= 1e-9
    for tid in updated.trajectory_ids:
        assert np.max(np.abs(updated.chain(tid).values)) <= 1e-9
    assert hist.std <= 1e-9


def _record_ids(recs: np.ndarray) -> np.ndarray:
    return (recs["strip_id"].astype(np.int64) << 40) | (recs["row"].astype(np.int64) << 20) | recs["col"].astype(np.int64)


def _accepted_ids(index: TileIndex, corrections: CorrectionsSet, step, params: PipelineParams) -> np.ndarray:
    ids = []
    for entry in index.tiles:
        recs = load_tile(entry.path)
        result = estimate_tile(recs, TileKey(entry.tx, entry.ty, index.tile_size), corrections, params, step[0], step[1])
        ids.append(_record_ids(recs)[result["accepted"]])
    return np.concatenate(ids)


def test_each_point_is_used_by_one_tile_only(clean_tiles: TileIndex, tmp_path: Path):
    params = _params(tmp_path / "scratch")
    corrections = CorrectionsSet.zeros(clean_tiles.trajectories)
    for step in COARSE[:2]:
        ids = _accepted_ids(clean_tiles, corrections, step, params)
        assert np.unique(ids).size == ids.size > 0
        corrections, stats, _ = estimate_iteration(clean_tiles, corrections, step, params)
        assert stats.accepted == ids.size
    ids = _accepted_ids(clean_tiles, corrections, COARSE[2], params)
    assert np.unique(ids).size == ids.size


def test_tile_files_hold_every_point_within_the_overlap(clean_tiles: TileIndex):
    files = {(e.tx, e.ty): load_tile(e.path) for e in clean_tiles.tiles}
    everything = np.concatenate(list(files.values()))
    ids, first = np.unique(_record_ids(everything), return_index=True)
    xyz = everything["xyz"][first]
    expected = {
        (key.tx, key.ty): set(ids[members].tolist())
        for key, members in tile_memberships(xyz, clean_tiles.tile_size, clean_tiles.overlap)
    }
    assert set(expected) == set(files)
    for key, recs in files.items():
        assert set(_record_ids(recs).tolist()) == expected[key]
    border = np.abs(xyz[:, 0] / clean_tiles.tile_size - np.round(xyz[:, 0] / clean_tiles.tile_size)) * clean_tiles.tile_size
    assert np.count_nonzero(border <= clean_tiles.overlap) > 0


def test_empty_plan_returns_initial_corrections(clean_tiles: TileIndex, tmp_path: Path):
    corrections, history = run_schedule(clean_tiles, IterationPlan([]), _params(tmp_path / "scratch"), tmp_path / "out")
    assert history == []
    assert corrections.iteration == 0
    assert (tmp_path / "out" / "corrections.bin").exists()


def test_initial_corrections_need_trajectories(tmp_path: Path):
    index = TileIndex(15.0, 0.3, [], {})
    with pytest.raises(ValueError):
        StripAdjustment(index, _params(tmp_path), tmp_path).initial_corrections()


def test_unknown_trajectory_fails_iteration(clean_tiles: TileIndex, tmp_path: Path):
    corrections = CorrectionsSet.zeros({0: clean_tiles.trajectories[0]})
    with pytest.raises(IterationError):
        estimate_iteration(clean_tiles, corrections, COARSE[0], _params(tmp_path / "scratch"))


def test_estimate_tile_reports_blocks_and_counts(clean_tiles: TileIndex):
    entry = max(clean_tiles.tiles, key=lambda t: t.count)
    tile = TileKey(entry.tx, entry.ty, clean_tiles.tile_size)
    recs = load_tile(entry.path)
    corrections = CorrectionsSet.zeros(clean_tiles.trajectories)
    params = _params(Path("unused"))
    result = estimate_tile(recs, tile, corrections, params, 0.3, 0.25)
    counts = result["counts"]
    assert counts["kept"] == sum(counts[k] for k in ("accepted", "threshold", "normal_gate", "low_confidence"))
    assert counts["accepted"] == result["distances"].size > 0
    assert np.count_nonzero(result["accepted"]) == counts["accepted"]
    assert result["accepted"].shape == (recs.shape[0],)
    assert np.all(np.abs(result["distances"]) <= 0.3)
    assert set(result["blocks"]) <= {0, 1}
    latent, batch = tile_latent_map(recs, tile, corrections, params, 0.3, 0.25)
    assert latent is not None
    assert np.array_equal(batch.distance[batch.accepted], result["distances"])
    with pytest.raises(KeyError):
        estimate_tile(recs, tile, CorrectionsSet.zeros({5: (0.0, 1.0)}), params, 0.3, 0.25)


def test_tile_without_owned_points_gives_nothing(clean_tiles: TileIndex):
    entry = clean_tiles.tiles[0]
    far = TileKey(entry.tx + 50, entry.ty, clean_tiles.tile_size)
    result = estimate_tile(
        load_tile(entry.path), far, CorrectionsSet.zeros(clean_tiles.trajectories), _params(Path("unused")), 0.3, 0.25
    )
    assert result["blocks"] == {}
    assert result["counts"]["kept"] == 0


def test_job_error_is_not_swallowed_for_io_failures(clean_tiles: TileIndex, tmp_path: Path):
    broken = TileIndex(clean_tiles.tile_size, clean_tiles.overlap, list(clean_tiles.tiles), dict(clean_tiles.trajectories))
    broken.tiles[0] = type(broken.tiles[0])(broken.tiles[0].tx, broken.tiles[0].ty, str(tmp_path / "missing.npy"), 1)
    params = _params(tmp_path / "scratch")
    params.engine.max_retries = 0
    with pytest.raises(JobError):
        estimate_iteration(broken, CorrectionsSet.zeros(broken.trajectories), COARSE[0], params)


def _estimation_peak(root: Path, length: float) -> tuple:
    scene = street_canyon(length)
    scanner = ScannerSpec(rows=240, profile_spacing=0.25, yaw_deg=(10.0, -10.0))
    err = ErrorSpec(max_translation=0.02, max_rotation_deg=0.02)
    data = generate(scene, street_paths(length, passes=1), scanner, err)
    index = _preprocessed(root, write_generated(data, scene, root / "data"))
    corrections = CorrectionsSet.zeros(index.trajectories)
    tracemalloc.start()
    try:
        _, stats, _ = estimate_iteration(index, corrections, COARSE[0], _params(root / "scratch"))
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return peak, stats.kept, len(index.tiles)


def test_estimation_memory_follows_tiles_not_scene_length(tmp_path: Path):
    short_peak, short_points, short_tiles = _estimation_peak(tmp_path / "short", 20.0)
    long_peak, long_points, long_tiles = _estimation_peak(tmp_path / "long", 40.0)
    assert long_tiles > short_tiles
    assert long_points >= 1.8 * short_points
    assert long_peak <= 1.3 * short_peak


BLOCK_LENGTH = 26.0
BLOCK_PLAN = [(0.3, 0.25)] * 2 + [(0.2, 0.25)] * 2 + [(0.15, 0.25)] * 6


@pytest.fixture(scope="module")
def block_run(tmp_path_factory):
    """Street with alleys, spline pose errors on every drive, nothing fixed."""
    root = tmp_path_factory.mktemp("block")
    scene = street_block(BLOCK_LENGTH)
    err = ErrorSpec(max_translation=0.05, max_rotation_deg=0.05, seed=21)
    data = generate(scene, street_paths(BLOCK_LENGTH, passes=1), SCANNER, err)
    index = _preprocessed(root, write_generated(data, scene, root / "data"))
    corrections, history = run_schedule(index, IterationPlan(BLOCK_PLAN), _params(root / "scratch"), root / "out")
    return index, corrections, history, root / "data"


def _truth_rms(corrections: CorrectionsSet, data_dir: Path) -> float:
    truth = read_truth_dir(data_dir)
    paths = read_scene_paths(data_dir)
    positions = {tid: paths[tid].pose(arcs)[0] for tid, (arcs, _) in truth.items()}
    estimated = {
        tid: (corrections.chain(tid).anchor_arcs(), corrections.chain(tid).values) for tid in corrections.trajectory_ids
    }
    return truth_report(estimated, truth, positions)["rms_position_m"]


def test_block_corrections_approach_truth(block_run):
    index, corrections, _, data_dir = block_run
    before = _truth_rms(CorrectionsSet.zeros(index.trajectories), data_dir)
    after = _truth_rms(corrections, data_dir)
    assert before > 0.01
    assert after <= 0.25 * before
    assert after <= 0.01


def test_block_distance_spread_shrinks(block_run):
    _, _, history, _ = block_run
    assert len(history) == len(BLOCK_PLAN)
    assert history[-1].distance_std <= 1.5 * 0.003
    assert history[0].distance_std >= 3.0 * history[-1].distance_std
