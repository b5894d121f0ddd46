from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.config import AppConfig, load_config, save_config
from core.corrections import read_corrections
from core.diagnostics import (
    DistanceHistogram,
    std_map_render,
    temperature_colors,
    truth_report,
    write_histogram_csv,
    write_ppm,
    write_report,
)
from core.engine import JobError
from core.latent_map import read_map_dump, write_map_dump
from core.pipeline import (
    TILE_INDEX_NAME,
    IterationError,
    TileIndex,
    TileKey,
    corrected_strip,
    load_tile,
    preprocess_job,
    run_schedule,
    tile_latent_map,
)
from core.ply import segment_colors, write_ply
from core.segmentation import segment_strip
from core.strip import read_strip
from core.synth import generate, read_scene_paths, read_truth_dir, scene_from_config, write_generated
from core.trajectory_solver import SingularChainError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _app_base_dir() -> Path:
    return Path(__file__).resolve().parents[1]


def _resolve_config_path(path_str: Optional[str], base_dir: Path) -> Path:
    if not path_str:
        return base_dir / "config.yaml"
    p = Path(path_str)
    if p.is_absolute():
        return p
    if path_str == "config.yaml":
        return base_dir / p
    return p


def build_arg_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML config path.")
    common.add_argument("--workers", type=int, default=None, help="Engine worker threads.")
    common.add_argument("--scratch", default=None, help="Engine scratch directory.")
    common.add_argument("--seed", type=int, default=None, help="Generator seed.")
    common.add_argument("--iterations-override", type=int, default=None, help="Run only the first N plan steps.")
    common.add_argument("--tile-size", type=float, default=None, help="Tile edge length in meters.")
    common.add_argument("--verbose", action="store_true", help="Print engine and driver progress.")

    p = _ArgumentParser(description="LiDAR strip adjustment: segmentation, tiling and alternating least squares")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    g = sub.add_parser("generate", parents=[common], help="Write synthetic strips and truth sidecars.")
    g.add_argument("--out", required=True, help="Output directory.")
    g.add_argument("--scene", choices=["standard", "canyon"], default=None, help="Scene layout.")

    pp = sub.add_parser("preprocess", parents=[common], help="Segment strips and write tile files.")
    pp.add_argument("--strips", nargs="+", required=True, help="Strip files or directories holding *.strip.")
    pp.add_argument("--tiles", required=True, help="Tile output directory.")

    e = sub.add_parser("estimate", parents=[common], help="Run the iteration plan over preprocessed tiles.")
    e.add_argument("--tiles", required=True, help="Tile directory written by preprocess.")
    e.add_argument("--out", required=True, help="Directory for corrections and stats manifests.")
    e.add_argument("--initial", default=None, help="Corrections file to start from.")

    x = sub.add_parser("export", parents=[common], help="Write corrected points as PLY.")
    x.add_argument("--strips", nargs="+", required=True, help="Strip files or directories holding *.strip.")
    x.add_argument("--corrections", default=None, help="Corrections file; omitted means uncorrected.")
    x.add_argument("--out", required=True, help="Output .ply path.")
    x.add_argument("--segments", action="store_true", help="Only segmented points, colored by segment.")

    s = sub.add_parser("stats", parents=[common], help="Histogram, std map and truth report for a corrections file.")
    s.add_argument("--tiles", required=True, help="Tile directory written by preprocess.")
    s.add_argument("--corrections", required=True, help="Corrections file.")
    s.add_argument("--out", required=True, help="Output directory.")
    s.add_argument("--truth", default=None, help="Directory with truth_traj*.csv sidecars.")
    s.add_argument("--threshold", type=float, default=None, help="Correspondence threshold (default: last plan step).")
    s.add_argument("--lsm-pitch", type=float, default=None, help="LSM pitch (default: last plan step).")
    s.add_argument("--scale-max", type=float, default=0.007, help="Std that maps to red, meters.")
    s.add_argument("--latent-ply", action="store_true", help="Also write the latent map pixels as PLY.")
    return p


def _apply_cli_overrides(cfg: AppConfig, args: argparse.Namespace) -> None:
    if args.workers is not None:
        cfg.engine.workers = max(1, int(args.workers))
    if args.scratch:
        cfg.engine.scratch = args.scratch
    if args.seed is not None:
        cfg.synth.seed = int(args.seed)
    if args.tile_size is not None:
        if not args.tile_size > 0.0:
            raise ValueError("--tile-size must be positive.")
        cfg.tiling.tile_size = float(args.tile_size)
        cfg.tiling.overlap = min(cfg.tiling.overlap, 0.49 * cfg.tiling.tile_size)
    if getattr(args, "scene", None):
        cfg.synth.scene = args.scene


def _collect_strips(paths: Sequence[str]) -> List[Path]:
    out: List[Path] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            out.extend(sorted(p.glob("*.strip")))
        elif p.exists():
            out.append(p)
        else:
            raise ValueError(f"Strip input not found: {p}")
    if not out:
        raise ValueError("No strip files given.")
    return out


def _load_index(tiles_dir: str) -> TileIndex:
    path = Path(tiles_dir) / TILE_INDEX_NAME
    if not path.exists():
        raise ValueError(f"No tile index at {path}; run preprocess first.")
    return TileIndex.load(path)


def _run_generate(cfg: AppConfig, cfg_path: Path, args: argparse.Namespace) -> int:
    scene, paths, scanner, err = scene_from_config(cfg.synth)
    data = generate(scene, paths, scanner, err)
    written = write_generated(data, scene, args.out, meta={"seed": cfg.synth.seed, "scene": cfg.synth.scene})
    # the seed used is the one flag that persists
    stored = load_config(cfg_path)
    stored.synth.seed = cfg.synth.seed
    save_config(cfg_path, stored)
    points = sum(s.point_count for s in data.strips)
    print(f"generate: {len(written)} strips, {points} points -> {args.out}")
    return EXIT_OK


def _run_preprocess(cfg: AppConfig, args: argparse.Namespace, log: Optional[Callable[[str], None]]) -> int:
    strips = _collect_strips(args.strips)
    index = preprocess_job(strips, cfg.pipeline_params(), args.tiles, log)
    points = sum(t.count for t in index.tiles)
    print(f"preprocess: {len(strips)} strips -> {len(index.tiles)} tiles, {points} tile records")
    return EXIT_OK


def _run_estimate(cfg: AppConfig, args: argparse.Namespace, log: Optional[Callable[[str], None]]) -> int:
    index = _load_index(args.tiles)
    plan = cfg.plan().truncated(args.iterations_override).validate()
    initial = read_corrections(args.initial) if args.initial else None
    corrections, history = run_schedule(index, plan, cfg.pipeline_params(), args.out, initial, log)
    for stats in history:
        print(
            f"iteration {stats.iteration:2d}: threshold={stats.threshold:.4f} accepted={stats.accepted} "
            f"std={stats.distance_std * 1000.0:.3f} mm"
        )
    print(f"estimate: corrections {corrections.provenance[:16]} -> {Path(args.out) / 'corrections.bin'}")
    return EXIT_OK


def _run_export(cfg: AppConfig, args: argparse.Namespace, log: Optional[Callable[[str], None]]) -> int:
    strips = _collect_strips(args.strips)
    corrections = read_corrections(args.corrections) if args.corrections else None
    xyz_parts: List[np.ndarray] = []
    seg_parts: List[np.ndarray] = []
    for path in strips:
        strip = read_strip(path)
        if args.segments:
            normals, labels = segment_strip(strip, cfg.segmentation)
            recs = strip.point_records(labels.labels, normals.normals, labeled_only=True)
            xyz = recs["xyz"]
            if corrections is not None and recs.size:
                xyz, _, _, _ = corrections.correct(recs["xyz"], recs["t0"], recs["arc"], recs["trajectory_id"])
            # one id space across strips
            seg_parts.append((recs["strip_id"].astype(np.int64) << 20) | recs["segment_id"].astype(np.int64))
        elif corrections is not None:
            xyz, _ = corrected_strip(strip, corrections)
        else:
            xyz = strip.xyz[strip.valid]
        xyz_parts.append(np.asarray(xyz, dtype=np.float64).reshape(-1, 3))
        if log is not None:
            log(f"[INFO] export: {path.name} {xyz_parts[-1].shape[0]} points")
    xyz = np.concatenate(xyz_parts) if xyz_parts else np.zeros((0, 3))
    if args.segments:
        ids = np.concatenate(seg_parts) if seg_parts else np.zeros(0, dtype=np.int64)
        write_ply(args.out, xyz, colors=segment_colors(ids), segment_ids=ids)
    else:
        write_ply(args.out, xyz)
    print(f"export: {xyz.shape[0]} points -> {args.out}")
    return EXIT_OK


def _run_stats(cfg: AppConfig, args: argparse.Namespace, log: Optional[Callable[[str], None]]) -> int:
    index = _load_index(args.tiles)
    corrections = read_corrections(args.corrections)
    params = cfg.pipeline_params()
    plan = cfg.plan()
    last = plan.steps[-1] if plan.steps else (0.007, 0.01)
    threshold = float(args.threshold) if args.threshold is not None else float(last[0])
    pitch = float(args.lsm_pitch) if args.lsm_pitch is not None else float(last[1])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    parts: List[DistanceHistogram] = []
    maps = []
    for entry in index.tiles:
        tile = TileKey(entry.tx, entry.ty, index.tile_size)
        latent, batch = tile_latent_map(load_tile(entry.path), tile, corrections, params, threshold, pitch)
        if latent is None:
            continue
        parts.append(DistanceHistogram.from_distances(batch.distance[batch.accepted]))
        maps.append(latent)
        if log is not None:
            log(f"[INFO] stats: tile ({entry.tx}, {entry.ty}) {latent.lsm_count} LSMs")

    hist = DistanceHistogram.merge(parts)
    write_histogram_csv(hist, out / "histogram.csv")
    dump_path = out / "latent_map.csv"
    pixels = write_map_dump(maps, dump_path)
    if pixels:
        dump = read_map_dump(dump_path)
        if np.any(np.isfinite(dump["std"])):
            write_ppm(std_map_render(dump, args.scale_max), out / "std_map.ppm")
        if args.latent_ply:
            std = np.nan_to_num(dump["std"], nan=0.0)
            xyz = np.stack([dump["x"], dump["y"], dump["z"]], axis=1)
            write_ply(out / "latent_map.ply", xyz, colors=temperature_colors(std, args.scale_max))
    if args.truth:
        truth = read_truth_dir(args.truth)
        if not truth:
            raise ValueError(f"No truth sidecars in {args.truth}.")
        estimated: Dict[int, Tuple[np.ndarray, np.ndarray]] = {
            tid: (corrections.chains[tid].anchor_arcs(), corrections.chains[tid].values)
            for tid in corrections.trajectory_ids
        }
        paths = read_scene_paths(args.truth)
        positions = {tid: paths[tid].pose(truth[tid][0])[0] for tid in truth} if set(truth) <= set(paths) else None
        report = truth_report(estimated, truth, positions, fixed_gauge=bool(params.fixed_trajectories))
        write_report(report, out / "truth_report.json")
        print(f"stats: rms position error {report['rms_position_m'] * 1000.0:.3f} mm")
    print(f"stats: {hist.count} distances, std={hist.std * 1000.0:.3f} mm, {pixels} map pixels -> {out}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_arg_parser().parse_args(argv)
    log = print if args.verbose else None
    try:
        cfg_path = _resolve_config_path(args.config, _app_base_dir())
        cfg = load_config(cfg_path)
        _apply_cli_overrides(cfg, args)
        if args.command == "generate":
            return _run_generate(cfg, cfg_path, args)
        if args.command == "preprocess":
            return _run_preprocess(cfg, args, log)
        if args.command == "estimate":
            return _run_estimate(cfg, args, log)
        if args.command == "export":
            return _run_export(cfg, args, log)
        return _run_stats(cfg, args, log)
    except (SingularChainError, IterationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, IterationError) and not isinstance(exc.__cause__, SingularChainError):
            return EXIT_INPUT
        return EXIT_NUMERICAL
    except JobError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.__cause__, SingularChainError):
            return EXIT_NUMERICAL
        if isinstance(exc.__cause__, (ValueError, KeyError)):
            return EXIT_INPUT
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
