"""Command-line interface.

Subcommands: synth | extract | refine | eval | pipeline. Every run is
deterministic given its inputs, config and seed; the effective merged
configuration is echoed into the output directory so any result can be
reproduced from its artifacts alone.

Exit codes: 0 success, 1 validation error (bad inputs, parameters or
files), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig, SceneConfig, dump_config, load_config
from .energy import CandidateSet
from .errors import CurbscanError, ValidationError
from .estimators import CurbExtractor
from .evaluate import metrics, report_csv, report_table
from .ground import extract_ground
from .io import PointCloud, read_polylines, read_xyz, write_polylines, write_xyz
from .refine import link_intersection, paths_to_polylines, refine_scene
from .synth import add_noise, add_scanner_gap, downsample, generate
from .voxel import build_grid, pack_keys


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curbscan", description="Road curb extraction from point clouds")
    parser.add_argument("--version", action="version", version=f"curbscan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="config file (INI, [pipeline]/[scene])")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="reserved; processing is single-threaded")

    p = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    common(p)

    p = sub.add_parser("extract", help="extract candidate curb voxels from a cloud")
    common(p)
    p.add_argument("--cloud", type=Path, required=True)
    p.add_argument("--dump-energy", action="store_true", help="write per-voxel energy CSV")

    p = sub.add_parser("refine", help="link candidate voxels into curb polylines")
    common(p)
    p.add_argument("--cloud", type=Path, required=True)
    p.add_argument("--candidates", type=Path, required=True)

    p = sub.add_parser("eval", help="score extracted curbs against ground truth")
    common(p)
    p.add_argument("--result", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--cloud", type=Path, required=True)

    p = sub.add_parser("pipeline", help="synth/extract/refine/eval end to end")
    common(p)
    p.add_argument("--cloud", type=Path, default=None, help="input cloud (instead of synthesizing)")
    p.add_argument("--truth", type=Path, default=None, help="truth polylines for --cloud runs")
    p.add_argument("--dump-energy", action="store_true")
    return parser


def _make_scene(scene_cfg: SceneConfig):
    scene = generate(scene_cfg.spec)
    if scene_cfg.downsample != 1.0:
        scene = downsample(scene, scene_cfg.downsample)
    if scene_cfg.noise_t > 0:
        scene = add_noise(scene, scene_cfg.noise_t)
    if scene_cfg.scanner_gap is not None:
        scene = add_scanner_gap(scene, *scene_cfg.scanner_gap)
    return scene


def _write_energy_csv(extractor: CurbExtractor, path: Path) -> None:
    field = extractor.energy_
    idx = field.indices
    scaled = field.e_scaled if field.e_scaled is not None else np.zeros_like(field.e)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("i,j,k,Gx,Gy,Gz,E,E_scaled\n")
        for row in range(len(idx)):
            fh.write(
                f"{idx[row, 0]},{idx[row, 1]},{idx[row, 2]},"
                f"{field.gx[row]:.6g},{field.gy[row]:.6g},{field.gz[row]:.6g},"
                f"{field.e[row]:.6g},{scaled[row]:.6g}\n"
            )


def _write_region_csv(extractor: CurbExtractor, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("region_id,rho,q,s1,s2,s3,step,cost\n")
        for p in extractor.paths_:
            d = p.diag
            if not d:
                continue
            rid = "/".join(str(v) for v in (p.region_id or ()))
            step = "/".join(str(v) for v in d.get("step", ()))
            fh.write(
                f"{rid},{d.get('rho', p.rho):.4f},{d.get('q', '')},"
                f"{d.get('s1', 0):.3f},{d.get('s2', 0):.3f},{d.get('s3', 0):.3f},"
                f"{step},{p.total_cost:.3f}\n"
            )


def _extract(cloud: PointCloud, pipeline: PipelineConfig) -> CurbExtractor:
    if len(cloud) < 100:
        raise ValidationError(f"cloud has only {len(cloud)} points; need at least 100")
    extractor = CurbExtractor(**pipeline.extractor_kwargs())
    extractor.fit(cloud.points)
    return extractor


def _link_curbs(polylines, pipeline: PipelineConfig):
    """Apply intersection linking between curb ends where it gates in."""
    out = list(polylines)
    added = []
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            arc = link_intersection(out[i], out[j], pipeline.link_max_gap, pipeline.voxel_size)
            if arc is not None:
                added.append(arc)
    return out + added


def _cmd_synth(args) -> int:
    pipeline, scene_cfg = load_config(args.config, args.seed)
    scene = _make_scene(scene_cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    write_xyz(scene.cloud, args.out / "cloud.xyz")
    write_polylines(list(scene.truth), args.out / "truth.plines")
    dump_config(pipeline, scene_cfg, args.out / "effective.cfg")
    print(f"wrote {len(scene.cloud):,} points and {len(scene.truth)} truth polylines to {args.out}")
    return 0


def _cmd_extract(args) -> int:
    pipeline, _ = load_config(args.config, args.seed)
    cloud = read_xyz(args.cloud)
    extractor = _extract(cloud, pipeline)
    if len(extractor.candidates_) == 0:
        raise ValidationError("no candidate voxels were selected")
    args.out.mkdir(parents=True, exist_ok=True)
    centers = extractor.grid_.voxel_center(extractor.candidates_.indices)
    write_xyz(PointCloud(centers), args.out / "candidates.xyz")
    if args.dump_energy:
        _write_energy_csv(extractor, args.out / "energy.csv")
    dump_config(pipeline, None, args.out / "effective.cfg")
    print(f"{len(extractor.candidates_):,} candidate voxels -> {args.out / 'candidates.xyz'}")
    return 0


def _cmd_refine(args) -> int:
    pipeline, _ = load_config(args.config, args.seed)
    cloud = read_xyz(args.cloud)
    cand_cloud = read_xyz(args.candidates)
    extractor = CurbExtractor(**pipeline.extractor_kwargs())

    # Rebuild the grid the candidates were extracted on, then map the
    # candidate centers back to voxels.
    pts = cloud
    if pipeline.ground_filter:
        pts = extract_ground(
            cloud, pipeline.bin_width, pipeline.extend_band,
            pipeline.tile_size if pipeline.tile_banding else None,
        )
    grid = build_grid(pts, pipeline.voxel_size)
    idx = grid.point_to_index(cand_cloud.points)
    keys = np.unique(pack_keys(idx))
    occupied = keys[np.isin(keys, grid.keys)]
    if len(occupied) == 0:
        raise ValidationError("no candidate centers map onto occupied voxels of this cloud")
    candidates = CandidateSet(grid, occupied)

    paths = refine_scene(grid, candidates, extractor.schedule(), extractor.refine_params())
    polylines = paths_to_polylines(paths, grid)
    polylines = _link_curbs(polylines, pipeline)
    args.out.mkdir(parents=True, exist_ok=True)
    write_polylines(polylines, args.out / "curbs.plines")
    dump_config(pipeline, None, args.out / "effective.cfg")
    print(f"{len(polylines)} curb polylines -> {args.out / 'curbs.plines'}")
    return 0


def _cmd_eval(args) -> int:
    pipeline, _ = load_config(args.config, args.seed)
    cloud = read_xyz(args.cloud)
    result = read_polylines(args.result)
    truth = read_polylines(args.truth)
    if not truth:
        raise ValidationError(f"{args.truth}: no truth polylines")
    if pipeline.ground_filter:
        cloud = extract_ground(
            cloud, pipeline.bin_width, pipeline.extend_band,
            pipeline.tile_size if pipeline.tile_banding else None,
        )
    report = metrics(cloud, result, truth, pipeline.eval_d)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "metrics.csv").write_text(report_csv(report), encoding="utf-8")
    print(report_table(report))
    return 0


def _cmd_pipeline(args) -> int:
    pipeline, scene_cfg = load_config(args.config, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)

    truth = None
    if args.cloud is not None:
        cloud = read_xyz(args.cloud)
        if args.truth is not None:
            truth = read_polylines(args.truth)
        dump_config(pipeline, None, args.out / "effective.cfg")
    else:
        scene = _make_scene(scene_cfg)
        cloud = scene.cloud
        truth = list(scene.truth)
        write_xyz(cloud, args.out / "cloud.xyz")
        write_polylines(truth, args.out / "truth.plines")
        dump_config(pipeline, scene_cfg, args.out / "effective.cfg")

    extractor = _extract(cloud, pipeline)
    centers = extractor.grid_.voxel_center(extractor.candidates_.indices)
    write_xyz(PointCloud(centers), args.out / "candidates.xyz")
    if args.dump_energy:
        _write_energy_csv(extractor, args.out / "energy.csv")

    polylines = _link_curbs(extractor.polylines_, pipeline)
    write_polylines(polylines, args.out / "curbs.plines")
    _write_region_csv(extractor, args.out / "regions.csv")

    if truth:
        ground = PointCloud(extractor.ground_points_)
        report = metrics(ground, polylines, truth, pipeline.eval_d)
        (args.out / "metrics.csv").write_text(report_csv(report), encoding="utf-8")
        print(report_table(report))
    print(f"artifacts in {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "extract": _cmd_extract,
    "refine": _cmd_refine,
    "eval": _cmd_eval,
    "pipeline": _cmd_pipeline,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CurbscanError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - unexpected
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
