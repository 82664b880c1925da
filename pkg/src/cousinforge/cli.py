"""Command-line pipeline orchestration.

Subcommands: distill (perception records to scene graph), materialize
(graph to cousin selection), generate (selection to k scene files),
build-library (batch distill+materialize+generate over a clip
manifest), evaluate (scene vs ground truth), scaling-fit (power-law
regression over N/SR points), navsim (scripted episode over a scene),
validate (schema-check any artifact file).

Every output embeds provenance {version, config, config_hash, input
hashes}; no timestamps or absolute paths, so reruns with identical
inputs are byte-identical for any --jobs value. Errors print one JSON
object to stderr and exit nonzero. Set COUSINFORGE_LOG=DEBUG|INFO|...
for logging verbosity.
"""

from __future__ import annotations

import argparse
import base64
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .assembly import generate_cousins, load_scene
from .config import PipelineConfig, load_config
from .errors import CousinForgeError, IoError, SchemaError, UnknownFrame
from .evaluation import GtObject, fidelity, fit_power_law, match_objects
from .fusion import (
    DetectionRecord,
    GroundMaskRecord,
    extract_sky,
    fuse_ground,
    fuse_objects,
)
from .geometry import CameraFrame, OrientedBox, read_depth
from .jsonio import (
    canonical_dumps,
    read_json,
    read_jsonl,
    sha256_file,
    write_canonical,
)
from .navsim import WaypointPolicy, make_route, run_episode_detailed, straight_policy
from .retrieval import (
    load_assets,
    load_materials,
    load_selection,
    load_skies,
    materialize,
    selection_to_dict,
)
from .scenegraph import SceneGraph, load_graph, save_graph

logger = logging.getLogger(__name__)


def _provenance(cfg: PipelineConfig, inputs: dict) -> dict:
    return {
        "version": __version__,
        "config": cfg.effective(),
        "config_hash": cfg.hash(),
        "inputs": dict(sorted(inputs.items())),
    }


# ---------------------------------------------------------------------------
# Input parsing


def _require(record: dict, key: str, where: str):
    if not isinstance(record, dict):
        raise SchemaError("expected object", where)
    if key not in record:
        raise SchemaError("missing field", f"{where}.{key}")
    return record[key]


def _load_image(path) -> np.ndarray:
    if str(path).endswith(".npy"):
        try:
            image = np.load(path)
        except OSError as exc:
            raise IoError(f"cannot read image {path}: {exc}") from exc
        return np.asarray(image, dtype=np.uint8)
    from PIL import Image

    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise IoError(f"cannot read image {path}: {exc}") from exc


def _load_frames_manifest(path) -> tuple[str, list[CameraFrame], dict, dict]:
    """Parse frames.json: source id, sorted frames, per-frame depth/image paths."""
    data = read_json(path)
    base = os.path.dirname(os.path.abspath(path))
    source_id = str(_require(data, "source_id", "frames"))
    entries = _require(data, "frames", "frames")
    if not isinstance(entries, list):
        raise SchemaError("expected array", "frames.frames")
    frames = []
    depth_paths = {}
    image_paths = {}
    for i, entry in enumerate(entries):
        where = f"frames[{i}]"
        frame_id = int(_require(entry, "frame_id", where))
        depth_rel = str(_require(entry, "depth", where))
        depth_path = depth_rel if os.path.isabs(depth_rel) else os.path.join(base, depth_rel)
        depth = read_depth(depth_path)
        try:
            frame = CameraFrame(
                frame_id=frame_id,
                width=int(_require(entry, "width", where)),
                height=int(_require(entry, "height", where)),
                fx=float(_require(entry, "fx", where)),
                fy=float(_require(entry, "fy", where)),
                cx=float(_require(entry, "cx", where)),
                cy=float(_require(entry, "cy", where)),
                rotation=np.asarray(_require(entry, "rotation", where), dtype=np.float64),
                translation=np.asarray(_require(entry, "translation", where), dtype=np.float64),
                depth=depth,
            )
        except ValueError as exc:
            raise SchemaError(str(exc), where) from exc
        frames.append(frame)
        depth_paths[frame_id] = (depth_rel, depth_path)
        image_rel = entry.get("image")
        if image_rel is not None:
            image_path = (
                image_rel if os.path.isabs(image_rel) else os.path.join(base, str(image_rel))
            )
            image_paths[frame_id] = (str(image_rel), image_path)
    ids = [f.frame_id for f in frames]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate frame_id values", "frames.frames")
    frames.sort(key=lambda f: f.frame_id)
    return source_id, frames, depth_paths, image_paths


def _load_detections(path) -> list[DetectionRecord]:
    records = []
    for i, raw in enumerate(read_jsonl(path)):
        where = f"detections[{i}]"
        mask = _require(raw, "mask", where)
        try:
            records.append(
                DetectionRecord(
                    frame_id=_require(raw, "frame_id", where),
                    det_id=_require(raw, "det_id", where),
                    label=_require(raw, "label", where),
                    score=_require(raw, "score", where),
                    mask_counts=_require(mask, "counts", f"{where}.mask"),
                    semantic_embed=_require(raw, "semantic_embed", where),
                    appearance_embed=_require(raw, "appearance_embed", where),
                )
            )
        except (ValueError, TypeError) as exc:
            raise SchemaError(str(exc), where) from exc
    return records


def _load_groundmasks(path) -> list[GroundMaskRecord]:
    records = []
    for i, raw in enumerate(read_jsonl(path)):
        where = f"groundmasks[{i}]"
        mask = _require(raw, "mask", where)
        try:
            patch_raw = base64.b64decode(str(_require(raw, "patch", where)).encode("ascii"))
            if len(patch_raw) != 64 * 64 * 3:
                raise ValueError(f"patch must decode to {64 * 64 * 3} bytes, got {len(patch_raw)}")
            records.append(
                GroundMaskRecord(
                    frame_id=_require(raw, "frame_id", where),
                    kind=_require(raw, "kind", where),
                    mask_counts=_require(mask, "counts", f"{where}.mask"),
                    patch=np.frombuffer(patch_raw, dtype=np.uint8).reshape(64, 64, 3),
                )
            )
        except (ValueError, TypeError) as exc:
            raise SchemaError(str(exc), where) from exc
    return records


def _load_gt(path) -> list[GtObject]:
    data = read_json(path)
    objects = _require(data, "objects", "gt")
    if not isinstance(objects, list):
        raise SchemaError("expected array", "gt.objects")
    out = []
    for i, raw in enumerate(objects):
        where = f"gt.objects[{i}]"
        box_raw = _require(raw, "box", where)
        try:
            box = OrientedBox(
                center=_require(box_raw, "center", f"{where}.box"),
                dims=_require(box_raw, "dims", f"{where}.box"),
                yaw=_require(box_raw, "yaw", f"{where}.box"),
            )
        except ValueError as exc:
            raise SchemaError(str(exc), f"{where}.box") from exc
        out.append(
            GtObject(
                category=str(_require(raw, "category", where)),
                box=box,
                gt_asset_id=raw.get("gt_asset_id"),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Distillation driver


def _distill_graph(
    frames_path,
    detections_path,
    groundmasks_path,
    cfg: PipelineConfig,
) -> SceneGraph:
    """Full distillation: stride filter, fuse objects/ground, extract sky."""
    source_id, frames, depth_paths, image_paths = _load_frames_manifest(frames_path)
    detections = _load_detections(detections_path)
    groundmasks = _load_groundmasks(groundmasks_path)
    fusion_cfg = cfg.fusion()

    known_ids = {f.frame_id for f in frames}
    for det in detections:
        if det.frame_id not in known_ids:
            raise UnknownFrame(f"detection references unknown frame_id {det.frame_id}")
    for gm in groundmasks:
        if gm.frame_id not in known_ids:
            raise UnknownFrame(f"ground mask references unknown frame_id {gm.frame_id}")

    kept = [f for f in frames if f.frame_id % fusion_cfg.frame_stride == 0]
    kept_ids = {f.frame_id for f in kept}
    kept_dets = [d for d in detections if d.frame_id in kept_ids]
    kept_masks = [g for g in groundmasks if g.frame_id in kept_ids]
    images = {}
    for frame in kept:
        if frame.frame_id in image_paths:
            images[frame.frame_id] = _load_image(image_paths[frame.frame_id][1])

    objects = fuse_objects(kept, kept_dets, fusion_cfg)
    grounds = fuse_ground(kept, kept_masks, fusion_cfg)
    sky = extract_sky(kept, images)

    inputs = {
        "frames": sha256_file(frames_path),
        "detections": sha256_file(detections_path),
        "groundmasks": sha256_file(groundmasks_path),
    }
    for frame_id in sorted(depth_paths):
        rel, full = depth_paths[frame_id]
        inputs[f"depth:{rel}"] = sha256_file(full)
    for frame_id in sorted(image_paths):
        rel, full = image_paths[frame_id]
        inputs[f"image:{rel}"] = sha256_file(full)

    return SceneGraph(
        objects=objects,
        grounds=grounds,
        sky=sky,
        source_id=source_id,
        frame_count=len(frames),
        provenance=_provenance(cfg, inputs),
    )


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_distill(args) -> int:
    cfg = load_config(args.config)
    graph = _distill_graph(args.frames, args.detections, args.groundmasks, cfg)
    save_graph(graph, args.output)
    print(args.output)
    return 0


def _cmd_materialize(args) -> int:
    cfg = load_config(args.config)
    k = args.k if args.k is not None else cfg.k
    graph = load_graph(args.graph)
    assets = load_assets(args.assets)
    materials = load_materials(args.materials)
    skies = load_skies(args.skies)
    selection = materialize(graph, assets, materials, skies, k=k)
    payload = selection_to_dict(selection)
    payload["provenance"] = _provenance(
        cfg,
        {
            "graph": sha256_file(args.graph),
            "assets": sha256_file(args.assets),
            "materials": sha256_file(args.materials),
            "skies": sha256_file(args.skies),
        },
    )
    write_canonical(args.output, payload)
    print(args.output)
    return 0


def _cmd_generate(args) -> int:
    cfg = load_config(args.config)
    graph = load_graph(args.graph)
    selection = load_selection(args.selection)
    assets = load_assets(args.assets)
    extra = _provenance(
        cfg,
        {
            "graph": sha256_file(args.graph),
            "selection": sha256_file(args.selection),
            "assets": sha256_file(args.assets),
        },
    )
    specs = generate_cousins(
        graph,
        selection,
        args.output,
        assets,
        extra_provenance=extra,
        margin=cfg.separation_margin,
        max_sweeps=cfg.max_sweeps,
    )
    for spec in specs:
        print(os.path.join(args.output, f"scene_{graph.source_id}_c{spec.cousin_index}.json"))
    return 0


def _run_clip(clip: dict, base: str, cfg: PipelineConfig, catalogs: dict, out_dir: str) -> dict:
    def resolve(rel):
        return rel if os.path.isabs(rel) else os.path.join(base, rel)

    graph = _distill_graph(
        resolve(clip["frames"]), resolve(clip["detections"]), resolve(clip["groundmasks"]), cfg
    )
    graph_name = f"graph_{graph.source_id}.json"
    save_graph(graph, os.path.join(out_dir, graph_name))
    selection = materialize(
        graph, catalogs["assets"], catalogs["materials"], catalogs["skies"], k=cfg.k
    )
    payload = selection_to_dict(selection)
    payload["provenance"] = _provenance(cfg, catalogs["hashes"])
    selection_name = f"selection_{graph.source_id}.json"
    write_canonical(os.path.join(out_dir, selection_name), payload)
    specs = generate_cousins(
        graph,
        selection,
        out_dir,
        catalogs["assets"],
        extra_provenance=_provenance(cfg, catalogs["hashes"]),
        margin=cfg.separation_margin,
        max_sweeps=cfg.max_sweeps,
    )
    return {
        "source_id": graph.source_id,
        "graph": graph_name,
        "selection": selection_name,
        "scenes": [f"scene_{graph.source_id}_c{s.cousin_index}.json" for s in specs],
    }


def _cmd_build_library(args) -> int:
    cfg = load_config(args.config)
    manifest = read_json(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))

    def resolve(rel):
        return rel if os.path.isabs(rel) else os.path.join(base, rel)

    assets_path = resolve(str(_require(manifest, "assets", "manifest")))
    materials_path = resolve(str(_require(manifest, "materials", "manifest")))
    skies_path = resolve(str(_require(manifest, "skies", "manifest")))
    clips = _require(manifest, "clips", "manifest")
    if not isinstance(clips, list) or not clips:
        raise SchemaError("expected non-empty array", "manifest.clips")
    catalogs = {
        "assets": load_assets(assets_path),
        "materials": load_materials(materials_path),
        "skies": load_skies(skies_path),
        "hashes": {
            "assets": sha256_file(assets_path),
            "materials": sha256_file(materials_path),
            "skies": sha256_file(skies_path),
            "manifest": sha256_file(args.manifest),
        },
    }
    os.makedirs(args.output, exist_ok=True)
    jobs = max(1, args.jobs)
    if jobs == 1:
        entries = [_run_clip(clip, base, cfg, catalogs, args.output) for clip in clips]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_run_clip, clip, base, cfg, catalogs, args.output) for clip in clips
            ]
            entries = [f.result() for f in futures]
    ids = [e["source_id"] for e in entries]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"duplicate clip source_ids: {ids}", "manifest.clips")
    index = {"clips": entries, "provenance": _provenance(cfg, catalogs["hashes"])}
    index_path = os.path.join(args.output, "library.json")
    write_canonical(index_path, index)
    print(index_path)
    return 0


def _cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    scene = load_scene(args.pred)
    gt = _load_gt(args.gt)
    matching = match_objects(scene.placements, gt, max_dist=cfg.match_gate)
    report = fidelity(scene.placements, gt, matching, iou_threshold=cfg.iou_threshold)
    payload = report.to_dict()
    payload["matched"] = len(matching)
    payload["provenance"] = _provenance(
        cfg, {"pred": sha256_file(args.pred), "gt": sha256_file(args.gt)}
    )
    write_canonical(args.output, payload)
    print(args.output)
    return 0


def _cmd_scaling_fit(args) -> int:
    cfg = load_config(args.config)
    points = []
    excluded = 0
    try:
        with open(args.points, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {args.points}: {exc}") from exc
    for row_index, row in enumerate(rows):
        if not row or not row[0].strip():
            continue
        try:
            n, sr = float(row[0]), float(row[1])
        except (ValueError, IndexError):
            if row_index == 0:
                continue  # header row
            raise SchemaError(f"row {row_index + 1}: expected 'N,SR' numbers", "points")
        if 1.0 - sr <= 0.0:
            logger.warning("excluding point N=%s SR=%s: E = 1-SR is not positive", n, sr)
            excluded += 1
            continue
        points.append((n, sr))
    fit = fit_power_law(points)
    payload = fit.to_dict()
    payload["excluded"] = excluded
    payload["log_points"] = [
        [float(np.log(n)), float(np.log(1.0 - sr))] for n, sr in points
    ]
    payload["provenance"] = _provenance(cfg, {"points": sha256_file(args.points)})
    write_canonical(args.output, payload)
    print(args.output)
    return 0


def _parse_floats(text: str, count: int, what: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != count:
        raise SchemaError(f"expected {count} comma-separated numbers, got {text!r}", what)
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise SchemaError(f"expected numbers, got {text!r}", what) from exc


def _cmd_navsim(args) -> int:
    cfg = load_config(args.config)
    scene = load_scene(args.scene)
    start = _parse_floats(args.start, 3, "start")
    goal = _parse_floats(args.goal, 2, "goal")
    episode_cfg = cfg.episode()
    weights = cfg.rewards()
    if args.policy == "straight":
        policy = straight_policy(goal, episode_cfg)
    else:
        route = make_route(start[:2], goal, episode_cfg.waypoint_spacing)
        policy = WaypointPolicy(route, episode_cfg)
    result = run_episode_detailed(scene, start, goal, policy, episode_cfg, weights)
    payload = {
        "trajectory": result.trajectory.tolist(),
        "metrics": result.metrics.to_dict(),
        "rewards": result.rewards,
        "total_return": result.total_return,
        "events": result.events,
        "route": make_route(start[:2], goal, episode_cfg.waypoint_spacing).tolist(),
        "policy": args.policy,
        "seed": args.seed,
        "provenance": _provenance(cfg, {"scene": sha256_file(args.scene)}),
    }
    write_canonical(args.output, payload)
    print(args.output)
    return 0


# ---------------------------------------------------------------------------
# validate


def _detect_kind(path) -> str:
    if str(path).endswith(".jsonl"):
        records = read_jsonl(path)
        if not records:
            raise SchemaError("empty jsonl file", "validate")
        first = records[0]
        if "asset_id" in first:
            return "assets"
        if "material_id" in first:
            return "materials"
        if "sky_id" in first:
            return "skies"
        raise SchemaError("unrecognized jsonl record", "validate")
    data = read_json(path)
    if not isinstance(data, dict):
        raise SchemaError("expected a JSON object", "validate")
    if "scene_id" in data:
        return "scene"
    if "meta" in data and "objects" in data:
        return "graph"
    if "k" in data and "sky" in data:
        return "selection"
    if "alpha" in data:
        return "fit"
    if "trajectory" in data:
        return "episode"
    if "cat_recovery" in data:
        return "report"
    if "clips" in data and isinstance(data.get("clips"), list) and "assets" in data:
        return "manifest"
    if "clips" in data:
        return "library"
    if "fusion" in data or "seed" in data:
        return "config"
    raise SchemaError("unrecognized document shape", "validate")


def _cmd_validate(args) -> int:
    kind = args.kind if args.kind != "auto" else _detect_kind(args.file)
    if kind == "graph":
        load_graph(args.file)
    elif kind == "selection":
        load_selection(args.file)
    elif kind == "scene":
        load_scene(args.file)
    elif kind == "assets":
        load_assets(args.file)
    elif kind == "materials":
        load_materials(args.file)
    elif kind == "skies":
        load_skies(args.file)
    elif kind == "config":
        load_config(args.file)
    elif kind == "gt":
        _load_gt(args.file)
    elif kind in ("fit", "episode", "report", "manifest", "library"):
        read_json(args.file)
    else:
        raise SchemaError(f"unknown kind {kind!r}", "validate")
    print(canonical_dumps({"valid": True, "kind": kind}))
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cousinforge",
        description="Distill urban scene graphs and assemble digital-cousin simulation scenes.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distill", help="perception records to scenegraph.json")
    p.add_argument("--frames", required=True, help="frames.json camera/depth manifest")
    p.add_argument("--detections", required=True, help="detections.jsonl")
    p.add_argument("--groundmasks", required=True, help="groundmasks.jsonl")
    p.add_argument("--config", default=None, help="pipeline config JSON")
    p.add_argument("-o", "--output", required=True, help="output scenegraph.json")
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser("materialize", help="graph to top-k cousin selection")
    p.add_argument("--graph", required=True)
    p.add_argument("--assets", required=True)
    p.add_argument("--materials", required=True)
    p.add_argument("--skies", required=True)
    p.add_argument("-k", type=int, default=None, help="cousins per node (default from config)")
    p.add_argument("--config", default=None)
    p.add_argument("-o", "--output", required=True, help="output selection.json")
    p.set_defaults(func=_cmd_materialize)

    p = sub.add_parser("generate", help="selection to k cousin scene files")
    p.add_argument("--graph", required=True)
    p.add_argument("--selection", required=True)
    p.add_argument("--assets", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("build-library", help="batch pipeline over a clip manifest")
    p.add_argument("--manifest", required=True, help="library manifest JSON")
    p.add_argument("--config", default=None)
    p.add_argument("--jobs", type=int, default=1, help="parallel clips")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=_cmd_build_library)

    p = sub.add_parser("evaluate", help="fidelity report of a scene vs ground truth")
    p.add_argument("--pred", required=True, help="scene JSON")
    p.add_argument("--gt", required=True, help="ground-truth JSON")
    p.add_argument("--config", default=None)
    p.add_argument("-o", "--output", required=True, help="output report.json")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("scaling-fit", help="power-law fit over N,SR points")
    p.add_argument("--points", required=True, help="CSV with columns N, SR")
    p.add_argument("--config", default=None)
    p.add_argument("-o", "--output", required=True, help="output fit.json")
    p.set_defaults(func=_cmd_scaling_fit)

    p = sub.add_parser("navsim", help="run one scripted navigation episode")
    p.add_argument("--scene", required=True)
    p.add_argument("--policy", choices=("straight", "waypoint"), default="waypoint")
    p.add_argument("--start", required=True, help="x,y,theta")
    p.add_argument("--goal", required=True, help="x,y")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("-o", "--output", required=True, help="output episode.json")
    p.set_defaults(func=_cmd_navsim)

    p = sub.add_parser("validate", help="schema-check any artifact file")
    p.add_argument("--file", required=True)
    p.add_argument(
        "--kind",
        default="auto",
        choices=(
            "auto",
            "graph",
            "selection",
            "scene",
            "assets",
            "materials",
            "skies",
            "config",
            "gt",
            "fit",
            "episode",
            "report",
            "manifest",
            "library",
        ),
    )
    p.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("COUSINFORGE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CousinForgeError as exc:
        error = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        if isinstance(exc, SchemaError) and exc.path:
            error["error"]["path"] = exc.path
        print(canonical_dumps(error), file=sys.stderr)
        return 1
    except ValueError as exc:
        print(
            canonical_dumps({"error": {"type": "ValueError", "message": str(exc)}}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
