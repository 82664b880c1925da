"""Generation stage: turn a graph plus cousin selection into scene files.

Each cousin index materializes the rank-i selection uniformly: ground
planes fitted as horizontal planes (trimmed-mean height, convex-hull
boundary, sidewalk forced 15 cm above the road), every object placed at
its centroid with yaw = heading - asset front_yaw, resting exactly on
its supporting plane, then separated until no two footprints overlap
in BEV (area-descending sweep, minimal translation along the line of
centers plus a 1 cm margin; irreducible overlaps drop the smaller
object with a provenance warning).

Ranks shorter than the requested cousin count clamp to their last
entry, so all k cousins of one graph share node ids and topology.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import NoGround, NoMaterialsOfKind, SchemaError, SelectionMissingNode
from .geometry import (
    OrientedBox,
    bev_intersection_area,
    convex_hull_xy,
    point_in_convex_polygon,
    wrap_angle,
)
from .jsonio import canonical_dumps, read_json, sha256_bytes, write_canonical
from .retrieval import AssetRecord, CousinSelection, selection_to_dict
from .scenegraph import GroundNode, SceneGraph

logger = logging.getLogger(__name__)

SIDEWALK_LIFT = 0.15

TRIM_FRACTION = 0.05

SEPARATION_MARGIN = 0.01

MAX_SWEEPS = 100


@dataclass
class GroundPlane:
    kind: str
    z: float
    boundary: np.ndarray
    material_id: str | None

    def __post_init__(self):
        self.z = float(self.z)
        self.boundary = np.asarray(self.boundary, dtype=np.float64).reshape(-1, 2)

    def __eq__(self, other):
        if not isinstance(other, GroundPlane):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.z == other.z
            and np.array_equal(self.boundary, other.boundary)
            and self.material_id == other.material_id
        )


@dataclass
class Placement:
    node_id: int
    asset_id: str
    category: str
    score: float
    position: np.ndarray
    yaw: float
    physics: dict
    footprint: OrientedBox

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)

    def __eq__(self, other):
        if not isinstance(other, Placement):
            return NotImplemented
        return (
            self.node_id == other.node_id
            and self.asset_id == other.asset_id
            and self.category == other.category
            and self.score == other.score
            and np.array_equal(self.position, other.position)
            and self.yaw == other.yaw
            and self.physics == other.physics
            and self.footprint == other.footprint
        )


@dataclass
class SceneSpec:
    scene_id: str
    cousin_index: int
    ground_planes: list[GroundPlane]
    sky_id: str | None
    placements: list[Placement]
    provenance: dict = field(default_factory=dict)


def trimmed_mean_z(values: np.ndarray, fraction: float = TRIM_FRACTION) -> float:
    """Mean of sorted values after dropping floor(fraction*n) from each end."""
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    trim = int(np.floor(fraction * len(values)))
    kept = values[trim : len(values) - trim] if trim > 0 else values
    return float(kept.mean())


def fit_ground_planes(
    grounds: list[GroundNode],
    selection: CousinSelection,
    cousin_index: int = 0,
) -> list[GroundPlane]:
    """Horizontal plane per ground kind; sidewalk pinned 15 cm above road.

    Plane height is the trimmed mean of the cloud's z values (5% per
    end); the boundary is the convex hull of the xy projection. The
    material is the selection's rank matching cousin_index, clamped to
    the last available rank.
    """
    by_kind = {g.kind: g for g in grounds}
    if "road" not in by_kind:
        raise NoGround("ground fitting requires a road node")
    planes = []
    road_z = trimmed_mean_z(by_kind["road"].cloud.points[:, 2])
    for kind in ("road", "sidewalk"):
        ground = by_kind.get(kind)
        if ground is None:
            continue
        ranked = selection.grounds.get(kind)
        if not ranked:
            raise NoMaterialsOfKind(f"selection has no materials for kind {kind!r}")
        material = ranked[min(cousin_index, len(ranked) - 1)].material_id
        z = road_z if kind == "road" else road_z + SIDEWALK_LIFT
        boundary = convex_hull_xy(ground.cloud.points[:, :2])
        planes.append(GroundPlane(kind=kind, z=z, boundary=boundary, material_id=material))
    return planes


def _separation_distance(stay: OrientedBox, move: OrientedBox, direction: np.ndarray) -> float:
    """Minimal distance to slide `move` along `direction` until footprints separate.

    Exact for rectangles: checks the four edge-normal axes; along each
    axis with direction component s the separating slide is the current
    interval overlap divided by |s|; the minimum over axes separates
    the pair (separating-axis theorem).
    """
    corners_a = stay.bev_corners()
    corners_b = move.bev_corners()
    axes = []
    for yaw in (stay.yaw, move.yaw):
        c, s = np.cos(yaw), np.sin(yaw)
        axes.append(np.array([c, s]))
        axes.append(np.array([-s, c]))
    best = np.inf
    for axis in axes:
        s = float(direction @ axis)
        proj_a = corners_a @ axis
        proj_b = corners_b @ axis
        if s > 1e-12:
            t = (proj_a.max() - proj_b.min()) / s
        elif s < -1e-12:
            t = (proj_a.min() - proj_b.max()) / s
        else:
            continue
        best = min(best, max(t, 0.0))
    return best


def place_objects(
    graph: SceneGraph,
    selection: CousinSelection,
    cousin_index: int,
    planes: list[GroundPlane],
    catalog: list[AssetRecord],
    margin: float = SEPARATION_MARGIN,
    max_sweeps: int = MAX_SWEEPS,
) -> tuple[list[Placement], list[str]]:
    """Place every node on its supporting plane and separate overlaps.

    Returns (placements ordered by node_id, warnings). Nodes whose
    footprints still overlap after the sweep cap are dropped, smaller
    area first, with a warning per dropped node.
    """
    by_kind = {p.kind: p for p in planes}
    road = by_kind.get("road")
    if road is None:
        raise NoGround("placement requires a road plane")
    sidewalk = by_kind.get("sidewalk")
    assets = {a.asset_id: a for a in catalog}

    placements = []
    for node in graph.objects:
        ranked = selection.objects.get(node.node_id)
        if not ranked:
            raise SelectionMissingNode(f"selection has no assets for node {node.node_id}")
        chosen = ranked[min(cousin_index, len(ranked) - 1)]
        asset = assets.get(chosen.asset_id)
        if asset is None:
            raise SelectionMissingNode(
                f"selected asset {chosen.asset_id!r} for node {node.node_id} not in catalog"
            )
        xy = node.centroid[:2]
        plane = road
        if sidewalk is not None and point_in_convex_polygon(xy, sidewalk.boundary):
            plane = sidewalk
        z = plane.z + asset.dims[2] / 2.0
        yaw = wrap_angle(node.heading - asset.front_yaw)
        footprint = OrientedBox(center=np.array([xy[0], xy[1], z]), dims=asset.dims, yaw=yaw)
        placements.append(
            Placement(
                node_id=node.node_id,
                asset_id=asset.asset_id,
                category=node.category,
                score=chosen.appearance,
                position=footprint.center.copy(),
                yaw=yaw,
                physics=asset.physics(),
                footprint=footprint,
            )
        )

    # area-descending sweep order; node_id breaks ties deterministically
    order = sorted(
        range(len(placements)),
        key=lambda i: (-placements[i].footprint.bev_area(), placements[i].node_id),
    )
    warnings: list[str] = []
    for _ in range(max_sweeps):
        moved = False
        for ai in range(len(order)):
            for bi in range(ai + 1, len(order)):
                big = placements[order[ai]]
                small = placements[order[bi]]
                if bev_intersection_area(big.footprint, small.footprint) <= 0.0:
                    continue
                delta = small.footprint.center[:2] - big.footprint.center[:2]
                norm = float(np.linalg.norm(delta))
                direction = delta / norm if norm > 0 else np.array([1.0, 0.0])
                dist = _separation_distance(big.footprint, small.footprint, direction)
                shift = direction * (dist + margin)
                small.footprint.center[:2] += shift
                small.position[:2] += shift
                moved = True
        if not moved:
            break

    # drop the smaller of any pair the sweeps could not separate
    dropped: set[int] = set()
    for ai in range(len(order)):
        if order[ai] in dropped:
            continue
        for bi in range(ai + 1, len(order)):
            if order[bi] in dropped:
                continue
            a = placements[order[ai]]
            b = placements[order[bi]]
            if bev_intersection_area(a.footprint, b.footprint) > 0.0:
                dropped.add(order[bi])
                warnings.append(
                    f"dropped node {b.node_id}: footprint still overlaps node "
                    f"{a.node_id} after {max_sweeps} sweeps"
                )
    if dropped:
        logger.warning("dropped %d overlapping placements", len(dropped))
    kept = [p for i, p in enumerate(placements) if i not in dropped]
    return sorted(kept, key=lambda p: p.node_id), warnings


def emit_scene(
    graph: SceneGraph,
    selection: CousinSelection,
    cousin_index: int,
    catalog: list[AssetRecord],
    out_path=None,
    extra_provenance: dict | None = None,
    margin: float = SEPARATION_MARGIN,
    max_sweeps: int = MAX_SWEEPS,
) -> SceneSpec:
    """Assemble one cousin scene; writes canonical JSON when out_path given."""
    planes = fit_ground_planes(graph.grounds, selection, cousin_index)
    placements, warnings = place_objects(
        graph, selection, cousin_index, planes, catalog, margin=margin, max_sweeps=max_sweeps
    )
    sky_id = None
    if selection.sky:
        sky_id = selection.sky[min(cousin_index, len(selection.sky) - 1)].sky_id
    selection_hash = sha256_bytes(canonical_dumps(selection_to_dict(selection)).encode("utf-8"))
    provenance = {
        "source_id": graph.source_id,
        "selection_hash": selection_hash,
        "warnings": warnings,
    }
    if extra_provenance:
        provenance.update(extra_provenance)
    spec = SceneSpec(
        scene_id=f"{graph.source_id}_c{cousin_index}",
        cousin_index=cousin_index,
        ground_planes=planes,
        sky_id=sky_id,
        placements=placements,
        provenance=provenance,
    )
    if out_path is not None:
        save_scene(spec, out_path)
    return spec


def generate_cousins(
    graph: SceneGraph,
    selection: CousinSelection,
    out_dir,
    catalog: list[AssetRecord],
    extra_provenance: dict | None = None,
    margin: float = SEPARATION_MARGIN,
    max_sweeps: int = MAX_SWEEPS,
) -> list[SceneSpec]:
    """Emit one scene file per cousin rank: scene_<sourceid>_c<i>.json."""
    os.makedirs(out_dir, exist_ok=True)
    specs = []
    for index in range(selection.k):
        path = os.path.join(out_dir, f"scene_{graph.source_id}_c{index}.json")
        specs.append(
            emit_scene(
                graph,
                selection,
                index,
                catalog,
                out_path=path,
                extra_provenance=extra_provenance,
                margin=margin,
                max_sweeps=max_sweeps,
            )
        )
    return specs


# ---------------------------------------------------------------------------
# Scene serialization


def scene_to_dict(spec: SceneSpec) -> dict:
    return {
        "scene_id": spec.scene_id,
        "cousin_index": spec.cousin_index,
        "ground_planes": [
            {
                "kind": p.kind,
                "z": p.z,
                "boundary": p.boundary.tolist(),
                "material_id": p.material_id,
            }
            for p in spec.ground_planes
        ],
        "sky_id": spec.sky_id,
        "placements": [
            {
                "node_id": p.node_id,
                "asset_id": p.asset_id,
                "category": p.category,
                "score": p.score,
                "position": p.position.tolist(),
                "yaw": p.yaw,
                "physics": p.physics,
                "footprint": {
                    "center": p.footprint.center.tolist(),
                    "dims": p.footprint.dims.tolist(),
                    "yaw": p.footprint.yaw,
                },
            }
            for p in spec.placements
        ],
        "provenance": spec.provenance,
    }


def scene_from_dict(data: dict) -> SceneSpec:
    if not isinstance(data, dict):
        raise SchemaError("expected object", "scene")
    try:
        planes = [
            GroundPlane(
                kind=p["kind"],
                z=p["z"],
                boundary=np.asarray(p["boundary"], dtype=np.float64).reshape(-1, 2),
                material_id=p["material_id"],
            )
            for p in data["ground_planes"]
        ]
        placements = [
            Placement(
                node_id=int(p["node_id"]),
                asset_id=p["asset_id"],
                category=p["category"],
                score=float(p["score"]),
                position=p["position"],
                yaw=p["yaw"],
                physics=p["physics"],
                footprint=OrientedBox(
                    center=p["footprint"]["center"],
                    dims=p["footprint"]["dims"],
                    yaw=p["footprint"]["yaw"],
                ),
            )
            for p in data["placements"]
        ]
        return SceneSpec(
            scene_id=str(data["scene_id"]),
            cousin_index=int(data["cousin_index"]),
            ground_planes=planes,
            sky_id=data.get("sky_id"),
            placements=placements,
            provenance=data.get("provenance", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed scene document: {exc}", "scene") from exc


def save_scene(spec: SceneSpec, path) -> None:
    write_canonical(path, scene_to_dict(spec))


def load_scene(path) -> SceneSpec:
    return scene_from_dict(read_json(path))
