"""Materialization stage: match graph nodes to digital-cousin catalog entries.

Object nodes go through three exact stages: semantic category match
(cosine against per-category embeddings), geometric filtering by
minimal bounding-box distortion (mean absolute log dim ratio, minimized
over the two horizontal axis assignments), and appearance re-ranking
(mean crop-to-thumbnail cosine). Ground nodes rank materials by mean
per-pixel MSE of their patches; the sky node ranks sky assets by L1
distance between mean HSV histograms.

Every ranking is a total order (score, then ascending id), so repeated
runs are byte-identical. Catalogs are searched exactly; no index.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyCatalog,
    EmptySky,
    NoCrops,
    NoMaterialsOfKind,
    NonPositiveDims,
    NoPatches,
    SchemaError,
)
from .geometry import OrientedBox
from .jsonio import read_json, read_jsonl, write_canonical
from .scenegraph import GroundNode, ObjectNode, SceneGraph, SkyNode, normalize_embed

DEFAULT_K = 5

GEOMETRY_TOP_N = 1000


@dataclass
class AssetRecord:
    """Catalog asset: metric dims, physics, attributes, embeddings."""

    asset_id: str
    category: str
    dims: np.ndarray
    front_yaw: float
    mass: float
    static_friction: float
    dynamic_friction: float
    restitution: float
    attributes: dict = field(default_factory=dict)
    category_embed: np.ndarray | None = None
    thumbnail_embed: np.ndarray | None = None

    def __post_init__(self):
        self.asset_id = str(self.asset_id)
        self.category = str(self.category)
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if not (self.dims > 0).all():
            raise ValueError(f"asset dims must be positive, got {self.dims}")
        self.front_yaw = float(self.front_yaw)
        for name in ("mass", "static_friction", "dynamic_friction"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {value}")
            setattr(self, name, value)
        self.restitution = float(self.restitution)
        if not 0.0 <= self.restitution <= 1.0:
            raise ValueError(f"restitution must be in [0, 1], got {self.restitution}")
        if self.category_embed is not None:
            self.category_embed = normalize_embed(self.category_embed, "category_embed")
        if self.thumbnail_embed is not None:
            self.thumbnail_embed = normalize_embed(self.thumbnail_embed, "thumbnail_embed")

    def physics(self) -> dict:
        return {
            "mass": self.mass,
            "static_friction": self.static_friction,
            "dynamic_friction": self.dynamic_friction,
            "restitution": self.restitution,
        }


@dataclass
class GroundMaterial:
    material_id: str
    kind: str
    thumb: np.ndarray

    def __post_init__(self):
        self.material_id = str(self.material_id)
        if self.kind not in ("road", "sidewalk"):
            raise ValueError(f"material kind must be road or sidewalk, got {self.kind!r}")
        thumb = np.asarray(self.thumb, dtype=np.uint8)
        if thumb.shape != (64, 64, 3):
            raise ValueError(f"thumb must be 64x64x3, got {thumb.shape}")
        self.thumb = thumb


@dataclass
class SkyAsset:
    sky_id: str
    hsv_hist: np.ndarray

    def __post_init__(self):
        self.sky_id = str(self.sky_id)
        hist = np.asarray(self.hsv_hist, dtype=np.float64).reshape(-1)
        if hist.shape != (512,):
            raise ValueError(f"hsv_hist must have 512 bins, got {hist.shape}")
        if not np.isfinite(hist).all() or (hist < 0).any():
            raise ValueError("hsv_hist must be finite and nonnegative")
        self.hsv_hist = hist


@dataclass
class RankedAsset:
    asset_id: str
    semantic: float
    mbbd: float
    appearance: float


@dataclass
class RankedMaterial:
    material_id: str
    mse: float


@dataclass
class RankedSky:
    sky_id: str
    l1: float


@dataclass
class CousinSelection:
    """Ranked top-K matches per object node, ground kind, and sky."""

    objects: dict[int, list[RankedAsset]] = field(default_factory=dict)
    grounds: dict[str, list[RankedMaterial]] = field(default_factory=dict)
    sky: list[RankedSky] = field(default_factory=list)
    k: int = DEFAULT_K


# ---------------------------------------------------------------------------
# Stages


def _mean_embed(node: ObjectNode, attr: str) -> np.ndarray:
    vecs = [getattr(c, attr) for c in node.crops if getattr(c, attr) is not None]
    if not vecs:
        raise NoCrops(f"node {node.node_id} has no crop with {attr}")
    mean = np.mean(np.stack(vecs, axis=0), axis=0)
    norm = np.linalg.norm(mean)
    return mean / norm if norm > 0 else mean


def semantic_match(node: ObjectNode, catalog: list[AssetRecord]) -> str:
    """Best-cosine catalog category for the node's mean semantic embedding.

    Each category is represented by the category_embed of its
    lexicographically first asset; ties resolve to the smallest
    category name.
    """
    if not catalog:
        raise EmptyCatalog("semantic_match requires a non-empty catalog")
    representative: dict[str, tuple[str, np.ndarray]] = {}
    for asset in catalog:
        if asset.category_embed is None:
            raise ValueError(f"asset {asset.asset_id} lacks category_embed")
        current = representative.get(asset.category)
        if current is None or asset.asset_id < current[0]:
            representative[asset.category] = (asset.asset_id, asset.category_embed)
    query = _mean_embed(node, "semantic_embed")
    best_category = None
    best_cos = -np.inf
    for category in sorted(representative):
        cos = float(np.dot(query, representative[category][1]))
        if cos > best_cos:
            best_cos = cos
            best_category = category
    return best_category


def mbbd(query: OrientedBox, asset_dims) -> float:
    """Minimal bounding-box distortion between query box and asset dims.

    min over the two horizontal axis assignments of the mean absolute
    log dim ratio; 0 iff dims match up to a horizontal swap.
    """
    dims = np.asarray(asset_dims, dtype=np.float64).reshape(3)
    if not (dims > 0).all() or not np.isfinite(dims).all():
        raise NonPositiveDims(f"asset dims must be positive, got {dims}")
    q = query.dims
    direct = np.abs(np.log(dims / q)).mean()
    swapped = np.abs(np.log(dims[[1, 0, 2]] / q)).mean()
    return float(min(direct, swapped))


def geometry_filter(
    node: ObjectNode,
    assets_in_category: list[AssetRecord],
    top_n: int = GEOMETRY_TOP_N,
) -> list[tuple[AssetRecord, float]]:
    """Candidates sorted by ascending (mBBD, asset_id), truncated to top_n."""
    scored = [(asset, mbbd(node.box, asset.dims)) for asset in assets_in_category]
    scored.sort(key=lambda pair: (pair[1], pair[0].asset_id))
    return scored[:top_n]


def appearance_rank(
    node: ObjectNode,
    candidates: list[AssetRecord],
    k: int,
) -> list[tuple[AssetRecord, float]]:
    """Top-k candidates by mean crop-to-thumbnail cosine, descending."""
    crops = [c.appearance_embed for c in node.crops if c.appearance_embed is not None]
    if not crops:
        raise NoCrops(f"node {node.node_id} has no crop with appearance_embed")
    crop_matrix = np.stack(crops, axis=0)
    scored = []
    for asset in candidates:
        if asset.thumbnail_embed is None:
            raise ValueError(f"asset {asset.asset_id} lacks thumbnail_embed")
        score = float((crop_matrix @ asset.thumbnail_embed).mean())
        scored.append((asset, score))
    scored.sort(key=lambda pair: (-pair[1], pair[0].asset_id))
    return scored[:k]


def match_ground_material(
    ground: GroundNode,
    materials: list[GroundMaterial],
    k: int,
) -> list[RankedMaterial]:
    """Top-k materials of the ground's kind by mean per-pixel MSE, ascending."""
    patches = [c.pixel_patch for c in ground.crops if c.pixel_patch is not None]
    if not patches:
        raise NoPatches(f"{ground.kind} ground node has no pixel patches")
    kind_materials = [m for m in materials if m.kind == ground.kind]
    if not kind_materials:
        raise NoMaterialsOfKind(f"no materials of kind {ground.kind!r}")
    stack = np.stack(patches, axis=0).astype(np.float64) / 255.0
    scored = []
    for material in kind_materials:
        thumb = material.thumb.astype(np.float64) / 255.0
        mse = float(((stack - thumb) ** 2).mean())
        scored.append(RankedMaterial(material_id=material.material_id, mse=mse))
    scored.sort(key=lambda r: (r.mse, r.material_id))
    return scored[:k]


def match_sky(sky: SkyNode, skies: list[SkyAsset], k: int) -> list[RankedSky]:
    """Top-k sky assets by L1 distance to the mean crop histogram, ascending."""
    if not sky.crops:
        raise EmptySky("sky node has no crops")
    mean_hist = np.mean(np.stack([c.hsv_hist for c in sky.crops], axis=0), axis=0)
    scored = [
        RankedSky(sky_id=s.sky_id, l1=float(np.abs(mean_hist - s.hsv_hist).sum()))
        for s in skies
    ]
    scored.sort(key=lambda r: (r.l1, r.sky_id))
    return scored[:k]


def materialize(
    graph: SceneGraph,
    catalog: list[AssetRecord],
    materials: list[GroundMaterial],
    skies: list[SkyAsset],
    k: int = DEFAULT_K,
) -> CousinSelection:
    """Compose the three object stages plus ground and sky matching."""
    selection = CousinSelection(k=k)
    for node in graph.objects:
        try:
            category = semantic_match(node, catalog)
            in_category = [a for a in catalog if a.category == category]
            filtered = geometry_filter(node, in_category)
            mbbd_by_id = {asset.asset_id: score for asset, score in filtered}
            ranked = appearance_rank(node, [asset for asset, _ in filtered], k)
            query = _mean_embed(node, "semantic_embed")
            rep = min(
                (a for a in in_category), key=lambda a: a.asset_id
            ).category_embed
            semantic_score = float(np.dot(query, rep))
            selection.objects[node.node_id] = [
                RankedAsset(
                    asset_id=asset.asset_id,
                    semantic=semantic_score,
                    mbbd=mbbd_by_id[asset.asset_id],
                    appearance=score,
                )
                for asset, score in ranked
            ]
        except (EmptyCatalog, NoCrops, NonPositiveDims, ValueError) as exc:
            raise type(exc)(f"node {node.node_id}: {exc}") from exc
    for ground in graph.grounds:
        selection.grounds[ground.kind] = match_ground_material(ground, materials, k)
    selection.sky = match_sky(graph.sky, skies, k)
    return selection


# ---------------------------------------------------------------------------
# Catalog and selection files


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise SchemaError("missing field", f"{where}.{key}")
    return record[key]


def load_assets(path) -> list[AssetRecord]:
    """Parse assets.jsonl into AssetRecords."""
    assets = []
    for i, record in enumerate(read_jsonl(path)):
        where = f"assets[{i}]"
        try:
            assets.append(
                AssetRecord(
                    asset_id=_require(record, "asset_id", where),
                    category=_require(record, "category", where),
                    dims=_require(record, "dims", where),
                    front_yaw=_require(record, "front_yaw", where),
                    mass=_require(record, "mass", where),
                    static_friction=_require(record, "static_friction", where),
                    dynamic_friction=_require(record, "dynamic_friction", where),
                    restitution=_require(record, "restitution", where),
                    attributes=record.get("attributes", {}),
                    category_embed=_require(record, "category_embed", where),
                    thumbnail_embed=_require(record, "thumbnail_embed", where),
                )
            )
        except (ValueError, TypeError) as exc:
            raise SchemaError(str(exc), where) from exc
    return assets


def load_materials(path) -> list[GroundMaterial]:
    """Parse materials.jsonl; thumb is base64 of raw 64x64x3 bytes."""
    materials = []
    for i, record in enumerate(read_jsonl(path)):
        where = f"materials[{i}]"
        try:
            raw = base64.b64decode(str(_require(record, "thumb", where)).encode("ascii"))
            if len(raw) != 64 * 64 * 3:
                raise ValueError(f"thumb must decode to {64 * 64 * 3} bytes, got {len(raw)}")
            materials.append(
                GroundMaterial(
                    material_id=_require(record, "material_id", where),
                    kind=_require(record, "kind", where),
                    thumb=np.frombuffer(raw, dtype=np.uint8).reshape(64, 64, 3),
                )
            )
        except (ValueError, TypeError) as exc:
            raise SchemaError(str(exc), where) from exc
    return materials


def load_skies(path) -> list[SkyAsset]:
    """Parse skies.jsonl (512 floats per record)."""
    skies = []
    for i, record in enumerate(read_jsonl(path)):
        where = f"skies[{i}]"
        try:
            skies.append(
                SkyAsset(
                    sky_id=_require(record, "sky_id", where),
                    hsv_hist=_require(record, "hsv_hist", where),
                )
            )
        except (ValueError, TypeError) as exc:
            raise SchemaError(str(exc), where) from exc
    return skies


def selection_to_dict(selection: CousinSelection) -> dict:
    return {
        "k": selection.k,
        "objects": {
            str(node_id): [
                {
                    "asset_id": r.asset_id,
                    "semantic": r.semantic,
                    "mbbd": r.mbbd,
                    "appearance": r.appearance,
                }
                for r in ranked
            ]
            for node_id, ranked in selection.objects.items()
        },
        "grounds": {
            kind: [{"material_id": r.material_id, "mse": r.mse} for r in ranked]
            for kind, ranked in selection.grounds.items()
        },
        "sky": [{"sky_id": r.sky_id, "l1": r.l1} for r in selection.sky],
    }


def selection_from_dict(data: dict) -> CousinSelection:
    if not isinstance(data, dict):
        raise SchemaError("expected object", "selection")
    try:
        objects = {
            int(node_id): [RankedAsset(**entry) for entry in ranked]
            for node_id, ranked in data.get("objects", {}).items()
        }
        grounds = {
            kind: [RankedMaterial(**entry) for entry in ranked]
            for kind, ranked in data.get("grounds", {}).items()
        }
        sky = [RankedSky(**entry) for entry in data.get("sky", [])]
        return CousinSelection(
            objects=objects, grounds=grounds, sky=sky, k=int(data.get("k", DEFAULT_K))
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(str(exc), "selection") from exc


def save_selection(selection: CousinSelection, path) -> None:
    write_canonical(path, selection_to_dict(selection))


def load_selection(path) -> CousinSelection:
    return selection_from_dict(read_json(path))
