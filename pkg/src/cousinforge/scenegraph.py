"""Unified urban scene-graph data model and its canonical serialization.

A SceneGraph bundles three layers distilled from a clip: fused object
nodes (category, centroid, oriented box, heading, per-detection crop
descriptors), up to one road and one sidewalk ground node (merged point
cloud plus appearance patches), and a sky node holding one HSV
histogram per processed frame.

Graphs are immutable-by-convention after construction and serialize to
a canonical JSON document (`scenegraph.json`): top-level keys `meta`,
`objects`, `grounds`, `sky`; sorted keys everywhere; objects in node_id
order; grounds in kind order (road before sidewalk). Saving a loaded
graph reproduces the file byte for byte.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError
from .geometry import OrientedBox, PointCloud, wrap_angle
from .jsonio import read_json, write_canonical

GROUND_KINDS = ("road", "sidewalk")

SKY_HIST_BINS = 512

PATCH_SHAPE = (64, 64, 3)


def normalize_embed(vec, what: str = "embedding") -> np.ndarray:
    """Return the L2-normalized copy of a vector; idempotent bit-exactly.

    Vectors already unit-norm within 1e-10 pass through unchanged, so
    normalizing a stored embedding on reload does not perturb bits.
    """
    arr = np.asarray(vec, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{what} is empty")
    if not np.isfinite(arr).all():
        raise ValueError(f"{what} contains non-finite values")
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise ValueError(f"{what} has zero norm")
    if abs(norm - 1.0) <= 1e-10:
        return arr
    return arr / norm


@dataclass
class CropDescriptor:
    """One contributing detection crop: embeddings and an optional patch.

    Object crops carry both embeddings; ground crops carry only the
    64x64x3 uint8 pixel patch used for material matching. Embeddings are
    L2-normalized on ingest.
    """

    frame_id: int
    semantic_embed: np.ndarray | None = None
    appearance_embed: np.ndarray | None = None
    pixel_patch: np.ndarray | None = None

    def __post_init__(self):
        self.frame_id = int(self.frame_id)
        if self.semantic_embed is not None:
            self.semantic_embed = normalize_embed(self.semantic_embed, "semantic_embed")
        if self.appearance_embed is not None:
            self.appearance_embed = normalize_embed(self.appearance_embed, "appearance_embed")
        if self.pixel_patch is not None:
            patch = np.asarray(self.pixel_patch, dtype=np.uint8)
            if patch.shape != PATCH_SHAPE:
                raise ValueError(f"pixel_patch must have shape {PATCH_SHAPE}, got {patch.shape}")
            self.pixel_patch = patch

    def __eq__(self, other):
        if not isinstance(other, CropDescriptor):
            return NotImplemented
        return (
            self.frame_id == other.frame_id
            and _opt_equal(self.semantic_embed, other.semantic_embed)
            and _opt_equal(self.appearance_embed, other.appearance_embed)
            and _opt_equal(self.pixel_patch, other.pixel_patch)
        )


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return (a is None) == (b is None)
    return np.array_equal(a, b)


@dataclass
class ObjectNode:
    """One fused persistent object: category, pose, box, and its crops.

    heading is the full direction in (-pi, pi]; it must agree with
    box.yaw modulo 90 degrees (the box fit is 90-degree symmetric, the
    heading picks one of the compatible directions).
    """

    node_id: int
    category: str
    box: OrientedBox
    heading: float
    crops: list[CropDescriptor]
    centroid: np.ndarray | None = None

    def __post_init__(self):
        self.node_id = int(self.node_id)
        self.category = str(self.category)
        self.heading = wrap_angle(self.heading)
        if self.centroid is None:
            self.centroid = self.box.center.copy()
        else:
            candidate = np.asarray(self.centroid, dtype=np.float64).reshape(3)
            if not np.allclose(candidate, self.box.center, atol=1e-9):
                raise ValueError(
                    f"centroid {candidate} must equal box.center {self.box.center}"
                )
            self.centroid = self.box.center.copy()
        if not self.crops:
            raise ValueError("ObjectNode requires at least one crop")
        residual = (self.heading - self.box.yaw) % (np.pi / 2)
        if min(residual, np.pi / 2 - residual) > 1e-9:
            raise ValueError(
                f"heading {self.heading} incompatible with box yaw {self.box.yaw} mod 90 degrees"
            )

    def __eq__(self, other):
        if not isinstance(other, ObjectNode):
            return NotImplemented
        return (
            self.node_id == other.node_id
            and self.category == other.category
            and self.box == other.box
            and self.heading == other.heading
            and np.array_equal(self.centroid, other.centroid)
            and self.crops == other.crops
        )


@dataclass
class GroundNode:
    """Merged ground cloud of one kind plus its appearance patches."""

    kind: str
    cloud: PointCloud
    crops: list[CropDescriptor] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in GROUND_KINDS:
            raise ValueError(f"ground kind must be one of {GROUND_KINDS}, got {self.kind!r}")
        if len(self.cloud) == 0:
            raise ValueError(f"{self.kind} ground node has an empty cloud")

    def __eq__(self, other):
        if not isinstance(other, GroundNode):
            return NotImplemented
        return self.kind == other.kind and self.cloud == other.cloud and self.crops == other.crops


@dataclass
class SkyCrop:
    """HSV histogram of the upper half of one frame."""

    frame_id: int
    hsv_hist: np.ndarray

    def __post_init__(self):
        self.frame_id = int(self.frame_id)
        hist = np.asarray(self.hsv_hist, dtype=np.float64).reshape(-1)
        if hist.shape != (SKY_HIST_BINS,):
            raise ValueError(f"hsv_hist must have {SKY_HIST_BINS} bins, got {hist.shape}")
        if not np.isfinite(hist).all() or (hist < 0).any():
            raise ValueError("hsv_hist must be finite and nonnegative")
        self.hsv_hist = hist

    def __eq__(self, other):
        if not isinstance(other, SkyCrop):
            return NotImplemented
        return self.frame_id == other.frame_id and np.array_equal(self.hsv_hist, other.hsv_hist)


@dataclass
class SkyNode:
    """One histogram descriptor per processed frame."""

    crops: list[SkyCrop] = field(default_factory=list)


@dataclass
class SceneGraph:
    """objects + grounds + sky with source metadata."""

    objects: list[ObjectNode] = field(default_factory=list)
    grounds: list[GroundNode] = field(default_factory=list)
    sky: SkyNode = field(default_factory=SkyNode)
    source_id: str = ""
    frame_count: int = 0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [node.node_id for node in self.objects]
        if ids != list(range(len(ids))):
            raise ValueError(f"node_ids must be contiguous from 0, got {ids}")
        kinds = [g.kind for g in self.grounds]
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"duplicate ground kinds: {kinds}")
        self.grounds = sorted(self.grounds, key=lambda g: g.kind)
        self.frame_count = int(self.frame_count)

    def ground(self, kind: str) -> GroundNode | None:
        for node in self.grounds:
            if node.kind == kind:
                return node
        return None

    def node(self, node_id: int) -> ObjectNode:
        if 0 <= node_id < len(self.objects):
            return self.objects[node_id]
        raise KeyError(f"no object node {node_id}")


# ---------------------------------------------------------------------------
# Serialization


def _crop_to_dict(crop: CropDescriptor) -> dict:
    return {
        "frame_id": crop.frame_id,
        "semantic_embed": None if crop.semantic_embed is None else crop.semantic_embed.tolist(),
        "appearance_embed": None
        if crop.appearance_embed is None
        else crop.appearance_embed.tolist(),
        "pixel_patch": None
        if crop.pixel_patch is None
        else base64.b64encode(crop.pixel_patch.tobytes()).decode("ascii"),
    }


def graph_to_dict(graph: SceneGraph) -> dict:
    objects = sorted(graph.objects, key=lambda node: node.node_id)
    grounds = sorted(graph.grounds, key=lambda g: g.kind)
    return {
        "meta": {
            "source_id": graph.source_id,
            "frame_count": graph.frame_count,
            "provenance": graph.provenance,
        },
        "objects": [
            {
                "node_id": node.node_id,
                "category": node.category,
                "centroid": node.centroid.tolist(),
                "box": {
                    "center": node.box.center.tolist(),
                    "dims": node.box.dims.tolist(),
                    "yaw": node.box.yaw,
                },
                "heading": node.heading,
                "crops": [_crop_to_dict(c) for c in node.crops],
            }
            for node in objects
        ],
        "grounds": [
            {
                "kind": g.kind,
                "cloud": g.cloud.points.tolist(),
                "crops": [_crop_to_dict(c) for c in g.crops],
            }
            for g in grounds
        ],
        "sky": {
            "crops": [
                {"frame_id": c.frame_id, "hsv_hist": c.hsv_hist.tolist()} for c in graph.sky.crops
            ]
        },
    }


def save_graph(graph: SceneGraph, path) -> None:
    """Write the graph as canonical JSON; equal graphs give equal bytes."""
    write_canonical(path, graph_to_dict(graph))


class _Reader:
    """Typed field access over parsed JSON with error paths like objects[3].box.yaw."""

    def __init__(self, data, path: str):
        self.data = data
        self.path = path

    def child(self, key):
        if not isinstance(self.data, dict):
            raise SchemaError("expected object", self.path)
        if key not in self.data:
            raise SchemaError("missing field", f"{self.path}.{key}" if self.path else key)
        return _Reader(self.data[key], f"{self.path}.{key}" if self.path else key)

    def items(self):
        if not isinstance(self.data, list):
            raise SchemaError("expected array", self.path)
        return [_Reader(v, f"{self.path}[{i}]") for i, v in enumerate(self.data)]

    def require(self, types, what: str):
        if not isinstance(self.data, types) or isinstance(self.data, bool):
            raise SchemaError(f"expected {what}", self.path)
        return self.data

    def number(self) -> float:
        return float(self.require((int, float), "number"))

    def integer(self) -> int:
        return int(self.require(int, "integer"))

    def text(self) -> str:
        return self.require(str, "string")

    def number_list(self) -> list:
        raw = self.require(list, "array")
        out = []
        for i, v in enumerate(raw):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise SchemaError("expected number", f"{self.path}[{i}]")
            out.append(float(v))
        return out


def _wrap_value_error(fn, path: str):
    try:
        return fn()
    except ValueError as exc:
        raise SchemaError(str(exc), path) from exc


def _crop_from_reader(reader: _Reader) -> CropDescriptor:
    semantic = reader.child("semantic_embed")
    appearance = reader.child("appearance_embed")
    patch = reader.child("pixel_patch")
    sem = None if semantic.data is None else semantic.number_list()
    app = None if appearance.data is None else appearance.number_list()
    patch_arr = None
    if patch.data is not None:
        raw = base64.b64decode(patch.text().encode("ascii"), validate=False)
        if len(raw) != PATCH_SHAPE[0] * PATCH_SHAPE[1] * PATCH_SHAPE[2]:
            raise SchemaError(
                f"pixel_patch must decode to {PATCH_SHAPE} bytes, got {len(raw)}", patch.path
            )
        patch_arr = np.frombuffer(raw, dtype=np.uint8).reshape(PATCH_SHAPE)
    return _wrap_value_error(
        lambda: CropDescriptor(
            frame_id=reader.child("frame_id").integer(),
            semantic_embed=sem,
            appearance_embed=app,
            pixel_patch=patch_arr,
        ),
        reader.path,
    )


def _vector3(reader: _Reader) -> np.ndarray:
    values = reader.number_list()
    if len(values) != 3:
        raise SchemaError(f"expected 3 numbers, got {len(values)}", reader.path)
    return np.array(values)


def _check_embed_dims(crops: list, attr: str, dims: set, where: str) -> None:
    for crop in crops:
        vec = getattr(crop, attr)
        if vec is not None:
            dims.add((attr, vec.size))
            if len({d for a, d in dims if a == attr}) > 1:
                raise SchemaError(f"inconsistent {attr} dimensionality", where)


def graph_from_dict(data) -> SceneGraph:
    root = _Reader(data, "")
    meta = root.child("meta")
    objects = []
    embed_dims: set = set()
    for obj in root.child("objects").items():
        box_reader = obj.child("box")
        box = _wrap_value_error(
            lambda: OrientedBox(
                center=_vector3(box_reader.child("center")),
                dims=_vector3(box_reader.child("dims")),
                yaw=box_reader.child("yaw").number(),
            ),
            box_reader.path,
        )
        crops = [_crop_from_reader(c) for c in obj.child("crops").items()]
        _check_embed_dims(crops, "semantic_embed", embed_dims, obj.path)
        _check_embed_dims(crops, "appearance_embed", embed_dims, obj.path)
        node = _wrap_value_error(
            lambda: ObjectNode(
                node_id=obj.child("node_id").integer(),
                category=obj.child("category").text(),
                box=box,
                heading=obj.child("heading").number(),
                crops=crops,
                centroid=_vector3(obj.child("centroid")),
            ),
            obj.path,
        )
        objects.append(node)
    grounds = []
    for g in root.child("grounds").items():
        cloud_vals = [_vector3(p) for p in g.child("cloud").items()]
        grounds.append(
            _wrap_value_error(
                lambda: GroundNode(
                    kind=g.child("kind").text(),
                    cloud=PointCloud(np.array(cloud_vals).reshape(-1, 3)),
                    crops=[_crop_from_reader(c) for c in g.child("crops").items()],
                ),
                g.path,
            )
        )
    sky_crops = []
    for c in root.child("sky").child("crops").items():
        sky_crops.append(
            _wrap_value_error(
                lambda: SkyCrop(
                    frame_id=c.child("frame_id").integer(),
                    hsv_hist=np.array(c.child("hsv_hist").number_list()),
                ),
                c.path,
            )
        )
    meta_prov = meta.data.get("provenance", {}) if isinstance(meta.data, dict) else {}
    if not isinstance(meta_prov, dict):
        raise SchemaError("expected object", "meta.provenance")
    return _wrap_value_error(
        lambda: SceneGraph(
            objects=objects,
            grounds=grounds,
            sky=SkyNode(crops=sky_crops),
            source_id=meta.child("source_id").text(),
            frame_count=meta.child("frame_count").integer(),
            provenance=meta_prov,
        ),
        "meta",
    )


def load_graph(path) -> SceneGraph:
    """Load and validate a scenegraph.json; SchemaError carries the field path."""
    return graph_from_dict(read_json(path))
