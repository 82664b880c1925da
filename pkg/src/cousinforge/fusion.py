"""Distillation stage: per-frame perception records to a SceneGraph.

Detections are lifted to world-frame point clouds through their frame's
depth map and merged across frames by a pairwise predicate (semantic
cosine AND voxel overlap both above threshold) closed transitively with
union-find. Ground masks fuse into merged, voxel-downsampled road and
sidewalk clouds; frame upper halves become per-frame sky histograms.

All merging runs over detections in ascending (frame_id, det_id) order,
so node ids and every floating-point reduction are reproducible
regardless of input permutation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .color import hsv_histogram
from .errors import DegenerateCloud, EmptyCloud, MissingImage, UnknownFrame
from .geometry import (
    CameraFrame,
    PointCloud,
    fit_oriented_box,
    lift_mask,
    voxel_downsample,
    voxel_keys,
    wrap_angle,
)
from .scenegraph import (
    CropDescriptor,
    GroundNode,
    ObjectNode,
    SkyCrop,
    SkyNode,
    normalize_embed,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Run-length masks


def rle_decode(counts, width: int, height: int) -> np.ndarray:
    """Decode alternating zero/one run lengths (zeros first) to a (height, width) bool mask."""
    counts = list(counts)
    if any((not isinstance(c, (int, np.integer))) or c < 0 for c in counts):
        raise ValueError(f"RLE counts must be nonnegative integers, got {counts!r}")
    total = int(sum(counts))
    if total != width * height:
        raise ValueError(f"RLE counts sum to {total}, expected {width * height}")
    values = np.arange(len(counts)) % 2
    flat = np.repeat(values.astype(bool), counts)
    return flat.reshape(height, width)


def rle_encode(mask: np.ndarray) -> list[int]:
    """Encode a bool mask as alternating zero/one run lengths, zeros first."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.nonzero(flat[1:] != flat[:-1])[0] + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


# ---------------------------------------------------------------------------
# Input records


@dataclass
class DetectionRecord:
    """One per-frame instance detection with mask and embeddings."""

    frame_id: int
    det_id: int
    label: str
    score: float
    mask_counts: list[int]
    semantic_embed: np.ndarray
    appearance_embed: np.ndarray

    def __post_init__(self):
        self.frame_id = int(self.frame_id)
        self.det_id = int(self.det_id)
        self.label = str(self.label)
        self.score = float(self.score)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        self.semantic_embed = normalize_embed(self.semantic_embed, "semantic_embed")
        self.appearance_embed = normalize_embed(self.appearance_embed, "appearance_embed")


@dataclass
class GroundMaskRecord:
    """One per-frame road or sidewalk mask with a 64x64 appearance patch."""

    frame_id: int
    kind: str
    mask_counts: list[int]
    patch: np.ndarray

    def __post_init__(self):
        self.frame_id = int(self.frame_id)
        if self.kind not in ("road", "sidewalk"):
            raise ValueError(f"ground kind must be road or sidewalk, got {self.kind!r}")
        patch = np.asarray(self.patch, dtype=np.uint8)
        if patch.shape != (64, 64, 3):
            raise ValueError(f"patch must be 64x64x3, got {patch.shape}")
        self.patch = patch


@dataclass
class FusionConfig:
    frame_stride: int = 3
    semantic_threshold: float = 0.80
    overlap_threshold: float = 0.30
    voxel: float = 0.10
    min_points: int = 20

    def __post_init__(self):
        if self.frame_stride < 1:
            raise ValueError(f"frame_stride must be >= 1, got {self.frame_stride}")
        if self.voxel <= 0:
            raise ValueError(f"voxel must be positive, got {self.voxel}")


# ---------------------------------------------------------------------------
# Object fusion


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            # root at the smaller canonical index keeps group order stable
            lo, hi = min(ri, rj), max(ri, rj)
            self.parent[hi] = lo


def _frame_index(frames: list[CameraFrame]) -> dict[int, CameraFrame]:
    ids = [f.frame_id for f in frames]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise ValueError(f"frames must be sorted by strictly increasing frame_id, got {ids}")
    return {f.frame_id: f for f in frames}


def fuse_objects(
    frames: list[CameraFrame],
    dets: list[DetectionRecord],
    cfg: FusionConfig,
) -> list[ObjectNode]:
    """Merge per-frame detections into persistent object nodes.

    Two detections merge when cosine(semantic) >= semantic_threshold AND
    cloud_overlap >= overlap_threshold; merging is the transitive
    closure over all pairs. Groups whose union cloud has fewer than
    min_points points are dropped. Node category is the modal member
    label (ties to the lexicographically smallest); heading picks, of
    the two directions compatible with the fitted box yaw, the one
    facing the mean direction toward the contributing cameras.

    Raises UnknownFrame when a detection references a frame_id absent
    from frames. Detections whose mask lifts to no valid-depth pixel
    are dropped (they carry no geometry to merge on).
    """
    by_frame = _frame_index(frames)
    if not dets:
        return []
    for det in dets:
        if det.frame_id not in by_frame:
            raise UnknownFrame(f"detection references unknown frame_id {det.frame_id}")

    order = sorted(range(len(dets)), key=lambda i: (dets[i].frame_id, dets[i].det_id))
    dets = [dets[i] for i in order]

    clouds: list[PointCloud | None] = []
    voxels: list[set | None] = []
    for det in dets:
        frame = by_frame[det.frame_id]
        mask = rle_decode(det.mask_counts, frame.width, frame.height)
        try:
            cloud = lift_mask(frame, mask)
        except EmptyCloud:
            logger.warning(
                "detection (frame %d, det %d) has no valid depth; dropped",
                det.frame_id,
                det.det_id,
            )
            clouds.append(None)
            voxels.append(None)
            continue
        clouds.append(cloud)
        voxels.append(voxel_keys(cloud, cfg.voxel))

    uf = _UnionFind(len(dets))
    for i in range(len(dets)):
        if clouds[i] is None:
            continue
        for j in range(i + 1, len(dets)):
            if clouds[j] is None:
                continue
            cos = float(np.dot(dets[i].semantic_embed, dets[j].semantic_embed))
            if cos < cfg.semantic_threshold:
                continue
            overlap = len(voxels[i] & voxels[j]) / min(len(voxels[i]), len(voxels[j]))
            if overlap >= cfg.overlap_threshold:
                uf.union(i, j)

    groups: dict[int, list[int]] = {}
    for i in range(len(dets)):
        if clouds[i] is None:
            continue
        groups.setdefault(uf.find(i), []).append(i)

    nodes: list[ObjectNode] = []
    for root in sorted(groups):
        members = groups[root]
        union_points = np.concatenate([clouds[i].points for i in members], axis=0)
        if len(union_points) < cfg.min_points:
            continue
        labels = [dets[i].label for i in members]
        counts: dict[str, int] = {}
        for label in labels:
            counts[label] = counts.get(label, 0) + 1
        best = max(counts.values())
        category = min(lbl for lbl, cnt in counts.items() if cnt == best)
        try:
            box = fit_oriented_box(PointCloud(union_points))
        except DegenerateCloud as exc:
            logger.warning("group at detection %d degenerate (%s); dropped", root, exc)
            continue
        frame_ids = sorted({dets[i].frame_id for i in members})
        cam_xy = np.array([by_frame[fid].translation[:2] for fid in frame_ids])
        mean_dir = cam_xy.mean(axis=0) - box.center[:2]
        facing = np.cos(box.yaw) * mean_dir[0] + np.sin(box.yaw) * mean_dir[1]
        heading = wrap_angle(box.yaw if facing >= 0 else box.yaw + np.pi)
        crops = [
            CropDescriptor(
                frame_id=dets[i].frame_id,
                semantic_embed=dets[i].semantic_embed,
                appearance_embed=dets[i].appearance_embed,
            )
            for i in members
        ]
        nodes.append(
            ObjectNode(
                node_id=len(nodes),
                category=category,
                box=box,
                heading=heading,
                crops=crops,
            )
        )
    return nodes


# ---------------------------------------------------------------------------
# Ground and sky


def fuse_ground(
    frames: list[CameraFrame],
    ground_masks: list[GroundMaskRecord],
    cfg: FusionConfig,
) -> list[GroundNode]:
    """Merge ground masks per kind into one downsampled cloud with patches."""
    by_frame = _frame_index(frames)
    for record in ground_masks:
        if record.frame_id not in by_frame:
            raise UnknownFrame(f"ground mask references unknown frame_id {record.frame_id}")
    nodes = []
    for kind in ("road", "sidewalk"):
        records = sorted(
            (r for r in ground_masks if r.kind == kind), key=lambda r: r.frame_id
        )
        if not records:
            continue
        pieces = []
        crops = []
        for record in records:
            frame = by_frame[record.frame_id]
            mask = rle_decode(record.mask_counts, frame.width, frame.height)
            try:
                pieces.append(lift_mask(frame, mask).points)
            except EmptyCloud:
                logger.warning("%s mask in frame %d lifts empty; skipped", kind, record.frame_id)
                continue
            crops.append(CropDescriptor(frame_id=record.frame_id, pixel_patch=record.patch))
        if not pieces:
            continue
        merged = PointCloud(np.concatenate(pieces, axis=0))
        nodes.append(GroundNode(kind=kind, cloud=voxel_downsample(merged, cfg.voxel), crops=crops))
    return nodes


def extract_sky(frames: list[CameraFrame], images: dict[int, np.ndarray]) -> SkyNode:
    """HSV histogram of the upper half of each frame, tagged by frame_id.

    `images` maps frame_id to an (height, width, 3) uint8 array. Raises
    MissingImage when a frame has no image or the shape mismatches.
    """
    _frame_index(frames)
    crops = []
    for frame in frames:
        if frame.frame_id not in images:
            raise MissingImage(f"no image for frame {frame.frame_id}")
        image = np.asarray(images[frame.frame_id])
        if image.shape != (frame.height, frame.width, 3):
            raise MissingImage(
                f"image for frame {frame.frame_id} has shape {image.shape}, "
                f"expected ({frame.height}, {frame.width}, 3)"
            )
        upper = image[: frame.height // 2]
        crops.append(SkyCrop(frame_id=frame.frame_id, hsv_hist=hsv_histogram(upper)))
    return SkyNode(crops=crops)


__all__ = [
    "DetectionRecord",
    "FusionConfig",
    "GroundMaskRecord",
    "extract_sky",
    "fuse_ground",
    "fuse_objects",
    "rle_decode",
    "rle_encode",
]
